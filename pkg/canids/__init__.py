# canids package: tokenization, numpy transformer classifiers, LoRA, training and metrics
# for CAN bus intrusion detection. Data acquisition lives in the sibling `ingest` package.

from .config import RunConfig, load_run_config, setup_logging
from .model import TransformerModel, predict_label, predict_records
from .checkpoint import load_checkpoint, save_checkpoint
from .train import train_run
from .metrics import compute_metrics, confusion_matrix

__all__ = [
    'RunConfig',
    'load_run_config',
    'setup_logging',
    'TransformerModel',
    'predict_label',
    'predict_records',
    'load_checkpoint',
    'save_checkpoint',
    'train_run',
    'compute_metrics',
    'confusion_matrix',
]
