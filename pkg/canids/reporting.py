"""
SVG training curves.

Draws the per-epoch history as two stacked line charts (losses; BA/PREC/DR/F1) with
reportlab's graphics package and writes them with renderSVG.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

from reportlab.graphics import renderSVG
from reportlab.graphics.charts.legends import Legend
from reportlab.graphics.charts.lineplots import LinePlot
from reportlab.graphics.shapes import Drawing, String
from reportlab.lib import colors

from canids.train import TrainHistory

logger = logging.getLogger(__name__)

WIDTH = 480
PANEL_HEIGHT = 200
_PALETTE = (colors.HexColor('#1f77b4'), colors.HexColor('#ff7f0e'),
            colors.HexColor('#2ca02c'), colors.HexColor('#d62728'))


def _series(values: Sequence[float]) -> List[Tuple[int, float]]:
    return [(epoch, float(v)) for epoch, v in enumerate(values, start=1)]


def _panel(drawing: Drawing, y0: float, title: str, curves: Sequence[Tuple[str, Sequence[float]]],
           y_min: float, y_max: float) -> None:
    n_epochs = max(len(values) for _, values in curves)
    plot = LinePlot()
    plot.x, plot.y = 50, y0 + 30
    plot.width, plot.height = WIDTH - 170, PANEL_HEIGHT - 60
    plot.data = [_series(values) for _, values in curves]
    plot.xValueAxis.valueMin = 1
    plot.xValueAxis.valueMax = max(2, n_epochs)
    plot.xValueAxis.valueStep = 1 if n_epochs <= 20 else None
    plot.yValueAxis.valueMin = y_min
    plot.yValueAxis.valueMax = y_max
    for i in range(len(curves)):
        plot.lines[i].strokeColor = _PALETTE[i % len(_PALETTE)]
        plot.lines[i].strokeWidth = 1.5
    drawing.add(plot)

    legend = Legend()
    legend.x, legend.y = WIDTH - 105, y0 + PANEL_HEIGHT - 40
    legend.fontSize = 8
    legend.colorNamePairs = [(_PALETTE[i % len(_PALETTE)], name) for i, (name, _) in enumerate(curves)]
    drawing.add(legend)
    drawing.add(String(50, y0 + PANEL_HEIGHT - 18, title, fontSize=10))


def history_drawing(history: TrainHistory) -> Drawing:
    if len(history) == 0:
        raise ValueError('history is empty')
    drawing = Drawing(WIDTH, 2 * PANEL_HEIGHT)
    loss_top = max(max(history.train_loss), max(history.val_loss))
    _panel(drawing, PANEL_HEIGHT, 'Loss per epoch',
           [('train_loss', history.train_loss), ('val_loss', history.val_loss)],
           0.0, loss_top * 1.1 if loss_top > 0 else 1.0)
    _panel(drawing, 0, 'Validation metrics per epoch',
           [('BA', history.ba), ('PREC', history.prec), ('DR', history.dr), ('F1', history.f1)],
           0.0, 1.0)
    return drawing


def plot_history_svg(history: TrainHistory, path: Union[str, Path]) -> Path:
    """Write the training curves to an SVG file."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    renderSVG.drawToFile(history_drawing(history), str(out))
    logger.info(f'Wrote training curves to {out}')
    return out
