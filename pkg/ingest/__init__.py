# Ingest package: CAN log codec, synthetic traffic and capture storage

from .can_log import (
    AttackClass,
    CanFrame,
    LabeledRecord,
    CanLogError,
    RecordParseError,
    FrameValidationError,
    parse_record,
    parse_frame,
    emit_record,
    validate_frame,
    read_capture,
    write_capture,
    class_from_name,
)
from .traffic_sim import (
    AttackSpec,
    BackgroundProfile,
    TrafficSimError,
    generate_normal,
    inject_attack,
    simulate_capture,
    generate_table_layout,
)

__all__ = [
    'AttackClass',
    'CanFrame',
    'LabeledRecord',
    'CanLogError',
    'RecordParseError',
    'FrameValidationError',
    'parse_record',
    'parse_frame',
    'emit_record',
    'validate_frame',
    'read_capture',
    'write_capture',
    'class_from_name',
    'AttackSpec',
    'BackgroundProfile',
    'TrafficSimError',
    'generate_normal',
    'inject_attack',
    'simulate_capture',
    'generate_table_layout',
]
