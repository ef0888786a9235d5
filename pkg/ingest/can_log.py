"""
CAN frame model and Car-Hacking-style CSV log codec.

Purpose: Define the atomic dataset unit (one CAN message plus its class label) and read/write
the line format used by the public car hacking captures:

    timestamp,canid_hex4,dlc,data0,...,data{dlc-1},flag

Key decisions:
- Timestamps are held as integer microseconds so parse/emit round-trips exactly
- Flag "T" marks an injected frame (labelled with the capture's attack class), "R" a regular one
- The class label comes from the source capture, never from the line itself
- Extended (29-bit) identifiers are rejected; only classical 11-bit frames are modelled
- Every malformed line maps to a typed RecordParseError carrying its line number
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation, ROUND_HALF_EVEN
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple, Union

logger = logging.getLogger(__name__)

MAX_STANDARD_ID = 0x7FF
MAX_DLC = 8
MICROS_PER_SECOND = 1_000_000

# Captures whose first timestamp is past this point are treated as epoch-based and re-based.
EPOCH_THRESHOLD_US = 100_000_000 * MICROS_PER_SECOND

FLAG_INJECTED = "T"
FLAG_REGULAR = "R"

_HEX_RE = re.compile(r"^[0-9a-fA-F]+$")


class AttackClass(IntEnum):
    """Traffic classes in confusion-matrix order."""

    NORMAL = 0
    DOS = 1
    FUZZY = 2
    GEAR_SPOOF = 3
    RPM_SPOOF = 4

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]

    @property
    def is_attack(self) -> bool:
        return self is not AttackClass.NORMAL

    @classmethod
    def attacks(cls) -> List["AttackClass"]:
        return [c for c in cls if c.is_attack]


_DISPLAY_NAMES = {
    AttackClass.NORMAL: "Normal",
    AttackClass.DOS: "DoS",
    AttackClass.FUZZY: "Fuzzy",
    AttackClass.GEAR_SPOOF: "GearSpoof",
    AttackClass.RPM_SPOOF: "RpmSpoof",
}

# File-stem aliases used by the public dataset (DoS_dataset.csv, gear_dataset.csv, ...).
_CLASS_ALIASES = {
    "normal": AttackClass.NORMAL,
    "attack_free": AttackClass.NORMAL,
    "attackfree": AttackClass.NORMAL,
    "normal_run_data": AttackClass.NORMAL,
    "dos": AttackClass.DOS,
    "fuzzy": AttackClass.FUZZY,
    "gear": AttackClass.GEAR_SPOOF,
    "gearspoof": AttackClass.GEAR_SPOOF,
    "gear_spoof": AttackClass.GEAR_SPOOF,
    "rpm": AttackClass.RPM_SPOOF,
    "rpmspoof": AttackClass.RPM_SPOOF,
    "rpm_spoof": AttackClass.RPM_SPOOF,
}

NUM_CLASSES = len(AttackClass)


class CanLogError(Exception):
    """Base exception for CAN log errors."""
    pass


class UnknownClassNameError(CanLogError):
    """Raised when a class name or file stem cannot be mapped to an AttackClass."""
    pass


class LabelFlagMismatchError(CanLogError):
    """Raised when a record's injected flag disagrees with its label."""
    pass


class FrameValidationError(CanLogError):
    """Base exception for violated CanFrame invariants."""
    pass


class CanIdRangeError(FrameValidationError):
    """Arbitration id outside the 11-bit range."""
    pass


class DlcRangeError(FrameValidationError):
    """Data length code outside 0..8."""
    pass


class PayloadLengthError(FrameValidationError):
    """Payload length differs from the data length code."""
    pass


class TimestampRangeError(FrameValidationError):
    """Negative timestamp."""
    pass


class PayloadTypeError(FrameValidationError):
    """Payload is not an immutable byte string."""
    pass


class RecordParseError(CanLogError):
    """Base exception for malformed CSV lines."""

    def __init__(self, message: str, line_number: int):
        self.line_number = line_number
        self.reason = message
        super().__init__(f"line {line_number}: {message}")


class FieldCountError(RecordParseError):
    """Wrong number of comma separated fields for the declared dlc."""
    pass


class NonHexFieldError(RecordParseError):
    """An id or payload field is not valid hexadecimal."""
    pass


class TimestampParseError(RecordParseError, TimestampRangeError):
    """Timestamp field is not a non-negative decimal number."""
    pass


class FlagParseError(RecordParseError):
    """Flag field is not R/T, or T appears in an attack-free capture."""
    pass


class DlcParseError(RecordParseError, DlcRangeError):
    """dlc field is not an integer in 0..8."""
    pass


class CanIdParseError(RecordParseError, CanIdRangeError):
    """Arbitration id above 0x7FF."""
    pass


@dataclass(frozen=True)
class CanFrame:
    """One classical CAN data frame.

    Construction does not validate; use make_frame() or validate_frame() at boundaries.
    """

    timestamp_us: int
    can_id: int
    dlc: int
    data: bytes

    @property
    def timestamp(self) -> float:
        """Seconds since capture start."""
        return self.timestamp_us / MICROS_PER_SECOND


@dataclass(frozen=True)
class LabeledRecord:
    """A frame together with its traffic class."""

    frame: CanFrame
    label: AttackClass
    injected: bool

    def __post_init__(self) -> None:
        if self.injected != self.label.is_attack:
            raise LabelFlagMismatchError(
                f"injected={self.injected} is inconsistent with label {self.label.display_name}"
            )

    @property
    def flag(self) -> str:
        return FLAG_INJECTED if self.injected else FLAG_REGULAR


def class_from_name(name: str) -> AttackClass:
    """Map a class name or dataset file stem to an AttackClass.

    Accepts canonical names ("DoS", "GearSpoof"), enum names ("GEAR_SPOOF") and the stems of
    the public dataset files ("DoS_dataset", "gear_dataset", "RPM_dataset", "normal_run_data").

    Raises:
        UnknownClassNameError: If nothing matches
    """
    key = name.strip().lower().replace("-", "_")
    for suffix in ("_dataset", ".csv", ".txt"):
        if key.endswith(suffix):
            key = key[: -len(suffix)]
    if key in _CLASS_ALIASES:
        return _CLASS_ALIASES[key]
    for cls in AttackClass:
        if key in (cls.display_name.lower(), cls.name.lower()):
            return cls
    raise UnknownClassNameError(f"Cannot map {name!r} to a traffic class")


def validate_frame(frame: CanFrame) -> CanFrame:
    """Return the frame if every CanFrame invariant holds.

    Raises:
        CanIdRangeError, DlcRangeError, PayloadTypeError, PayloadLengthError,
        TimestampRangeError: The first violated invariant
    """
    if not 0 <= frame.can_id <= MAX_STANDARD_ID:
        raise CanIdRangeError(f"can_id 0x{frame.can_id:x} outside 0x000-0x7FF")
    if not 0 <= frame.dlc <= MAX_DLC:
        raise DlcRangeError(f"dlc {frame.dlc} outside 0-8")
    if not isinstance(frame.data, bytes):
        raise PayloadTypeError(f"payload must be bytes, got {type(frame.data).__name__}")
    if len(frame.data) != frame.dlc:
        raise PayloadLengthError(f"dlc {frame.dlc} but payload has {len(frame.data)} bytes")
    if frame.timestamp_us < 0:
        raise TimestampRangeError(f"negative timestamp {frame.timestamp_us}us")
    return frame


def make_frame(timestamp_us: int, can_id: int, data: Union[bytes, Iterable[int]],
               dlc: Optional[int] = None) -> CanFrame:
    """Build and validate a frame; dlc defaults to the payload length."""
    payload = data if isinstance(data, bytes) else bytes(data)
    frame = CanFrame(
        timestamp_us=int(timestamp_us),
        can_id=int(can_id),
        dlc=len(payload) if dlc is None else int(dlc),
        data=payload,
    )
    return validate_frame(frame)


def _parse_timestamp_us(field: str, line_number: int) -> int:
    try:
        value = Decimal(field.strip())
    except InvalidOperation:
        raise TimestampParseError(f"timestamp {field!r} is not a decimal number", line_number)
    if not value.is_finite() or value < 0:
        raise TimestampParseError(f"timestamp {field!r} must be finite and >= 0", line_number)
    try:
        micros = (value * MICROS_PER_SECOND).to_integral_value(rounding=ROUND_HALF_EVEN)
    except ArithmeticError:
        raise TimestampParseError(f"timestamp {field!r} is out of range", line_number)
    return int(micros)


def _parse_hex(field: str, what: str, max_digits: int, line_number: int) -> int:
    text = field.strip()
    if not text or len(text) > max_digits or not _HEX_RE.match(text):
        raise NonHexFieldError(f"{what} {field!r} is not valid hex", line_number)
    return int(text, 16)


def _parse_fields(line: str, line_number: int) -> Tuple[CanFrame, str]:
    fields = line.rstrip("\r\n").split(",")
    if len(fields) < 4:
        raise FieldCountError(f"expected at least 4 fields, got {len(fields)}", line_number)

    timestamp_us = _parse_timestamp_us(fields[0], line_number)
    can_id = _parse_hex(fields[1], "can id", 8, line_number)
    if can_id > MAX_STANDARD_ID:
        raise CanIdParseError(f"can id 0x{can_id:x} exceeds 0x7FF", line_number)

    dlc_text = fields[2].strip()
    if not (dlc_text.isascii() and dlc_text.isdigit()):
        raise DlcParseError(f"dlc {fields[2]!r} is not an integer", line_number)
    dlc = int(dlc_text)
    if dlc > MAX_DLC:
        raise DlcParseError(f"dlc {dlc} out of range 0-8", line_number)

    expected = 3 + dlc + 1
    if len(fields) != expected:
        raise FieldCountError(
            f"dlc {dlc} needs {expected} fields, got {len(fields)}", line_number
        )

    payload = bytes(
        _parse_hex(field, f"data byte {i}", 2, line_number)
        for i, field in enumerate(fields[3:3 + dlc])
    )

    flag = fields[-1].strip()
    if flag not in (FLAG_INJECTED, FLAG_REGULAR):
        raise FlagParseError(f"flag {flag!r} is not 'R' or 'T'", line_number)
    return CanFrame(timestamp_us=timestamp_us, can_id=can_id, dlc=dlc, data=payload), flag


def parse_frame(line: str, line_number: int = 1) -> CanFrame:
    """Parse the frame part of a CSV line; the flag is checked but not interpreted."""
    return _parse_fields(line, line_number)[0]


def parse_record(line: str, source_class: AttackClass, line_number: int = 1) -> LabeledRecord:
    """Parse one CSV line into a validated LabeledRecord.

    Args:
        line: Line text, with or without the trailing newline
        source_class: Attack class of the capture the line comes from
        line_number: 1-based line number used in error messages

    Returns:
        LabeledRecord; "T" lines carry source_class, "R" lines are Normal

    Raises:
        RecordParseError: One subclass per failure kind (field count, hex, dlc, id, flag,
            timestamp)
    """
    frame, flag = _parse_fields(line, line_number)
    if flag == FLAG_INJECTED:
        if not source_class.is_attack:
            raise FlagParseError("injected flag 'T' in an attack-free capture", line_number)
        label, injected = source_class, True
    else:
        label, injected = AttackClass.NORMAL, False
    return LabeledRecord(frame=frame, label=label, injected=injected)


def format_timestamp(timestamp_us: int) -> str:
    """Seconds with exactly six fractional digits."""
    return f"{timestamp_us // MICROS_PER_SECOND}.{timestamp_us % MICROS_PER_SECOND:06d}"


def emit_record(rec: LabeledRecord) -> str:
    """Render a record as one CSV line (no trailing newline)."""
    frame = rec.frame
    parts = [format_timestamp(frame.timestamp_us), f"{frame.can_id:04x}", str(frame.dlc)]
    parts.extend(f"{b:02x}" for b in frame.data)
    parts.append(rec.flag)
    return ",".join(parts)


def iter_capture(path: Union[str, Path], source_class: AttackClass) -> Iterator[LabeledRecord]:
    """Yield records from a capture file, skipping blank lines. Timestamps are not re-based."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            yield parse_record(line, source_class, line_number)


def rebase(records: List[LabeledRecord]) -> List[LabeledRecord]:
    """Shift timestamps so the first record sits at t=0."""
    if not records:
        return records
    origin = records[0].frame.timestamp_us
    if origin == 0:
        return records
    shifted = []
    for rec in records:
        frame = rec.frame
        shifted.append(LabeledRecord(
            frame=CanFrame(frame.timestamp_us - origin, frame.can_id, frame.dlc, frame.data),
            label=rec.label,
            injected=rec.injected,
        ))
    return shifted


def read_capture(path: Union[str, Path], source_class: AttackClass,
                 rebase_epoch: bool = True) -> List[LabeledRecord]:
    """Read a whole capture file.

    Args:
        path: CSV file in the car hacking line format
        source_class: Attack class of the capture
        rebase_epoch: Re-base absolute (epoch) timestamps to the first record

    Returns:
        Records in file order

    Raises:
        RecordParseError: On the first malformed line
    """
    records = list(iter_capture(path, source_class))
    if rebase_epoch and records and records[0].frame.timestamp_us >= EPOCH_THRESHOLD_US:
        logger.info(f"Re-basing epoch timestamps in {path}")
        records = rebase(records)
    logger.debug(f"Read {len(records)} records from {path} as {source_class.display_name}")
    return records


def write_capture(records: Iterable[LabeledRecord], path: Union[str, Path]) -> int:
    """Write records one per line with LF endings. Returns the record count."""
    count = 0
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(emit_record(rec))
            fh.write("\n")
            count += 1
    logger.debug(f"Wrote {count} records to {out}")
    return count
