"""
Synthetic CAN traffic generator with attack injection.

Purpose: Produce labeled captures shaped like the public car hacking dataset: periodic
background ECU traffic with DoS, fuzzy, gear-spoofing and RPM-spoofing frames injected at
fixed intervals.

Key decisions:
- Time is integer microseconds; a message at t=0 is included, so a period P over a window W
  yields floor(W/P)+1 frames
- Randomness comes from numpy PCG64 generators seeded through SeedSequence([seed, stream]),
  one stream per background signal or attack spec
- Injected frames coexist with background frames (pure interleave, no displacement); on equal
  timestamps the background frame comes first
- Several specs of one class are allowed as long as their windows do not overlap
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from dotenv import dotenv_values

from ingest.can_log import (
    AttackClass,
    CanFrame,
    LabeledRecord,
    MAX_STANDARD_ID,
    MICROS_PER_SECOND,
    class_from_name,
)

logger = logging.getLogger(__name__)

GEAR_TARGET_ID = 0x43F
RPM_TARGET_ID = 0x316
GEAR_SPOOF_PAYLOAD = bytes.fromhex("0145600dff000000")
RPM_SPOOF_PAYLOAD = bytes.fromhex("4529242429240000")

DEFAULT_INTERVALS_MS = {
    AttackClass.DOS: 0.3,
    AttackClass.FUZZY: 0.5,
    AttackClass.GEAR_SPOOF: 1.0,
    AttackClass.RPM_SPOOF: 1.0,
}

_SPOOF_KINDS = (AttackClass.GEAR_SPOOF, AttackClass.RPM_SPOOF)


class TrafficSimError(Exception):
    """Base exception for traffic generation errors."""
    pass


class ProfileError(TrafficSimError):
    """Raised for an invalid background profile."""
    pass


class AttackSpecError(TrafficSimError):
    """Raised for an invalid attack spec."""
    pass


class AttackWindowError(TrafficSimError):
    """Raised when an attack window falls outside the capture."""
    pass


class OverlappingAttackError(TrafficSimError):
    """Raised when two specs of the same class overlap in time."""
    pass


class PayloadMode(str, Enum):
    CONSTANT = "constant"
    COUNTER = "counter"
    RANDOM_WALK = "random-walk"


def _ms_to_us(value_ms: float, what: str, error: type) -> int:
    micros = int(round(value_ms * 1000))
    if abs(micros - value_ms * 1000) > 1e-6:
        raise error(f"{what} {value_ms} ms is not a whole number of microseconds")
    return micros


@dataclass(frozen=True)
class BackgroundSignal:
    """One periodic ECU message."""

    can_id: int
    period_ms: float
    mode: PayloadMode = PayloadMode.CONSTANT
    dlc: int = 8
    initial: Optional[bytes] = None


@dataclass(frozen=True)
class BackgroundProfile:
    signals: Tuple[BackgroundSignal, ...]
    duration_s: float
    seed: int = 0

    @property
    def duration_us(self) -> int:
        return int(round(self.duration_s * MICROS_PER_SECOND))

    def validate(self) -> "BackgroundProfile":
        if not self.signals:
            raise ProfileError("Background profile has no signals")
        if self.duration_s < 0:
            raise ProfileError(f"Negative capture duration {self.duration_s}")
        for sig in self.signals:
            if sig.can_id == 0:
                raise ProfileError("Background traffic may not use id 0x000")
            if not 0 < sig.can_id <= MAX_STANDARD_ID:
                raise ProfileError(f"Background id 0x{sig.can_id:x} outside 0x001-0x7FF")
            if sig.period_ms <= 0:
                raise ProfileError(f"Period for 0x{sig.can_id:03x} must be > 0")
            _ms_to_us(sig.period_ms, f"period for 0x{sig.can_id:03x}", ProfileError)
            if not 0 <= sig.dlc <= 8:
                raise ProfileError(f"dlc {sig.dlc} for 0x{sig.can_id:03x} outside 0-8")
            if sig.initial is not None and len(sig.initial) != sig.dlc:
                raise ProfileError(f"Initial payload for 0x{sig.can_id:03x} must be {sig.dlc} bytes")
        return self


@dataclass(frozen=True)
class AttackSpec:
    """An injection schedule for one attack class.

    end_ms=None means "until the end of the capture".
    """

    kind: AttackClass
    interval_ms: float
    start_ms: float = 0.0
    end_ms: Optional[float] = None
    target_id: Optional[int] = None
    payload: Optional[bytes] = None

    def __post_init__(self) -> None:
        if not self.kind.is_attack:
            raise AttackSpecError("Attack spec kind must not be Normal")
        if self.interval_ms <= 0:
            raise AttackSpecError(f"interval_ms must be > 0, got {self.interval_ms}")
        _ms_to_us(self.interval_ms, "interval", AttackSpecError)
        spoof = self.kind in _SPOOF_KINDS
        if spoof and self.target_id is None:
            raise AttackSpecError(f"{self.kind.display_name} requires a target_id")
        if not spoof and self.target_id is not None:
            raise AttackSpecError(f"{self.kind.display_name} does not take a target_id")
        if spoof and (self.payload is None or len(self.payload) > 8):
            raise AttackSpecError(f"{self.kind.display_name} requires a payload of 0-8 bytes")
        if self.target_id is not None and not 0 <= self.target_id <= MAX_STANDARD_ID:
            raise AttackSpecError(f"target_id 0x{self.target_id:x} outside 0x000-0x7FF")

    @property
    def interval_us(self) -> int:
        return _ms_to_us(self.interval_ms, "interval", AttackSpecError)

    def window_us(self, duration_us: int) -> Tuple[int, int]:
        start = _ms_to_us(self.start_ms, "start", AttackWindowError)
        end = duration_us if self.end_ms is None else _ms_to_us(self.end_ms, "end", AttackWindowError)
        return start, end


def default_attack_spec(kind: AttackClass, interval_ms: Optional[float] = None,
                        start_ms: float = 0.0, end_ms: Optional[float] = None) -> AttackSpec:
    """Attack spec with the standard interval and, for spoofing, the default target and payload."""
    interval = DEFAULT_INTERVALS_MS[kind] if interval_ms is None else interval_ms
    target, payload = None, None
    if kind is AttackClass.GEAR_SPOOF:
        target, payload = GEAR_TARGET_ID, GEAR_SPOOF_PAYLOAD
    elif kind is AttackClass.RPM_SPOOF:
        target, payload = RPM_TARGET_ID, RPM_SPOOF_PAYLOAD
    return AttackSpec(kind=kind, interval_ms=interval, start_ms=start_ms, end_ms=end_ms,
                      target_id=target, payload=payload)


def desk_profile(duration_s: float = 60.0, seed: int = 0) -> BackgroundProfile:
    """Ten ECU messages at 10 ms, including the gear and RPM ids targeted by spoofing."""
    signals = (
        BackgroundSignal(GEAR_TARGET_ID, 10.0, PayloadMode.CONSTANT,
                         initial=bytes.fromhex("0000000000000000")),
        BackgroundSignal(RPM_TARGET_ID, 10.0, PayloadMode.CONSTANT,
                         initial=bytes.fromhex("052168092121006f")),
        BackgroundSignal(0x018F, 10.0, PayloadMode.COUNTER),
        BackgroundSignal(0x0260, 10.0, PayloadMode.RANDOM_WALK),
        BackgroundSignal(0x02A0, 10.0, PayloadMode.COUNTER),
        BackgroundSignal(0x0329, 10.0, PayloadMode.RANDOM_WALK),
        BackgroundSignal(0x0350, 10.0, PayloadMode.CONSTANT),
        BackgroundSignal(0x0370, 10.0, PayloadMode.COUNTER),
        BackgroundSignal(0x04F0, 10.0, PayloadMode.RANDOM_WALK),
        BackgroundSignal(0x0545, 10.0, PayloadMode.CONSTANT),
    )
    return BackgroundProfile(signals=signals, duration_s=duration_s, seed=seed).validate()


def load_profile(path: Union[str, Path]) -> BackgroundProfile:
    """Read a key=value profile file.

    Keys: ``duration_s``, ``seed`` and one ``signal.<hex id> = <period_ms> [mode] [dlc]`` line
    per background message.
    """
    values = dotenv_values(path)
    signals: List[BackgroundSignal] = []
    duration_s, seed = 60.0, 0
    for key, raw in values.items():
        if raw is None:
            raise ProfileError(f"{path}: key {key!r} has no value")
        if key == "duration_s":
            duration_s = float(raw)
        elif key == "seed":
            seed = int(raw)
        elif key.startswith("signal."):
            parts = raw.split()
            try:
                can_id = int(key.split(".", 1)[1], 16)
                period = float(parts[0])
                mode = PayloadMode(parts[1]) if len(parts) > 1 else PayloadMode.CONSTANT
                dlc = int(parts[2]) if len(parts) > 2 else 8
            except (ValueError, IndexError) as exc:
                raise ProfileError(f"{path}: cannot parse {key} = {raw!r}: {exc}")
            signals.append(BackgroundSignal(can_id, period, mode, dlc))
        else:
            raise ProfileError(f"{path}: unknown profile key {key!r}")
    return BackgroundProfile(tuple(signals), duration_s, seed).validate()


def _signal_payloads(sig: BackgroundSignal, count: int, rng: np.random.Generator) -> np.ndarray:
    if sig.initial is not None:
        base = np.frombuffer(sig.initial, dtype=np.uint8).astype(np.int64)
    else:
        base = rng.integers(0, 256, size=sig.dlc)
    payloads = np.tile(base, (count, 1))
    if sig.dlc == 0 or count == 0:
        return payloads
    if sig.mode is PayloadMode.COUNTER:
        payloads[:, -1] = (base[-1] + np.arange(count)) % 256
    elif sig.mode is PayloadMode.RANDOM_WALK:
        steps = rng.integers(-2, 3, size=(count, sig.dlc))
        steps[0] = 0
        payloads = np.clip(base + np.cumsum(steps, axis=0), 0, 255)
    return payloads


def generate_normal(profile: BackgroundProfile) -> List[LabeledRecord]:
    """Generate attack-free background traffic.

    Returns:
        Time-sorted Normal records; each signal appears floor(duration/period)+1 times

    Raises:
        ProfileError: If the profile is empty or invalid
    """
    profile.validate()
    duration_us = profile.duration_us
    streams: List[List[LabeledRecord]] = []
    for idx, sig in enumerate(profile.signals):
        rng = np.random.default_rng(np.random.SeedSequence([profile.seed, idx]))
        period_us = _ms_to_us(sig.period_ms, "period", ProfileError)
        count = duration_us // period_us + 1
        payloads = _signal_payloads(sig, count, rng)
        streams.append([
            LabeledRecord(
                frame=CanFrame(k * period_us, sig.can_id, sig.dlc, bytes(payloads[k].astype(np.uint8))),
                label=AttackClass.NORMAL,
                injected=False,
            )
            for k in range(count)
        ])
    records = list(heapq.merge(*streams, key=lambda r: r.frame.timestamp_us))
    logger.debug(f"Generated {len(records)} background frames over {profile.duration_s}s")
    return records


def _injected_frames(spec: AttackSpec, start_us: int, end_us: int, seed: int) -> List[LabeledRecord]:
    step = spec.interval_us
    times = np.arange(start_us, end_us + 1, step, dtype=np.int64)
    count = len(times)
    if spec.kind is AttackClass.DOS:
        ids = np.zeros(count, dtype=np.int64)
        payloads = np.zeros((count, 8), dtype=np.int64)
    elif spec.kind is AttackClass.FUZZY:
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(spec.kind)]))
        ids = rng.integers(0, MAX_STANDARD_ID + 1, size=count)
        payloads = rng.integers(0, 256, size=(count, 8))
    else:
        ids = np.full(count, spec.target_id, dtype=np.int64)
        fixed = np.frombuffer(spec.payload, dtype=np.uint8).astype(np.int64)
        payloads = np.tile(fixed, (count, 1))
    width = payloads.shape[1]
    return [
        LabeledRecord(
            frame=CanFrame(int(times[k]), int(ids[k]), width, bytes(payloads[k].astype(np.uint8))),
            label=spec.kind,
            injected=True,
        )
        for k in range(count)
    ]


def inject_attack(capture: Sequence[LabeledRecord], spec: AttackSpec, seed: int,
                  duration_us: Optional[int] = None) -> List[LabeledRecord]:
    """Interleave attack frames into a time-sorted capture.

    Args:
        capture: Time-sorted records; left untouched
        spec: Attack schedule
        seed: Seed for the fuzzy generator
        duration_us: Capture length; defaults to the last record's timestamp

    Returns:
        New time-sorted list containing the original and injected records

    Raises:
        AttackWindowError: If the window is empty, reversed or exceeds the capture
    """
    if duration_us is None:
        duration_us = capture[-1].frame.timestamp_us if capture else 0
    start_us, end_us = spec.window_us(duration_us)
    if start_us < 0 or end_us > duration_us or start_us > end_us:
        raise AttackWindowError(
            f"{spec.kind.display_name} window [{start_us}, {end_us}]us outside capture [0, {duration_us}]us"
        )
    injected = _injected_frames(spec, start_us, end_us, seed)
    logger.debug(f"Injecting {len(injected)} {spec.kind.display_name} frames")
    return list(heapq.merge(capture, injected, key=lambda r: r.frame.timestamp_us))


@dataclass(frozen=True)
class ClassCounts:
    """One manifest row: total messages, normal messages, injected messages."""

    total: int
    normal: int
    injected: int

    def to_dict(self) -> Dict[str, int]:
        return {"total": self.total, "normal": self.normal, "injected": self.injected}


@dataclass
class CaptureManifest:
    rows: Dict[str, ClassCounts] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Dict[str, int]]:
        return {name: counts.to_dict() for name, counts in sorted(self.rows.items())}

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, int]]) -> "CaptureManifest":
        return cls({name: ClassCounts(**row) for name, row in data.items()})


def count_capture(records: Iterable[LabeledRecord]) -> ClassCounts:
    total = normal = 0
    for rec in records:
        total += 1
        if not rec.injected:
            normal += 1
    return ClassCounts(total=total, normal=normal, injected=total - normal)


def _check_overlaps(specs: Sequence[AttackSpec], duration_us: int) -> None:
    by_kind: Dict[AttackClass, List[Tuple[int, int]]] = {}
    for spec in specs:
        by_kind.setdefault(spec.kind, []).append(spec.window_us(duration_us))
    for kind, windows in by_kind.items():
        windows.sort()
        for (_, prev_end), (start, _) in zip(windows, windows[1:]):
            if start <= prev_end:
                raise OverlappingAttackError(f"Overlapping {kind.display_name} windows")


def _spec_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def simulate_capture(profile: BackgroundProfile, specs: Sequence[AttackSpec],
                     seed: int) -> Tuple[List[LabeledRecord], CaptureManifest]:
    """Background traffic plus every attack spec merged into one capture.

    Returns:
        (capture, manifest) where the manifest has one row per class label present plus an
        "All" row whose total equals len(capture)

    Raises:
        OverlappingAttackError: If two specs of one class overlap
    """
    capture = generate_normal(profile)
    duration_us = profile.duration_us
    _check_overlaps(specs, duration_us)
    for index, spec in enumerate(specs):
        capture = inject_attack(capture, spec, _spec_seed(seed, index), duration_us)

    per_class: Dict[AttackClass, int] = {cls: 0 for cls in AttackClass}
    for rec in capture:
        per_class[rec.label] += 1
    manifest = CaptureManifest()
    for cls, n in per_class.items():
        manifest.rows[cls.display_name] = ClassCounts(
            total=n,
            normal=n if cls is AttackClass.NORMAL else 0,
            injected=0 if cls is AttackClass.NORMAL else n,
        )
    manifest.rows["All"] = count_capture(capture)
    logger.info(f"Simulated capture of {len(capture)} frames ({manifest.rows['All'].injected} injected)")
    return capture, manifest


def generate_table_layout(profile: BackgroundProfile, specs: Sequence[AttackSpec],
                          seed: int) -> Tuple[Dict[AttackClass, List[LabeledRecord]], CaptureManifest]:
    """One capture per attack class plus an attack-free capture, like the public dataset.

    Each capture gets its own background seed; the manifest has one row per capture.
    """
    captures: Dict[AttackClass, List[LabeledRecord]] = {}
    grouped: Dict[AttackClass, List[AttackSpec]] = {}
    for spec in specs:
        grouped.setdefault(spec.kind, []).append(spec)

    captures[AttackClass.NORMAL] = generate_normal(replace(profile, seed=_spec_seed(profile.seed, 0)))
    for kind in sorted(grouped):
        background = replace(profile, seed=_spec_seed(profile.seed, int(kind)))
        capture, _ = simulate_capture(background, grouped[kind], _spec_seed(seed, int(kind)))
        captures[kind] = capture

    manifest = CaptureManifest({
        kind.display_name: count_capture(records) for kind, records in captures.items()
    })
    return captures, manifest


def parse_attack_list(text: str) -> List[AttackClass]:
    """Parse a comma separated attack list such as "dos,fuzzy,gear"."""
    kinds: List[AttackClass] = []
    for item in text.split(","):
        if not item.strip():
            continue
        kind = class_from_name(item)
        if not kind.is_attack:
            raise AttackSpecError("Normal is not an attack")
        if kind not in kinds:
            kinds.append(kind)
    return kinds
