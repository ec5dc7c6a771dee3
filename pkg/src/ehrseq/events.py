"""Core domain types: medical events, patient samples, labels, interval buckets.

Everything here is an immutable value object; instances are safe to share
across threads once constructed.
"""

from __future__ import annotations

import math
import unicodedata
from dataclasses import dataclass, field
from enum import Enum

from .errors import CohortFilterReject, LabelError

# Observation window and label windows, in minutes since ICU admission.
OBSERVATION_WINDOW_MIN = 720  # first 12 hours of the stay
PREDICTION_WINDOW_MIN = 2880  # 48-hour window, anchored at the end of observation
MIN_STAY_MIN = 1440  # "over 24 hours" is strict
MIN_EVENTS = 5
MIN_AGE_YEARS = 18

# Interval buckets 0..6 cover [0,5), [5,15), [15,60), [60,120), [120,360),
# [360,720), [720,inf) minutes; bucket 7 marks the first event of a stay.
INTERVAL_EDGES_MIN = (5, 15, 60, 120, 360, 720)
FIRST_EVENT_BUCKET = 7
N_INTERVAL_BUCKETS = 8

DX_CLASSES = 18


class ValueKind(Enum):
    TEXT = "text"
    NUMERIC = "numeric"
    CODE = "code"


def normalize_text(text: str) -> str:
    """Unicode NFC plus whitespace collapse; the only text normalization applied."""
    return " ".join(unicodedata.normalize("NFC", text).split())


def parses_as_decimal(text: str) -> bool:
    """True for finite plain-decimal or exponent-form numeric literals."""
    try:
        return math.isfinite(float(text))
    except (ValueError, OverflowError, TypeError):
        return False


@dataclass(frozen=True)
class FeatureName:
    text: str

    def __post_init__(self):
        norm = normalize_text(self.text)
        if not norm:
            raise ValueError("feature name empty after whitespace normalization")
        object.__setattr__(self, "text", norm)


@dataclass(frozen=True)
class FeatureValue:
    """A feature's value string. ``text`` carries the resolved description for
    Code values with a map hit; ``raw`` always keeps the source literal (the
    conventional-embedding path keys its vocabulary on it)."""

    raw: str
    kind: ValueKind
    text: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "raw", normalize_text(self.raw))
        if self.text is not None:
            object.__setattr__(self, "text", normalize_text(self.text))

    @property
    def display(self) -> str:
        return self.text if self.text is not None else self.raw


@dataclass(frozen=True)
class Feature:
    name: FeatureName
    value: FeatureValue


@dataclass(frozen=True)
class EventType:
    text: str

    def __post_init__(self):
        object.__setattr__(self, "text", normalize_text(self.text))


@dataclass(frozen=True)
class MedicalEvent:
    """One timestamped record: event type plus canonically ordered features.

    Features are unique by name and sorted lexicographically so that
    serialization is deterministic regardless of source column order.
    """

    event_type: EventType
    features: tuple[Feature, ...]
    timestamp: int  # minutes since ICU admission, sub-minute truncated

    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.name.text for f in self.features)


@dataclass(frozen=True)
class IntervalBucket:
    bucket_id: int

    def __post_init__(self):
        if not 0 <= self.bucket_id < N_INTERVAL_BUCKETS:
            raise ValueError(f"bucket_id {self.bucket_id} outside [0, {N_INTERVAL_BUCKETS - 1}]")


def bucketize_interval(minutes: int | float | None, first: bool = False) -> IntervalBucket:
    """Map a gap in minutes to its bucket; unparseable/negative gaps clamp to bucket 0."""
    if first:
        return IntervalBucket(FIRST_EVENT_BUCKET)
    if minutes is None or not isinstance(minutes, (int, float)) or minutes != minutes:
        return IntervalBucket(0)
    for i, edge in enumerate(INTERVAL_EDGES_MIN):
        if minutes < edge:
            return IntervalBucket(i)
    return IntervalBucket(len(INTERVAL_EDGES_MIN))


class TaskKind(Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"
    MULTILABEL = "multilabel"


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: TaskKind
    n_classes: int | None = None  # fixed class count, None when dataset-derived


# The seven prediction tasks. Fi_ac / Im_disch class vocabularies are derived
# from the data (observed discharge locations), so n_classes stays None here.
TASKS: dict[str, TaskSpec] = {
    "Mort": TaskSpec("Mort", TaskKind.BINARY),
    "LOS3": TaskSpec("LOS3", TaskKind.BINARY),
    "LOS7": TaskSpec("LOS7", TaskKind.BINARY),
    "Readm": TaskSpec("Readm", TaskKind.BINARY),
    "Fi_ac": TaskSpec("Fi_ac", TaskKind.MULTICLASS),
    "Im_disch": TaskSpec("Im_disch", TaskKind.MULTICLASS),
    "Dx": TaskSpec("Dx", TaskKind.MULTILABEL, DX_CLASSES),
}

# Tasks whose label definitions do not transfer across hospitals.
SINGLE_DOMAIN_ONLY_TASKS = ("Fi_ac", "Im_disch")


@dataclass(frozen=True)
class Label:
    """A task label: binary bit, class index, or multi-hot tuple of length 18."""

    task: str
    value: int | tuple[int, ...]

    def __post_init__(self):
        spec = TASKS.get(self.task)
        if spec is None:
            raise LabelError(f"unknown task {self.task!r}")
        if spec.kind is TaskKind.MULTILABEL:
            vec = tuple(int(v) for v in self.value)
            if len(vec) != DX_CLASSES:
                raise LabelError(f"{self.task}: expected {DX_CLASSES} bits, got {len(vec)}")
            if any(v not in (0, 1) for v in vec):
                raise LabelError(f"{self.task}: multi-hot entries must be 0/1")
            object.__setattr__(self, "value", vec)
        elif spec.kind is TaskKind.BINARY:
            if self.value not in (0, 1):
                raise LabelError(f"{self.task}: binary label must be 0/1, got {self.value!r}")
        else:
            if not isinstance(self.value, int) or self.value < 0:
                raise LabelError(f"{self.task}: class index must be a non-negative int")


@dataclass(frozen=True)
class Demographics:
    age_years: int
    icu_in_min: int  # minutes on the dataset's internal clock
    icu_out_min: int
    discharge_status: str
    discharge_location: str


@dataclass(frozen=True)
class PatientSample:
    """One ICU stay: ordered events, interval buckets and (once attached) labels."""

    stay_id: str
    hospital_admission_id: str
    source_dataset: str
    events: tuple[MedicalEvent, ...]
    intervals: tuple[IntervalBucket, ...]
    labels: dict[str, Label] = field(default_factory=dict, compare=False)
    demographics: Demographics | None = None

    def __post_init__(self):
        if len(self.intervals) != len(self.events):
            raise ValueError("intervals must align 1:1 with events")

    @property
    def stay_minutes(self) -> int:
        return self.demographics.icu_out_min - self.demographics.icu_in_min

    def validate_cohort(self) -> None:
        """Re-check every cohort invariant; raises CohortFilterReject on violation."""
        if len(self.events) < MIN_EVENTS:
            raise CohortFilterReject("fewer than five medical events")
        prev = -1
        for ev in self.events:
            if ev.timestamp < 0 or ev.timestamp > OBSERVATION_WINDOW_MIN:
                raise CohortFilterReject("event outside the observation window")
            if ev.timestamp < prev:
                raise CohortFilterReject("events out of time order")
            prev = ev.timestamp
        if self.demographics is not None:
            if self.demographics.age_years < MIN_AGE_YEARS:
                raise CohortFilterReject("age under 18")
            if self.stay_minutes <= MIN_STAY_MIN:
                raise CohortFilterReject("stay not over 24 hours")


def classify_value(raw: str, is_code_column: bool) -> ValueKind:
    """Kind inference: desc-mapped columns are Code, numeric literals Numeric, else Text."""
    if is_code_column:
        return ValueKind.CODE
    if parses_as_decimal(raw):
        return ValueKind.NUMERIC
    return ValueKind.TEXT


def canonicalize_event(
    raw_features: list[tuple[str, str]],
    event_type: EventType | str,
    timestamp: int,
    code_columns: frozenset[str] | set[str] = frozenset(),
) -> MedicalEvent:
    """Build the canonical event: dedupe names first-wins, normalize, sort, infer kinds.

    ``code_columns`` holds the feature names (for this event's table) that a
    description map covers. Empty/blank names or values are skipped; an event
    left with no features raises CohortFilterReject and is dropped upstream.
    Idempotent: canonicalizing an event's own (name, value) pairs reproduces it.
    """
    if isinstance(event_type, str):
        event_type = EventType(event_type)
    seen: dict[str, Feature] = {}
    for name_raw, value_raw in raw_features:
        name_norm = normalize_text(name_raw)
        value_norm = normalize_text(value_raw)
        if not name_norm or not value_norm or name_norm in seen:
            continue
        kind = classify_value(value_norm, name_norm in code_columns)
        seen[name_norm] = Feature(FeatureName(name_norm), FeatureValue(value_norm, kind))
    if not seen:
        raise CohortFilterReject("event has no usable features")
    ordered = tuple(seen[name] for name in sorted(seen))
    return MedicalEvent(event_type, ordered, int(timestamp))
