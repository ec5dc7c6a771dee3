"""Model-input construction for all four embedding strategies.

The text path serializes every event as sub-word tokens over its textual
content ([CLS], event type, then name/value pairs in canonical order, closed
by an interval token), either one sequence per event (hierarchical) or one
stream per stay (flattened). The conventional path maps whole values to dense
vocabulary ids learned from the training split, which is exactly what breaks
under schema and code-system shift.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

from .errors import ConfigError
from .events import Feature, MedicalEvent, PatientSample, ValueKind
from .tokenizer import CLS_ID, PAD_ID, Tokenizer, encode_number, interval_token_id

L_EVENT_DEFAULT = 128
N_MAX_DEFAULT = 256
L_FLAT_DEFAULT = 4096


class Segment(IntEnum):
    CLS = 0
    EVENT_TYPE = 1
    NAME = 2
    VALUE = 3
    TIME = 4
    PAD = 5


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    segments: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.segments):
            raise ValueError("ids and segments must align")
        if not self.ids or self.segments[0] != Segment.CLS:
            raise ValueError("sequence must begin with CLS")
        seen_pad = False
        for seg in self.segments:
            if seg == Segment.PAD:
                seen_pad = True
            elif seen_pad:
                raise ValueError("PAD before a non-PAD segment")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def length_unpadded(self) -> int:
        n = len(self.segments)
        while n > 0 and self.segments[n - 1] == Segment.PAD:
            n -= 1
        return n


@dataclass(frozen=True)
class HierarchicalInput:
    event_sequences: tuple[TokenSequence, ...]
    interval_buckets: tuple[int, ...]


@dataclass(frozen=True)
class FlattenedInput:
    sequence: TokenSequence


def _value_tokens(feature: Feature, tok: Tokenizer) -> list[int]:
    if feature.value.kind is ValueKind.NUMERIC:
        return encode_number(feature.value.raw)
    return tok.encode(feature.value.display)


def _event_body(event: MedicalEvent, tok: Tokenizer) -> tuple[list[int], list[int]]:
    """Tokens for S(e) then S(name) S(value) pairs, without CLS or interval."""
    ids: list[int] = []
    segs: list[int] = []
    for t in tok.encode(event.event_type.text):
        ids.append(t)
        segs.append(Segment.EVENT_TYPE)
    for f in event.features:
        for t in tok.encode(f.name.text):
            ids.append(t)
            segs.append(Segment.NAME)
        for t in _value_tokens(f, tok):
            ids.append(t)
            segs.append(Segment.VALUE)
    return ids, segs


def serialize_event(event: MedicalEvent, interval_bucket: int, tok: Tokenizer,
                    l_event: int = L_EVENT_DEFAULT) -> TokenSequence:
    """One event as [CLS] S(e) S(n^1) S(v^1) ... [t], truncated then padded to l_event.

    Truncation always retains the interval token as the last non-PAD token.
    """
    if l_event < 8:
        raise ConfigError("l_event must be at least 8")
    body_ids, body_segs = _event_body(event, tok)
    budget = l_event - 2  # CLS and interval token
    ids = [CLS_ID] + body_ids[:budget] + [interval_token_id(interval_bucket)]
    segs = [int(Segment.CLS)] + body_segs[:budget] + [int(Segment.TIME)]
    pad = l_event - len(ids)
    ids.extend([PAD_ID] * pad)
    segs.extend([int(Segment.PAD)] * pad)
    return TokenSequence(tuple(ids), tuple(segs))


def serialize_patient_hierarchical(sample: PatientSample, tok: Tokenizer,
                                   l_event: int = L_EVENT_DEFAULT,
                                   n_max: int = N_MAX_DEFAULT) -> HierarchicalInput:
    """One TokenSequence per event; keeps the most recent n_max events."""
    events = sample.events
    intervals = sample.intervals
    if len(events) > n_max:
        events = events[-n_max:]
        intervals = intervals[-n_max:]
    seqs = tuple(serialize_event(ev, iv.bucket_id, tok, l_event)
                 for ev, iv in zip(events, intervals))
    return HierarchicalInput(seqs, tuple(iv.bucket_id for iv in intervals))


def serialize_patient_flattened(sample: PatientSample, tok: Tokenizer,
                                l_flat: int = L_FLAT_DEFAULT) -> FlattenedInput:
    """Single stream [CLS] evt1-tokens [t_1] evt2-tokens [t_2] ...; the oldest
    tokens are dropped first when the stay exceeds l_flat."""
    ids: list[int] = []
    segs: list[int] = []
    for ev, iv in zip(sample.events, sample.intervals):
        body_ids, body_segs = _event_body(ev, tok)
        ids.extend(body_ids)
        segs.extend(body_segs)
        ids.append(interval_token_id(iv.bucket_id))
        segs.append(int(Segment.TIME))
    keep = l_flat - 1
    ids = ids[-keep:]
    segs = segs[-keep:]
    return FlattenedInput(TokenSequence(tuple([CLS_ID] + ids),
                                        tuple([int(Segment.CLS)] + segs)))


# -- conventional (lookup-table) path ---------------------------------------


@dataclass(frozen=True)
class FeatureSelection:
    """The task-specific feature subset M' that baseline models consume.

    The text path never takes one of these; only the conventional serializer
    does. Loaded from JSON {event_type: [feature names]}.
    """

    by_event_type: dict[str, tuple[str, ...]]

    def names_for(self, event_type: str) -> tuple[str, ...]:
        return self.by_event_type.get(event_type, ())

    def validate_against(self, samples) -> None:
        schema: dict[str, set[str]] = {}
        for sample in samples:
            for ev in sample.events:
                schema.setdefault(ev.event_type.text, set()).update(ev.feature_names())
        for etype, names in sorted(self.by_event_type.items()):
            known = schema.get(etype)
            if known is None:
                raise ConfigError(f"feature selection names unknown event type {etype!r}")
            for name in names:
                if name not in known:
                    raise ConfigError(
                        f"feature selection names unknown feature {etype}:{name}")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSelection":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls({etype: tuple(names) for etype, names in doc.items()})

    def save(self, path: str | Path) -> None:
        doc = {etype: list(names) for etype, names in sorted(self.by_event_type.items())}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def derive_feature_selection(samples, k: int = 3) -> FeatureSelection:
    """Stand-in for a hand-curated feature subset: the k most frequent
    feature names per event type in the given (training) samples.

    Ties break lexicographically so the result is deterministic.
    """
    counts: dict[str, dict[str, int]] = {}
    for sample in samples:
        for ev in sample.events:
            per_type = counts.setdefault(ev.event_type.text, {})
            for name in ev.feature_names():
                per_type[name] = per_type.get(name, 0) + 1
    by_type = {}
    for etype, per_type in counts.items():
        ranked = sorted(per_type.items(), key=lambda item: (-item[1], item[0]))
        by_type[etype] = tuple(name for name, _ in ranked[:k])
    return FeatureSelection(by_type)


def apply_feature_selection(sample: PatientSample, selection: FeatureSelection) -> PatientSample:
    """Restrict every event to its selected features (baseline preprocessing
    for the selected-feature text family).

    Events are kept even when no feature survives: the event type and
    interval still carry signal, and intervals must stay aligned.
    """
    events = []
    for ev in sample.events:
        wanted = set(selection.names_for(ev.event_type.text))
        feats = tuple(f for f in ev.features if f.name.text in wanted)
        events.append(MedicalEvent(ev.event_type, feats, ev.timestamp))
    return PatientSample(
        stay_id=sample.stay_id, hospital_admission_id=sample.hospital_admission_id,
        source_dataset=sample.source_dataset, events=tuple(events),
        intervals=sample.intervals, labels=sample.labels,
        demographics=sample.demographics)


VOCAB_PAD_ID = 0
VOCAB_OOV_ID = 1


@dataclass
class ValueVocab:
    """Dense lookup vocabularies keyed on (event_type, name[, value]) literals.

    Built from the training split only; everything unseen maps to OOV. Keyed
    on raw value literals, so datasets with disjoint schemas or code systems
    share no entries at all.
    """

    value_index: dict[tuple[str, str, str], int]
    name_index: dict[tuple[str, str], int]

    @property
    def n_values(self) -> int:
        return len(self.value_index) + 2

    @property
    def n_names(self) -> int:
        return len(self.name_index) + 2

    def value_id(self, event_type: str, name: str, value: str) -> int:
        return self.value_index.get((event_type, name, value), VOCAB_OOV_ID)

    def name_id(self, event_type: str, name: str) -> int:
        return self.name_index.get((event_type, name), VOCAB_OOV_ID)

    def to_dict(self) -> dict:
        return {
            "values": {"\t".join(k): v for k, v in sorted(self.value_index.items())},
            "names": {"\t".join(k): v for k, v in sorted(self.name_index.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ValueVocab":
        values = {tuple(k.split("\t")): v for k, v in doc["values"].items()}
        names = {tuple(k.split("\t")): v for k, v in doc["names"].items()}
        return cls(values, names)


def build_value_vocab(samples) -> ValueVocab:
    """Learn value/name vocabularies from (training) samples; ids start after PAD/OOV."""
    value_keys: set[tuple[str, str, str]] = set()
    name_keys: set[tuple[str, str]] = set()
    for sample in samples:
        for ev in sample.events:
            etype = ev.event_type.text
            for f in ev.features:
                value_keys.add((etype, f.name.text, f.value.raw))
                name_keys.add((etype, f.name.text))
    value_index = {k: i + 2 for i, k in enumerate(sorted(value_keys))}
    name_index = {k: i + 2 for i, k in enumerate(sorted(name_keys))}
    return ValueVocab(value_index, name_index)


class ConventionalMode(IntEnum):
    SELECTED_FLAT = 0
    FULL_HIERARCHICAL = 1


@dataclass(frozen=True)
class ConventionalEvent:
    value_ids: tuple[int, ...]
    name_ids: tuple[int, ...]  # empty in selected-flat mode


@dataclass(frozen=True)
class ConventionalInput:
    events: tuple[ConventionalEvent, ...]
    interval_buckets: tuple[int, ...]


def serialize_conventional(sample: PatientSample, vocab: ValueVocab,
                           mode: ConventionalMode,
                           selection: FeatureSelection | None = None,
                           n_max: int = N_MAX_DEFAULT) -> ConventionalInput:
    """Dense-id inputs for the lookup-embedding baselines.

    ``SELECTED_FLAT`` keeps only the selected features' value ids (a selection
    is required); ``FULL_HIERARCHICAL`` keeps every feature with name and
    value ids and must not be given a selection.
    """
    if mode is ConventionalMode.SELECTED_FLAT and selection is None:
        raise ConfigError("selected-flat mode requires a feature selection")
    if mode is ConventionalMode.FULL_HIERARCHICAL and selection is not None:
        raise ConfigError("full-feature mode does not take a feature selection")
    events = sample.events
    intervals = sample.intervals
    if len(events) > n_max:
        events = events[-n_max:]
        intervals = intervals[-n_max:]
    out = []
    for ev in events:
        etype = ev.event_type.text
        if mode is ConventionalMode.SELECTED_FLAT:
            wanted = set(selection.names_for(etype))
            feats = [f for f in ev.features if f.name.text in wanted]
            out.append(ConventionalEvent(
                tuple(vocab.value_id(etype, f.name.text, f.value.raw) for f in feats),
                ()))
        else:
            out.append(ConventionalEvent(
                tuple(vocab.value_id(etype, f.name.text, f.value.raw) for f in ev.features),
                tuple(vocab.name_id(etype, f.name.text) for f in ev.features)))
    return ConventionalInput(tuple(out), tuple(iv.bucket_id for iv in intervals))
