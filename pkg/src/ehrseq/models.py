"""The four predictor families over the shared neural stack.

Two axes: how values become vectors (sub-word text embedding vs per-value
vocabulary lookup) and how a stay becomes one vector (hierarchical event
encoder f + aggregator g vs one flattened encoder h). Families:

- ``text_hierarchical``        all features as text, f + g
- ``text_selected_hierarchical`` selected features as text, f + g
- ``lookup_hierarchical``      all features via name+value lookup, f + g
- ``lookup_selected_flat``     selected features via value lookup, flat h
- ``text_flat``                all features as text, flat h (ablation)

Every family ends in mean pooling and a linear head; f pools through its
leading CLS position. Batches are packed (no padding in compute).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .events import N_INTERVAL_BUCKETS
from .neural import losses
from .neural import tensor as T
from .neural.layers import Embedding, EncoderConfig, Linear, TransformerEncoder, count_parameters
from .serialize import ConventionalInput, FlattenedInput, HierarchicalInput

TEXT_FAMILIES = ("text_hierarchical", "text_selected_hierarchical", "text_flat")
LOOKUP_FAMILIES = ("lookup_hierarchical", "lookup_selected_flat")
FAMILIES = TEXT_FAMILIES[:2] + LOOKUP_FAMILIES + TEXT_FAMILIES[2:]

TASK_KINDS = ("binary", "multiclass", "multilabel")

# Embedding tables whose row count tracks an input vocabulary; excluded from
# the parameter-parity comparison (the exclusion is itemized in the report).
INPUT_TABLE_PARAMS = ("token.table", "value.table", "name.table")


@dataclass(frozen=True)
class PredictorSpec:
    family: str
    task_kind: str
    n_outputs: int
    d_model: int = 128
    heads: int = 4
    ffn_dim: int = 512
    dropout: float = 0.1
    f_layers: int = 2
    g_layers: int = 2
    h_layers: int = 4
    l_event: int = 128
    n_max: int = 256
    l_flat: int = 4096
    vocab_size: int | None = None  # text families
    n_values: int | None = None    # lookup families
    n_names: int | None = None     # lookup_hierarchical only

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task_kind!r}")
        if self.n_outputs < 1:
            raise ConfigError("n_outputs must be positive")
        if self.task_kind == "binary" and self.n_outputs != 1:
            raise ConfigError("binary tasks have exactly one output")
        if self.task_kind == "multiclass" and self.n_outputs < 2:
            raise ConfigError("multiclass tasks need at least two classes")
        text = self.family in TEXT_FAMILIES
        if text and (self.vocab_size is None or self.vocab_size < 1):
            raise ConfigError(f"{self.family} requires vocab_size")
        if text and (self.n_values is not None or self.n_names is not None):
            raise ConfigError(f"{self.family} does not take lookup vocabularies")
        if not text:
            if self.vocab_size is not None:
                raise ConfigError(f"{self.family} does not take a tokenizer vocabulary")
            if self.n_values is None or self.n_values < 2:
                raise ConfigError(f"{self.family} requires n_values")
        if self.family == "lookup_hierarchical" and (self.n_names is None or self.n_names < 2):
            raise ConfigError("lookup_hierarchical requires n_names")
        if self.family == "lookup_selected_flat" and self.n_names is not None:
            raise ConfigError("lookup_selected_flat has no name vocabulary")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PredictorSpec":
        return cls(**doc)


def _require(batch, cls, family):
    if not batch:
        raise ConfigError("empty batch")
    for item in batch:
        if not isinstance(item, cls):
            raise ConfigError(
                f"{family} expects {cls.__name__} inputs, got {type(item).__name__}")


def _cu(lengths) -> np.ndarray:
    cu = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=cu[1:])
    return cu


class _PredictorBase:
    spec: PredictorSpec

    def params(self) -> dict:
        raise NotImplementedError

    def forward(self, batch) -> T.Tensor:
        raise NotImplementedError

    def _head_logits(self, pooled: T.Tensor) -> T.Tensor:
        logits = self.head(pooled)
        if self.spec.task_kind == "binary":
            return T.reshape(logits, (logits.data.shape[0],))
        return logits

    def predict(self, batch) -> np.ndarray:
        """Probabilities: (n,) binary, (n, C) simplex rows, (n, K) independent."""
        logits = self.forward(batch).data
        if self.spec.task_kind == "multiclass":
            return losses.softmax(logits)
        return losses.sigmoid(logits)

    def n_parameters(self) -> int:
        return count_parameters(self.params())


class _HierarchicalMixin:
    """Shared f -> m_i -> (+interval) -> g -> mean pool pipeline."""

    def _aggregate(self, rows: T.Tensor, cu_events: np.ndarray,
                   cu_patients: np.ndarray, interval_ids: np.ndarray) -> T.Tensor:
        hf = self.f(rows, cu_events)
        m = T.gather_rows(hf, cu_events[:-1])  # CLS position of each event
        m = T.add(m, self.interval(interval_ids))
        hg = self.g(m, cu_patients)
        return T.segment_mean(hg, cu_patients)


class TextHierarchicalPredictor(_PredictorBase, _HierarchicalMixin):
    """Sub-word text embedding, event encoder f, aggregator g."""

    def __init__(self, spec: PredictorSpec, rng: np.random.Generator):
        self.spec = spec
        d = spec.d_model
        self.token = Embedding(rng, spec.vocab_size, d)
        self.f = TransformerEncoder(rng, EncoderConfig(
            spec.f_layers, d, spec.heads, spec.ffn_dim, spec.dropout, spec.l_event))
        self.g = TransformerEncoder(rng, EncoderConfig(
            spec.g_layers, d, spec.heads, spec.ffn_dim, spec.dropout, spec.n_max))
        self.interval = Embedding(rng, N_INTERVAL_BUCKETS, d)
        self.head = Linear(rng, d, spec.n_outputs)

    def forward_with_internals(self, batch) -> tuple[T.Tensor, dict]:
        """Logits plus the embedded token rows and event boundaries, for
        gradient-based importance analysis."""
        _require(batch, HierarchicalInput, self.spec.family)
        ids: list[int] = []
        event_lengths: list[int] = []
        interval_ids: list[int] = []
        for item in batch:
            for seq in item.event_sequences:
                n = seq.length_unpadded
                ids.extend(seq.ids[:n])
                event_lengths.append(n)
            interval_ids.extend(item.interval_buckets)
        cu_events = _cu(event_lengths)
        cu_patients = _cu([len(item.event_sequences) for item in batch])
        rows = self.token(np.asarray(ids, dtype=np.int64))
        pooled = self._aggregate(rows, cu_events, cu_patients,
                                 np.asarray(interval_ids, dtype=np.int64))
        return self._head_logits(pooled), {"rows": rows, "cu_events": cu_events}

    def forward(self, batch) -> T.Tensor:
        return self.forward_with_internals(batch)[0]

    def params(self) -> dict:
        out = {"token.table": self.token.table, "interval.table": self.interval.table}
        out.update({f"f.{k}": p for k, p in self.f.params().items()})
        out.update({f"g.{k}": p for k, p in self.g.params().items()})
        out.update({f"head.{k}": p for k, p in self.head.params().items()})
        return out


class TextFlatPredictor(_PredictorBase):
    """Sub-word text embedding, one flattened encoder h per stay (ablation)."""

    def __init__(self, spec: PredictorSpec, rng: np.random.Generator):
        self.spec = spec
        d = spec.d_model
        self.token = Embedding(rng, spec.vocab_size, d)
        self.h = TransformerEncoder(rng, EncoderConfig(
            spec.h_layers, d, spec.heads, spec.ffn_dim, spec.dropout, spec.l_flat))
        self.head = Linear(rng, d, spec.n_outputs)

    def forward(self, batch) -> T.Tensor:
        _require(batch, FlattenedInput, self.spec.family)
        ids: list[int] = []
        lengths: list[int] = []
        for item in batch:
            n = item.sequence.length_unpadded
            ids.extend(item.sequence.ids[:n])
            lengths.append(n)
        cu = _cu(lengths)
        hh = self.h(self.token(np.asarray(ids, dtype=np.int64)), cu)
        return self._head_logits(T.segment_mean(hh, cu))

    def params(self) -> dict:
        out = {"token.table": self.token.table}
        out.update({f"h.{k}": p for k, p in self.h.params().items()})
        out.update({f"head.{k}": p for k, p in self.head.params().items()})
        return out


class LookupHierarchicalPredictor(_PredictorBase, _HierarchicalMixin):
    """Per-value and per-name vocabulary lookup over all features, f + g.

    Each feature row is value embedding + name embedding; a learned CLS row
    (the extra last row of the value table, name id 0) leads every event.
    """

    def __init__(self, spec: PredictorSpec, rng: np.random.Generator):
        self.spec = spec
        d = spec.d_model
        self.cls_id = spec.n_values
        self.value = Embedding(rng, spec.n_values + 1, d)
        self.name = Embedding(rng, spec.n_names, d)
        self.f = TransformerEncoder(rng, EncoderConfig(
            spec.f_layers, d, spec.heads, spec.ffn_dim, spec.dropout, spec.l_event))
        self.g = TransformerEncoder(rng, EncoderConfig(
            spec.g_layers, d, spec.heads, spec.ffn_dim, spec.dropout, spec.n_max))
        self.interval = Embedding(rng, N_INTERVAL_BUCKETS, d)
        self.head = Linear(rng, d, spec.n_outputs)

    def forward(self, batch) -> T.Tensor:
        _require(batch, ConventionalInput, self.spec.family)
        value_ids: list[int] = []
        name_ids: list[int] = []
        event_lengths: list[int] = []
        interval_ids: list[int] = []
        for item in batch:
            for ev in item.events:
                if len(ev.name_ids) != len(ev.value_ids):
                    raise ConfigError(
                        "lookup_hierarchical needs full-feature inputs with name ids")
                value_ids.append(self.cls_id)
                value_ids.extend(ev.value_ids)
                name_ids.append(0)
                name_ids.extend(ev.name_ids)
                event_lengths.append(1 + len(ev.value_ids))
            interval_ids.extend(item.interval_buckets)
        cu_events = _cu(event_lengths)
        cu_patients = _cu([len(item.events) for item in batch])
        rows = T.add(self.value(np.asarray(value_ids, dtype=np.int64)),
                     self.name(np.asarray(name_ids, dtype=np.int64)))
        pooled = self._aggregate(rows, cu_events, cu_patients,
                                 np.asarray(interval_ids, dtype=np.int64))
        return self._head_logits(pooled)

    def params(self) -> dict:
        out = {"value.table": self.value.table, "name.table": self.name.table,
               "interval.table": self.interval.table}
        out.update({f"f.{k}": p for k, p in self.f.params().items()})
        out.update({f"g.{k}": p for k, p in self.g.params().items()})
        out.update({f"head.{k}": p for k, p in self.head.params().items()})
        return out


class LookupSelectedFlatPredictor(_PredictorBase):
    """Selected-feature value lookup summed per event, flat encoder h.

    Events become sums of their selected value embeddings (possibly empty,
    giving a zero vector) plus the interval embedding; h runs over the
    event-level stream of each stay.
    """

    def __init__(self, spec: PredictorSpec, rng: np.random.Generator):
        self.spec = spec
        d = spec.d_model
        self.value = Embedding(rng, spec.n_values, d)
        self.h = TransformerEncoder(rng, EncoderConfig(
            spec.h_layers, d, spec.heads, spec.ffn_dim, spec.dropout, spec.n_max))
        self.interval = Embedding(rng, N_INTERVAL_BUCKETS, d)
        self.head = Linear(rng, d, spec.n_outputs)

    def forward(self, batch) -> T.Tensor:
        _require(batch, ConventionalInput, self.spec.family)
        value_ids: list[int] = []
        feat_lengths: list[int] = []
        interval_ids: list[int] = []
        for item in batch:
            for ev in item.events:
                if ev.name_ids:
                    raise ConfigError(
                        "lookup_selected_flat needs selected-feature inputs without name ids")
                value_ids.extend(ev.value_ids)
                feat_lengths.append(len(ev.value_ids))
            interval_ids.extend(item.interval_buckets)
        cu_feats = _cu(feat_lengths)
        cu_patients = _cu([len(item.events) for item in batch])
        rows = self.value(np.asarray(value_ids, dtype=np.int64))
        events = T.segment_sum(rows, cu_feats)
        events = T.add(events, self.interval(np.asarray(interval_ids, dtype=np.int64)))
        hh = self.h(events, cu_patients)
        return self._head_logits(T.segment_mean(hh, cu_patients))

    def params(self) -> dict:
        out = {"value.table": self.value.table, "interval.table": self.interval.table}
        out.update({f"h.{k}": p for k, p in self.h.params().items()})
        out.update({f"head.{k}": p for k, p in self.head.params().items()})
        return out


_CONSTRUCTORS = {
    "text_hierarchical": TextHierarchicalPredictor,
    "text_selected_hierarchical": TextHierarchicalPredictor,
    "text_flat": TextFlatPredictor,
    "lookup_hierarchical": LookupHierarchicalPredictor,
    "lookup_selected_flat": LookupSelectedFlatPredictor,
}


def build_predictor(spec: PredictorSpec, seed: int) -> _PredictorBase:
    rng = np.random.default_rng(seed)
    return _CONSTRUCTORS[spec.family](spec, rng)


def loss_for(model: _PredictorBase, batch, labels, pos_weight: float | None = None) -> T.Tensor:
    kind = model.spec.task_kind
    logits = model.forward(batch)
    if kind == "binary":
        return losses.binary_cross_entropy(logits, labels, pos_weight)
    if kind == "multiclass":
        return losses.multiclass_cross_entropy(logits, labels)
    return losses.multilabel_cross_entropy(logits, labels)


def parameter_parity_report(models: dict[str, _PredictorBase]) -> dict:
    """Counts per family with input-vocabulary tables itemized and excluded.

    Input tables necessarily differ in row count across families (they track
    tokenizer/vocabulary sizes), so parity is judged on everything else.
    """
    report: dict = {"families": {}, "excluded_parameter_names": list(INPUT_TABLE_PARAMS)}
    counted: dict[str, int] = {}
    for label, model in models.items():
        params = model.params()
        excluded = {name: int(np.prod(params[name].data.shape))
                    for name in INPUT_TABLE_PARAMS if name in params}
        total = count_parameters(params)
        kept = total - sum(excluded.values())
        counted[label] = kept
        report["families"][label] = {
            "total": total, "excluded": excluded, "counted": kept}
    labels = sorted(counted)
    worst = 0.0
    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            rel = abs(counted[a] - counted[b]) / max(counted[a], counted[b])
            worst = max(worst, rel)
    report["max_relative_difference"] = worst
    return report
