"""Gradient-based feature importance for the text hierarchical family.

Each event's score is the summed L2 norm of the loss gradient at the event
encoder's input embeddings (the embedded sub-word rows of that event).
Scores are tallied into buckets keyed by the event's main feature text (the
manifest-designated primary column of its table), then ranked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .events import normalize_text
from .manifest import DatasetManifest
from .models import TextHierarchicalPredictor
from .neural import losses
from .training import labels_array


def main_columns(manifest: DatasetManifest) -> dict[str, str | None]:
    return {t.event_type_name: t.main_column for t in manifest.event_tables}


@dataclass
class ImportanceReport:
    ranked: list[tuple[str, float]]  # main feature text -> accumulated score, descending
    n_events_scored: int
    n_events_skipped: int  # events whose table has no main column or lacks the feature

    def top(self, k: int) -> list[tuple[str, float]]:
        return self.ranked[:k]

    def to_dict(self) -> dict:
        return {"ranked": [[text, score] for text, score in self.ranked],
                "n_events_scored": self.n_events_scored,
                "n_events_skipped": self.n_events_skipped}


def event_scores(model: TextHierarchicalPredictor, batch, labels) -> np.ndarray:
    """Per-event gradient norms for one batch, in event order."""
    logits, internals = model.forward_with_internals(batch)
    loss_for_logits(model, logits, labels).backward()
    g = internals["rows"].grad
    token_norms = np.sqrt((g.astype(np.float64) ** 2).sum(axis=1))
    cu = internals["cu_events"]
    return np.add.reduceat(token_norms, cu[:-1])


def loss_for_logits(model, logits, labels):
    kind = model.spec.task_kind
    if kind == "binary":
        return losses.binary_cross_entropy(logits, labels)
    if kind == "multiclass":
        return losses.multiclass_cross_entropy(logits, labels)
    return losses.multilabel_cross_entropy(logits, labels)


def feature_importance(model, samples, inputs, task: str,
                       main_column_by_type: dict[str, str | None],
                       batch_size: int = 32) -> ImportanceReport:
    """Rank main-feature texts by accumulated event gradient norms.

    ``inputs`` must be the hierarchical serialization of ``samples`` (same
    order, same n_max), so serialized events align with sample events.
    """
    if not isinstance(model, TextHierarchicalPredictor):
        raise ConfigError(
            "feature importance is defined for the text hierarchical families")
    labels = labels_array(samples, task)
    keys = {etype: normalize_text(col) if col else None
            for etype, col in main_column_by_type.items()}
    buckets: dict[str, float] = {}
    scored = 0
    skipped = 0
    n_max = model.spec.n_max
    for lo in range(0, len(samples), batch_size):
        batch_samples = samples[lo:lo + batch_size]
        batch_inputs = inputs[lo:lo + batch_size]
        scores = event_scores(model, batch_inputs, labels[lo:lo + batch_size])
        pos = 0
        for sample, item in zip(batch_samples, batch_inputs):
            events = sample.events[-n_max:]
            if len(events) != len(item.event_sequences):
                raise ConfigError(
                    f"inputs misaligned with samples at stay {sample.stay_id}")
            for ev in events:
                score = float(scores[pos])
                pos += 1
                key = keys.get(ev.event_type.text)
                if key is None:
                    skipped += 1
                    continue
                feat = next((f for f in ev.features if f.name.text == key), None)
                if feat is None:
                    skipped += 1
                    continue
                buckets[feat.value.display] = buckets.get(feat.value.display, 0.0) + score
                scored += 1
        if pos != len(scores):
            raise ConfigError("event count mismatch while scoring importance")
    ranked = sorted(buckets.items(), key=lambda kv: (-kv[1], kv[0]))
    return ImportanceReport(ranked, scored, skipped)


def top_k_overlap(a: ImportanceReport, b: ImportanceReport, k: int = 100) -> int:
    """|top-k(a) ∩ top-k(b)| on main feature texts."""
    return len({t for t, _ in a.top(k)} & {t for t, _ in b.top(k)})
