"""Gradient-based feature importance: scoring, alignment, reporting."""

import numpy as np
import pytest

from ehrseq.errors import ConfigError
from ehrseq.events import (EventType, Feature, FeatureName, FeatureValue,
                           IntervalBucket, Label, MedicalEvent, PatientSample,
                           ValueKind, bucketize_interval)
from ehrseq.importance import (ImportanceReport, feature_importance,
                               main_columns, top_k_overlap)
from ehrseq.manifest import load_manifest
from ehrseq.models import PredictorSpec, build_predictor
from ehrseq.serialize import serialize_patient_hierarchical
from ehrseq.tokenizer import train_bpe

DRUGS = ("dolazole", "vexamid", "cortran", "philuret")


def med_event(drug, minute):
    features = (
        Feature(FeatureName("dose"), FeatureValue("10", ValueKind.NUMERIC)),
        Feature(FeatureName("drug"), FeatureValue(drug, ValueKind.TEXT)),
    )
    return MedicalEvent(EventType("meds"), features, minute)


def vitals_event(minute):
    features = (
        Feature(FeatureName("rate"), FeatureValue("72", ValueKind.NUMERIC)),
    )
    return MedicalEvent(EventType("vitals"), features, minute)


def build_samples(n=6):
    rng = np.random.default_rng(0)
    samples = []
    for i in range(n):
        events = [med_event(DRUGS[int(rng.integers(len(DRUGS)))], 10 * k + 5)
                  for k in range(2 + i % 3)]
        events.append(vitals_event(50))
        events.sort(key=lambda e: e.timestamp)
        intervals = []
        prev = None
        for ev in events:
            intervals.append(bucketize_interval(
                None if prev is None else ev.timestamp - prev, first=prev is None))
            prev = ev.timestamp
        samples.append(PatientSample(
            stay_id=f"s{i}", hospital_admission_id=f"h{i}", source_dataset="unit",
            events=tuple(events), intervals=tuple(intervals),
            labels={"Mort": Label("Mort", int(i % 2))}))
    return samples


@pytest.fixture(scope="module")
def scored_setup():
    samples = build_samples()
    corpus = ["meds", "vitals", "dose", "drug", "rate", *DRUGS]
    tok = train_bpe(corpus, 380)
    inputs = [serialize_patient_hierarchical(s, tok, l_event=24, n_max=8)
              for s in samples]
    spec = PredictorSpec(family="text_hierarchical", task_kind="binary",
                         n_outputs=1, d_model=16, heads=2, ffn_dim=32,
                         dropout=0.0, f_layers=1, g_layers=1, h_layers=1,
                         l_event=24, n_max=8, l_flat=64,
                         vocab_size=tok.vocab_size)
    model = build_predictor(spec, seed=0)
    return model, samples, inputs


MAIN_BY_TYPE = {"meds": "drug", "vitals": None}


class TestFeatureImportance:
    def test_scores_bucket_by_main_feature_text(self, scored_setup):
        model, samples, inputs = scored_setup
        report = feature_importance(model, samples, inputs, "Mort", MAIN_BY_TYPE)
        n_meds = sum(1 for s in samples for ev in s.events
                     if ev.event_type.text == "meds")
        n_vitals = sum(1 for s in samples for ev in s.events
                       if ev.event_type.text == "vitals")
        assert report.n_events_scored == n_meds
        assert report.n_events_skipped == n_vitals
        assert {text for text, _ in report.ranked} <= set(DRUGS)
        assert all(score > 0 for _, score in report.ranked)

    def test_batch_size_beyond_cohort_is_inert(self, scored_setup):
        # any batch size that covers the whole cohort in one pass must agree
        # bit for bit (per-batch loss normalization makes smaller batches a
        # different, equally valid scoring run)
        model, samples, inputs = scored_setup
        a = feature_importance(model, samples, inputs, "Mort", MAIN_BY_TYPE,
                               batch_size=len(samples))
        b = feature_importance(model, samples, inputs, "Mort", MAIN_BY_TYPE,
                               batch_size=999)
        assert a.to_dict() == b.to_dict()

    def test_zero_head_gives_zero_scores(self, scored_setup):
        model, samples, inputs = scored_setup
        saved = {k: p.data.copy() for k, p in model.params().items()}
        try:
            for name, p in model.params().items():
                if name.startswith("head."):
                    p.data[...] = 0.0
            report = feature_importance(model, samples, inputs, "Mort",
                                        MAIN_BY_TYPE)
            assert all(score == 0.0 for _, score in report.ranked)
        finally:
            for name, p in model.params().items():
                p.data[...] = saved[name]

    def test_determinism(self, scored_setup):
        model, samples, inputs = scored_setup
        a = feature_importance(model, samples, inputs, "Mort", MAIN_BY_TYPE)
        b = feature_importance(model, samples, inputs, "Mort", MAIN_BY_TYPE)
        assert a.to_dict() == b.to_dict()

    def test_requires_text_hierarchical_family(self, scored_setup):
        _, samples, inputs = scored_setup
        lookup = build_predictor(
            PredictorSpec(family="lookup_selected_flat", task_kind="binary",
                          n_outputs=1, d_model=16, heads=2, ffn_dim=32,
                          dropout=0.0, f_layers=1, g_layers=1, h_layers=1,
                          l_event=24, n_max=8, l_flat=64, n_values=10), seed=0)
        with pytest.raises(ConfigError):
            feature_importance(lookup, samples, inputs, "Mort", MAIN_BY_TYPE)

    def test_misaligned_inputs_rejected(self, scored_setup):
        # dropping sample 1 pairs samples of different event counts with the
        # original serializations
        model, samples, inputs = scored_setup
        trimmed = samples[:1] + samples[2:]
        with pytest.raises(ConfigError):
            feature_importance(model, trimmed, inputs[:len(trimmed)], "Mort",
                               MAIN_BY_TYPE)


class TestReportHelpers:
    def test_top_k_overlap_counts_shared_texts(self):
        a = ImportanceReport([("x", 3.0), ("y", 2.0), ("z", 1.0)], 3, 0)
        b = ImportanceReport([("y", 9.0), ("q", 2.0), ("x", 1.0)], 3, 0)
        assert top_k_overlap(a, b, k=1) == 0
        assert top_k_overlap(a, b, k=2) == 1
        assert top_k_overlap(a, b, k=3) == 2

    def test_report_round_trips_to_dict(self):
        report = ImportanceReport([("x", 1.5)], 1, 2)
        doc = report.to_dict()
        assert doc == {"ranked": [["x", 1.5]], "n_events_scored": 1,
                       "n_events_skipped": 2}
        assert report.top(5) == [("x", 1.5)]

    def test_main_columns_from_manifest(self):
        manifest = load_manifest("tests/data/ingest_fixture/manifest.json")
        cols = main_columns(manifest)
        assert set(cols) == {"labevents", "medication", "infusion"}
        assert all(v is None for v in cols.values())
