import json
from pathlib import Path

import pytest

from ehrseq.errors import ManifestError
from ehrseq.events import OBSERVATION_WINDOW_MIN, ValueKind
from ehrseq.ingest import (
    Cohort,
    attach_labels,
    build_cohort,
    compute_feature_stats,
    ingest_dataset,
    is_integer_literal,
    load_cohort,
    load_dx_class_map,
    parse_time_minutes,
    prune_features,
    save_cohort,
)
from ehrseq.manifest import load_manifest

FIXTURE = Path(__file__).parent / "data" / "ingest_fixture"


@pytest.fixture(scope="module")
def manifest():
    return load_manifest(FIXTURE / "manifest.json")


@pytest.fixture(scope="module")
def ingested(manifest):
    return ingest_dataset(manifest, load_dx_class_map(FIXTURE / "dx_map.csv"))


class TestManifest:
    def test_fixture_loads(self, manifest):
        assert manifest.dataset_name == "fixture_hospital"
        assert len(manifest.event_tables) == 3
        assert manifest.code_columns_for("labevents") == frozenset({"ITEMID"})
        assert manifest.code_columns_for("medication") == frozenset()

    def test_missing_column_is_field_error(self, tmp_path):
        doc = json.loads((FIXTURE / "manifest.json").read_text())
        doc["event_tables"][0]["time_column"] = "NO_SUCH_COLUMN"
        bad = tmp_path / "manifest.json"
        bad.write_text(json.dumps(doc))
        for f in FIXTURE.iterdir():
            if f.suffix == ".csv":
                (tmp_path / f.name).write_bytes(f.read_bytes())
        with pytest.raises(ManifestError) as excinfo:
            load_manifest(bad)
        assert "time_column" in excinfo.value.field

    def test_empty_event_tables_rejected(self, tmp_path):
        doc = json.loads((FIXTURE / "manifest.json").read_text())
        doc["event_tables"] = []
        bad = tmp_path / "manifest.json"
        bad.write_text(json.dumps(doc))
        for f in FIXTURE.iterdir():
            if f.suffix == ".csv":
                (tmp_path / f.name).write_bytes(f.read_bytes())
        with pytest.raises(ManifestError) as excinfo:
            load_manifest(bad)
        assert excinfo.value.field == "event_tables"

    def test_dangling_applies_to_rejected(self, tmp_path):
        doc = json.loads((FIXTURE / "manifest.json").read_text())
        doc["description_maps"][0]["applies_to"] = ["labevents:NOPE"]
        bad = tmp_path / "manifest.json"
        bad.write_text(json.dumps(doc))
        for f in FIXTURE.iterdir():
            if f.suffix == ".csv":
                (tmp_path / f.name).write_bytes(f.read_bytes())
        with pytest.raises(ManifestError) as excinfo:
            load_manifest(bad)
        assert "applies_to" in excinfo.value.field

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "absent.json")


def test_parse_time_minutes():
    assert parse_time_minutes("90") == 90
    assert parse_time_minutes("90.9") == 90
    assert parse_time_minutes("-30") == -30
    assert parse_time_minutes("2023-01-01 01:30:00") - parse_time_minutes("2023-01-01 00:00:00") == 90
    assert parse_time_minutes("") is None
    assert parse_time_minutes("notatime") is None
    assert parse_time_minutes("inf") is None


def test_is_integer_literal():
    assert is_integer_literal("7")
    assert is_integer_literal("-12")
    assert not is_integer_literal("7.0")
    assert not is_integer_literal("7e1")
    assert not is_integer_literal("abc")


class TestCohortRules:
    def test_ten_stays_three_violations_seven_samples(self, manifest):
        build = build_cohort(manifest)
        assert len(build.samples) == 7
        assert build.rejected_by_rule["age_under_18"] == 1
        assert build.rejected_by_rule["stay_not_over_24h"] == 1
        assert build.rejected_by_rule["not_first_stay"] == 1

    def test_events_windowed_and_ordered(self, manifest):
        build = build_cohort(manifest)
        for sample in build.samples:
            times = [ev.timestamp for ev in sample.events]
            assert all(0 <= t <= OBSERVATION_WINDOW_MIN for t in times)
            assert times == sorted(times)

    def test_unparseable_timestamp_warned(self, manifest):
        build = build_cohort(manifest)
        assert any("unparseable timestamps" in w for w in build.warnings)

    def test_revalidation_passes(self, manifest):
        build = build_cohort(manifest)
        for sample in build.samples:
            sample.validate_cohort()


class TestFeaturePruning:
    def test_integer_only_column_pruned_everywhere(self, ingested):
        cohort, _ = ingested
        for sample in cohort.samples:
            for ev in sample.events:
                assert "ROW_ID" not in ev.feature_names()

    def test_rare_feature_pruned(self, ingested):
        cohort, _ = ingested
        for sample in cohort.samples:
            for ev in sample.events:
                assert "RARECOL" not in ev.feature_names()

    def test_mapped_code_column_survives_integer_rule(self, ingested):
        cohort, _ = ingested
        kinds = set()
        for sample in cohort.samples:
            for ev in sample.events:
                for f in ev.features:
                    if f.name.text == "ITEMID":
                        kinds.add(f.value.kind)
        assert kinds == {ValueKind.CODE}

    def test_continuous_values_retained(self, ingested):
        cohort, _ = ingested
        names = set()
        for sample in cohort.samples:
            for ev in sample.events:
                names.update(ev.feature_names())
        assert "VALUENUM" in names and "DOSE" in names and "AMOUNT" in names

    def test_integer_only_flag_semantics(self, manifest):
        build = build_cohort(manifest)
        stats = compute_feature_stats(build.samples)
        assert stats.integer_only[("labevents", "ROW_ID")]
        assert not stats.integer_only[("labevents", "VALUENUM")]
        assert not stats.integer_only[("medication", "DRUG")]

    def test_prune_idempotent_for_fixed_stats(self, manifest):
        build = build_cohort(manifest)
        stats = compute_feature_stats(build.samples)
        once = prune_features(build.samples, stats)
        twice = prune_features(once.samples, stats)
        assert twice.samples == once.samples
        assert twice.samples_dropped == 0

    def test_pruning_never_grows_events(self, manifest):
        build = build_cohort(manifest)
        stats = compute_feature_stats(build.samples)
        pruned = prune_features(build.samples, stats)
        before = {s.stay_id: [len(ev.features) for ev in s.events] for s in build.samples}
        for s in pruned.samples:
            after = [len(ev.features) for ev in s.events]
            assert len(after) <= len(before[s.stay_id])


class TestLabels:
    def _by_stay(self, cohort: Cohort):
        return {s.stay_id: s for s in cohort.samples}

    def test_every_sample_has_seven_labels(self, ingested):
        cohort, _ = ingested
        for s in cohort.samples:
            assert sorted(s.labels) == ["Dx", "Fi_ac", "Im_disch", "LOS3", "LOS7", "Mort", "Readm"]

    def test_mortality_window(self, ingested):
        by_stay = self._by_stay(ingested[0])
        assert by_stay["s06"].labels["Mort"].value == 1
        assert by_stay["s01"].labels["Mort"].value == 0

    def test_length_of_stay_thresholds(self, ingested):
        by_stay = self._by_stay(ingested[0])
        assert by_stay["s01"].labels["LOS3"].value == 0
        assert by_stay["s08"].labels["LOS3"].value == 1
        assert by_stay["s08"].labels["LOS7"].value == 0
        assert by_stay["s09"].labels["LOS7"].value == 1

    def test_readmission(self, ingested):
        by_stay = self._by_stay(ingested[0])
        assert by_stay["s01"].labels["Readm"].value == 1
        assert by_stay["s05"].labels["Readm"].value == 0

    def test_class_spaces_sorted_and_complete(self, ingested):
        cohort, _ = ingested
        assert cohort.label_spaces["Fi_ac"] == ("death", "died in hospital", "home", "rehab", "snf") or \
            cohort.label_spaces["Fi_ac"] == ("death", "home", "rehab", "snf")
        assert "no discharge" in cohort.label_spaces["Im_disch"]
        assert list(cohort.label_spaces["Im_disch"]) == sorted(cohort.label_spaces["Im_disch"])

    def test_final_acuity_death_class(self, ingested):
        cohort, _ = ingested
        by_stay = self._by_stay(cohort)
        space = cohort.label_spaces["Fi_ac"]
        assert space[by_stay["s06"].labels["Fi_ac"].value] == "death"
        assert space[by_stay["s01"].labels["Fi_ac"].value] == "home"

    def test_imminent_discharge_classes(self, ingested):
        cohort, _ = ingested
        by_stay = self._by_stay(cohort)
        space = cohort.label_spaces["Im_disch"]
        assert space[by_stay["s08"].labels["Im_disch"].value] == "no discharge"
        assert space[by_stay["s07"].labels["Im_disch"].value] == "rehab"
        assert space[by_stay["s06"].labels["Im_disch"].value] == "death"

    def test_dx_multi_hot(self, ingested):
        cohort, _ = ingested
        by_stay = self._by_stay(cohort)
        dx = by_stay["s01"].labels["Dx"].value
        assert len(dx) == 18
        assert dx[2] == 1 and dx[6] == 1 and sum(dx) == 2
        assert sum(by_stay["s10"].labels["Dx"].value) == 0

    def test_missing_status_dropped(self, manifest, tmp_path):
        build = build_cohort(manifest)
        broken = build.samples[0]
        object.__setattr__(broken.demographics, "discharge_status", "")
        labeled = attach_labels(build.samples, manifest, None)
        assert labeled.dropped_missing_status == 1
        assert len(labeled.samples) == len(build.samples) - 1


class TestReportAndBundle:
    def test_report_shape(self, ingested):
        _, report = ingested
        doc = report.to_dict()
        assert doc["samples_emitted"] == 7
        assert isinstance(doc["samples_rejected_by_rule"], dict)
        assert isinstance(doc["features_pruned"], int) and doc["features_pruned"] >= 2
        assert isinstance(doc["warnings"], list)

    def test_bundle_round_trip(self, ingested, tmp_path):
        cohort, _ = ingested
        path = tmp_path / "cohort.json"
        save_cohort(cohort, path)
        again = load_cohort(path)
        assert again.dataset_name == cohort.dataset_name
        assert again.label_spaces == cohort.label_spaces
        assert [s.stay_id for s in again.samples] == [s.stay_id for s in cohort.samples]
        for a, b in zip(again.samples, cohort.samples):
            assert a.events == b.events
            assert a.intervals == b.intervals
            assert a.labels == b.labels
        path2 = tmp_path / "cohort2.json"
        save_cohort(again, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_ingest_deterministic(self, manifest, tmp_path):
        dx = load_dx_class_map(FIXTURE / "dx_map.csv")
        a, _ = ingest_dataset(manifest, dx)
        b, _ = ingest_dataset(manifest, dx)
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        save_cohort(a, pa)
        save_cohort(b, pb)
        assert pa.read_bytes() == pb.read_bytes()
