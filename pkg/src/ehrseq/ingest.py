"""Manifest-driven ingestion: CSV exports in, labeled PatientSamples out.

The pipeline is knowledge-free by construction. Nothing in here inspects what
a column means; decisions use only occurrence statistics, literal shape
(integer or not) and the manifest's schema linkage.

Stages: build_cohort applies the five cohort rules and windows events to the
first 12 hours; compute_feature_stats / prune_features drop integer-only and
rare features; attach_labels derives the seven task labels.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from .errors import CohortFilterReject, ManifestError
from .events import (
    MIN_AGE_YEARS,
    MIN_EVENTS,
    MIN_STAY_MIN,
    OBSERVATION_WINDOW_MIN,
    PREDICTION_WINDOW_MIN,
    DX_CLASSES,
    Demographics,
    Feature,
    IntervalBucket,
    Label,
    MedicalEvent,
    PatientSample,
    TASKS,
    TaskKind,
    ValueKind,
    bucketize_interval,
    canonicalize_event,
    normalize_text,
)
from .manifest import DatasetManifest
from .tokenizer import DescriptionMap

BUNDLE_FORMAT_VERSION = 1
MIN_FEATURE_COUNT = 5

_INT_LITERAL = re.compile(r"^[+-]?[0-9]+$")
_EPOCH = datetime(2000, 1, 1)

DEATH_CLASS = "death"
NO_DISCHARGE_CLASS = "no discharge"
UNKNOWN_LOCATION_CLASS = "unknown"


def is_integer_literal(text: str) -> bool:
    return bool(_INT_LITERAL.match(text))


def parse_time_minutes(text: str) -> int | None:
    """Minutes on the dataset's internal clock, or None when unparseable.

    Accepts plain minute offsets (integers or finite floats, floored) and ISO
    datetime strings (anchored to a fixed epoch; only differences matter).
    """
    norm = normalize_text(text)
    if not norm:
        return None
    try:
        value = float(norm)
        if math.isfinite(value):
            return math.floor(value)
        return None
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(norm)
    except ValueError:
        return None
    return int((dt - _EPOCH).total_seconds() // 60)


def compute_intervals(events: tuple[MedicalEvent, ...]) -> tuple[IntervalBucket, ...]:
    out = []
    prev = None
    for ev in events:
        out.append(bucketize_interval(None if prev is None else ev.timestamp - prev,
                                      first=prev is None))
        prev = ev.timestamp
    return tuple(out)


def load_description_map(manifest: DatasetManifest) -> DescriptionMap:
    dm = DescriptionMap()
    for spec in manifest.description_maps:
        rows = _read_csv(manifest.resolve(spec.file_path))
        for target in spec.applies_to:
            table, column = target.split(":", 1)
            for row in rows:
                code = row.get(spec.code_column, "")
                text = row.get(spec.text_column, "")
                if normalize_text(code) and normalize_text(text):
                    dm.add(table, column, code, text)
    return dm


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [dict(row) for row in csv.DictReader(fh, restval="")]


@dataclass
class _StayRecord:
    stay_id: str
    hadm_id: str
    intime_min: int
    outtime_min: int
    age: int
    discharge_status: str
    discharge_location: str


@dataclass
class CohortBuild:
    samples: list[PatientSample]
    rejected_by_rule: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def _reject(build: CohortBuild, rule: str) -> None:
    build.rejected_by_rule[rule] = build.rejected_by_rule.get(rule, 0) + 1


def build_cohort(manifest: DatasetManifest) -> CohortBuild:
    """Apply cohort rules and emit unlabeled, windowed, interval-annotated samples.

    Rules: age >= 18, stay strictly over 24 hours, first ICU stay of each
    hospital admission only, events restricted to the first 720 minutes, and
    at least five events remaining. Unparseable rows are counted, never
    silently ignored.
    """
    build = CohortBuild(samples=[])
    st = manifest.stays_table
    stays: list[_StayRecord] = []
    for row in _read_csv(manifest.resolve(st.file_path)):
        stay_id = normalize_text(row.get(st.stay_id_column, ""))
        hadm_id = normalize_text(row.get(st.hospital_admission_id_column, ""))
        if not stay_id or not hadm_id:
            _reject(build, "missing_ids")
            continue
        intime = parse_time_minutes(row.get(st.intime_column, ""))
        outtime = parse_time_minutes(row.get(st.outtime_column, ""))
        if intime is None or outtime is None:
            _reject(build, "bad_stay_times")
            continue
        age_text = normalize_text(row.get(st.age_column, ""))
        try:
            age = int(float(age_text))
        except ValueError:
            _reject(build, "bad_age")
            continue
        stays.append(_StayRecord(
            stay_id, hadm_id, intime, outtime, age,
            normalize_text(row.get(st.discharge_status_column, "")),
            normalize_text(row.get(st.discharge_location_column, "")),
        ))

    by_hadm: dict[str, list[_StayRecord]] = {}
    for rec in stays:
        by_hadm.setdefault(rec.hadm_id, []).append(rec)
    kept: dict[str, _StayRecord] = {}
    readmitted: set[str] = set()
    for hadm, recs in by_hadm.items():
        recs.sort(key=lambda r: (r.intime_min, r.stay_id))
        first = recs[0]
        for later in recs[1:]:
            _reject(build, "not_first_stay")
        if len(recs) > 1:
            readmitted.add(first.stay_id)
        if first.age < MIN_AGE_YEARS:
            _reject(build, "age_under_18")
            continue
        if first.outtime_min - first.intime_min <= MIN_STAY_MIN:
            _reject(build, "stay_not_over_24h")
            continue
        kept[first.stay_id] = first

    events_by_stay: dict[str, list[tuple[int, int, int, MedicalEvent]]] = {s: [] for s in kept}
    desc_map = load_description_map(manifest)
    for table_idx, table in enumerate(manifest.event_tables):
        code_cols = frozenset(normalize_text(c) for c in manifest.code_columns_for(table.event_type_name))
        skip = {table.stay_id_column, table.time_column, *table.excluded_columns}
        bad_times = 0
        empty_events = 0
        for row_idx, row in enumerate(_read_csv(manifest.resolve(table.file_path))):
            stay_id = normalize_text(row.get(table.stay_id_column, ""))
            rec = kept.get(stay_id)
            if rec is None:
                continue
            t = parse_time_minutes(row.get(table.time_column, ""))
            if t is None:
                bad_times += 1
                continue
            minutes = t - rec.intime_min
            if minutes < 0 or minutes > OBSERVATION_WINDOW_MIN:
                continue
            raw = [(name, value) for name, value in row.items() if name not in skip]
            try:
                ev = canonicalize_event(raw, table.event_type_name, minutes, code_cols)
            except CohortFilterReject:
                empty_events += 1
                continue
            events_by_stay[stay_id].append((minutes, table_idx, row_idx, ev))
        if bad_times:
            build.warnings.append(
                f"{table.event_type_name}: dropped {bad_times} rows with unparseable timestamps")
        if empty_events:
            build.warnings.append(
                f"{table.event_type_name}: dropped {empty_events} rows with no usable features")

    for stay_id in sorted(kept):
        rec = kept[stay_id]
        ordered = sorted(events_by_stay[stay_id])
        events = tuple(ev for _, _, _, ev in ordered)
        if len(events) < MIN_EVENTS:
            _reject(build, "fewer_than_5_events")
            continue
        sample = PatientSample(
            stay_id=rec.stay_id,
            hospital_admission_id=rec.hadm_id,
            source_dataset=manifest.dataset_name,
            events=events,
            intervals=compute_intervals(events),
            demographics=Demographics(rec.age, rec.intime_min, rec.outtime_min,
                                      rec.discharge_status, rec.discharge_location),
        )
        if rec.stay_id in readmitted:
            sample.labels["Readm"] = Label("Readm", 1)
        sample.validate_cohort()
        build.samples.append(sample)
    return build


@dataclass
class FeatureStats:
    """Occurrence statistics driving knowledge-free feature pruning."""

    name_counts: dict[tuple[str, str], int] = field(default_factory=dict)
    integer_only: dict[tuple[str, str], bool] = field(default_factory=dict)
    value_counts: dict[tuple[str, str, str], int] = field(default_factory=dict)


def compute_feature_stats(samples) -> FeatureStats:
    """Exact dataset-wide counts per (event_type, name) and (event_type, name, value)."""
    stats = FeatureStats()
    for sample in samples:
        for ev in sample.events:
            etype = ev.event_type.text
            for f in ev.features:
                nk = (etype, f.name.text)
                stats.name_counts[nk] = stats.name_counts.get(nk, 0) + 1
                stats.integer_only[nk] = stats.integer_only.get(nk, True) and \
                    is_integer_literal(f.value.raw)
                vk = (etype, f.name.text, f.value.raw)
                stats.value_counts[vk] = stats.value_counts.get(vk, 0) + 1
    return stats


@dataclass
class PruneResult:
    samples: list[PatientSample]
    features_pruned: int
    samples_dropped: int


def prune_features(samples, stats: FeatureStats) -> PruneResult:
    """Drop integer-only and rare features, then re-apply the event-count rule.

    Integer-only pruning skips Code-kind features: description-mapped code
    columns are identity-bearing even when their literals are integers, and
    the rule targets bookkeeping ids. Rarity is counted per value for codes
    and per feature name otherwise. ``features_pruned`` counts distinct pruned
    keys, not occurrences. Deterministic, hence idempotent for fixed stats.
    """
    pruned_keys: set[tuple] = set()

    def keep(etype: str, f: Feature) -> bool:
        nk = (etype, f.name.text)
        if f.value.kind is ValueKind.CODE:
            vk = (etype, f.name.text, f.value.raw)
            if stats.value_counts.get(vk, 0) < MIN_FEATURE_COUNT:
                pruned_keys.add(vk)
                return False
            return True
        if stats.integer_only.get(nk, False):
            pruned_keys.add(nk)
            return False
        if stats.name_counts.get(nk, 0) < MIN_FEATURE_COUNT:
            pruned_keys.add(nk)
            return False
        return True

    out: list[PatientSample] = []
    dropped = 0
    for sample in samples:
        new_events = []
        for ev in sample.events:
            feats = tuple(f for f in ev.features if keep(ev.event_type.text, f))
            if feats:
                new_events.append(MedicalEvent(ev.event_type, feats, ev.timestamp))
        if len(new_events) < MIN_EVENTS:
            dropped += 1
            continue
        events = tuple(new_events)
        new_sample = PatientSample(
            sample.stay_id, sample.hospital_admission_id, sample.source_dataset,
            events, compute_intervals(events),
            labels=dict(sample.labels), demographics=sample.demographics)
        out.append(new_sample)
    return PruneResult(out, len(pruned_keys), dropped)


def resolve_descriptions(samples, desc_map: DescriptionMap) -> list[PatientSample]:
    """Attach description text to Code features with a map hit (raw kept as is)."""
    out = []
    for sample in samples:
        new_events = []
        for ev in sample.events:
            feats = []
            for f in ev.features:
                if f.value.kind is ValueKind.CODE and f.value.text is None:
                    hit = desc_map.lookup(ev.event_type.text, f.name.text, f.value.raw)
                    if hit is not None:
                        f = Feature(f.name, type(f.value)(f.value.raw, f.value.kind, hit))
                feats.append(f)
            new_events.append(MedicalEvent(ev.event_type, tuple(feats), ev.timestamp))
        out.append(PatientSample(
            sample.stay_id, sample.hospital_admission_id, sample.source_dataset,
            tuple(new_events), sample.intervals,
            labels=dict(sample.labels), demographics=sample.demographics))
    return out


def load_dx_class_map(path: str | Path) -> dict[str, int]:
    """CSV (code, class_index) with indices in [0, 17]."""
    mapping: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if "code" not in row or "class_index" not in row:
                raise ManifestError("dx_class_map", "expected columns code,class_index")
            idx = int(row["class_index"])
            if not 0 <= idx < DX_CLASSES:
                raise ManifestError("dx_class_map", f"class_index {idx} outside [0, {DX_CLASSES - 1}]")
            mapping[normalize_text(row["code"])] = idx
    return mapping


@dataclass
class LabeledCohort:
    samples: list[PatientSample]
    label_spaces: dict[str, tuple[str, ...]]
    warnings: list[str] = field(default_factory=list)
    dropped_missing_status: int = 0


def attach_labels(samples, manifest: DatasetManifest, dx_class_map: dict[str, int] | None = None) -> LabeledCohort:
    """Derive all seven task labels for every sample.

    Mortality and imminent discharge use a 48-hour window anchored at the end
    of the 12-hour observation window. Final-acuity and imminent-discharge
    class vocabularies are derived from the observed discharge locations (plus
    the death and no-discharge classes), sorted for determinism.
    """
    horizon = OBSERVATION_WINDOW_MIN + PREDICTION_WINDOW_MIN
    warnings: list[str] = []

    dx_codes_by_hadm: dict[str, set[str]] = {}
    if manifest.diagnoses_table is not None and dx_class_map is not None:
        dt = manifest.diagnoses_table
        unknown = 0
        for row in _read_csv(manifest.resolve(dt.file_path)):
            hadm = normalize_text(row.get(dt.hospital_admission_id_column, ""))
            code = normalize_text(row.get(dt.code_column, ""))
            if not hadm or not code:
                continue
            if code not in dx_class_map:
                unknown += 1
                continue
            dx_codes_by_hadm.setdefault(hadm, set()).add(code)
        if unknown:
            warnings.append(f"diagnoses: {unknown} codes absent from the class map")
    elif manifest.diagnoses_table is not None or dx_class_map is not None:
        warnings.append("Dx labels default to all-zero: need both a diagnoses table and a class map")

    usable: list[PatientSample] = []
    dropped = 0
    for sample in samples:
        if sample.demographics is None or not sample.demographics.discharge_status:
            dropped += 1
            continue
        usable.append(sample)

    def expired(s: PatientSample) -> bool:
        return s.demographics.discharge_status.lower() == "expired"

    def location(s: PatientSample) -> str:
        return s.demographics.discharge_location.lower() or UNKNOWN_LOCATION_CLASS

    def fi_ac_class(s: PatientSample) -> str:
        return DEATH_CLASS if expired(s) else location(s)

    def im_disch_class(s: PatientSample) -> str:
        if s.stay_minutes > horizon:
            return NO_DISCHARGE_CLASS
        return DEATH_CLASS if expired(s) else location(s)

    fi_space = tuple(sorted({fi_ac_class(s) for s in usable} | {DEATH_CLASS}))
    im_space = tuple(sorted({im_disch_class(s) for s in usable} | {NO_DISCHARGE_CLASS}))
    fi_index = {c: i for i, c in enumerate(fi_space)}
    im_index = {c: i for i, c in enumerate(im_space)}

    for sample in usable:
        stay = sample.stay_minutes
        readm = sample.labels.get("Readm")
        dx_vec = [0] * DX_CLASSES
        for code in dx_codes_by_hadm.get(sample.hospital_admission_id, ()):
            dx_vec[dx_class_map[code]] = 1
        sample.labels.clear()
        sample.labels.update({
            "Mort": Label("Mort", int(expired(sample) and stay <= horizon)),
            "LOS3": Label("LOS3", int(stay > 3 * 1440)),
            "LOS7": Label("LOS7", int(stay > 7 * 1440)),
            "Readm": readm if readm is not None else Label("Readm", 0),
            "Fi_ac": Label("Fi_ac", fi_index[fi_ac_class(sample)]),
            "Im_disch": Label("Im_disch", im_index[im_disch_class(sample)]),
            "Dx": Label("Dx", tuple(dx_vec)),
        })
    return LabeledCohort(usable, {"Fi_ac": fi_space, "Im_disch": im_space},
                         warnings, dropped)


@dataclass
class IngestReport:
    samples_emitted: int
    samples_rejected_by_rule: dict[str, int]
    features_pruned: int
    warnings: list[str]

    def to_dict(self) -> dict:
        return {
            "samples_emitted": self.samples_emitted,
            "samples_rejected_by_rule": dict(sorted(self.samples_rejected_by_rule.items())),
            "features_pruned": self.features_pruned,
            "warnings": list(self.warnings),
        }


@dataclass
class Cohort:
    """A labeled, pruned dataset ready for serialization and splitting."""

    dataset_name: str
    samples: list[PatientSample]
    label_spaces: dict[str, tuple[str, ...]]

    def n_classes(self, task: str) -> int:
        spec = TASKS[task]
        if spec.n_classes is not None:
            return spec.n_classes
        return len(self.label_spaces[task])


def ingest_dataset(manifest: DatasetManifest, dx_class_map: dict[str, int] | None = None) -> tuple[Cohort, IngestReport]:
    """Full pipeline: cohort rules, stats, pruning, labels, report."""
    build = build_cohort(manifest)
    stats = compute_feature_stats(build.samples)
    pruned = prune_features(build.samples, stats)
    if pruned.samples_dropped:
        build.rejected_by_rule["fewer_than_5_events_after_pruning"] = pruned.samples_dropped
    resolved = resolve_descriptions(pruned.samples, load_description_map(manifest))
    labeled = attach_labels(resolved, manifest, dx_class_map)
    if labeled.dropped_missing_status:
        build.rejected_by_rule["missing_discharge_status"] = labeled.dropped_missing_status
    report = IngestReport(
        samples_emitted=len(labeled.samples),
        samples_rejected_by_rule=build.rejected_by_rule,
        features_pruned=pruned.features_pruned,
        warnings=build.warnings + labeled.warnings,
    )
    cohort = Cohort(manifest.dataset_name, labeled.samples, labeled.label_spaces)
    return cohort, report


# -- bundle persistence -----------------------------------------------------

_KIND_CODE = {ValueKind.TEXT: "t", ValueKind.NUMERIC: "n", ValueKind.CODE: "c"}
_KIND_FROM = {v: k for k, v in _KIND_CODE.items()}


def _sample_to_dict(s: PatientSample) -> dict:
    d = s.demographics
    return {
        "stay_id": s.stay_id,
        "hospital_admission_id": s.hospital_admission_id,
        "source_dataset": s.source_dataset,
        "events": [{
            "type": ev.event_type.text,
            "t": ev.timestamp,
            "features": [[f.name.text, f.value.raw, _KIND_CODE[f.value.kind], f.value.text]
                         for f in ev.features],
        } for ev in s.events],
        "intervals": [iv.bucket_id for iv in s.intervals],
        "labels": {task: list(l.value) if isinstance(l.value, tuple) else l.value
                   for task, l in sorted(s.labels.items())},
        "demographics": None if d is None else {
            "age_years": d.age_years, "icu_in_min": d.icu_in_min, "icu_out_min": d.icu_out_min,
            "discharge_status": d.discharge_status, "discharge_location": d.discharge_location,
        },
    }


def sample_from_dict(doc: dict) -> PatientSample:
    from .events import EventType, FeatureName, FeatureValue

    events = []
    for e in doc["events"]:
        feats = tuple(Feature(FeatureName(n), FeatureValue(v, _KIND_FROM[k], text))
                      for n, v, k, text in e["features"])
        events.append(MedicalEvent(EventType(e["type"]), feats, int(e["t"])))
    d = doc.get("demographics")
    demo = None if d is None else Demographics(
        d["age_years"], d["icu_in_min"], d["icu_out_min"],
        d["discharge_status"], d["discharge_location"])
    sample = PatientSample(
        doc["stay_id"], doc["hospital_admission_id"], doc["source_dataset"],
        tuple(events), tuple(IntervalBucket(i) for i in doc["intervals"]),
        demographics=demo)
    for task, value in doc["labels"].items():
        sample.labels[task] = Label(task, tuple(value) if isinstance(value, list) else value)
    return sample


def save_cohort(cohort: Cohort, path: str | Path) -> None:
    doc = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "dataset_name": cohort.dataset_name,
        "label_spaces": {k: list(v) for k, v in sorted(cohort.label_spaces.items())},
        "samples": [_sample_to_dict(s) for s in cohort.samples],
    }
    Path(path).write_text(json.dumps(doc, ensure_ascii=True, sort_keys=True,
                                     separators=(",", ":")), encoding="utf-8")


def load_cohort(path: str | Path) -> Cohort:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    version = doc.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise ManifestError("format_version", f"unsupported bundle version {version!r}")
    return Cohort(
        doc["dataset_name"],
        [sample_from_dict(s) for s in doc["samples"]],
        {k: tuple(v) for k, v in doc["label_spaces"].items()},
    )
