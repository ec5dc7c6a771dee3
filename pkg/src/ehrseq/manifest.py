"""Dataset manifests: the only per-dataset configuration the pipeline accepts.

A manifest declares schema linkage (which files hold stays and events, which
columns carry ids and times) and optional code-description maps. It carries no
medical knowledge: no feature lists, no vocabularies, no unit tables.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ManifestError

MANIFEST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EventTableSpec:
    file_path: str
    event_type_name: str
    stay_id_column: str
    time_column: str
    excluded_columns: tuple[str, ...] = ()
    main_column: str | None = None  # primary text column, used only for importance reporting


@dataclass(frozen=True)
class StaysTableSpec:
    file_path: str
    stay_id_column: str
    patient_id_column: str
    hospital_admission_id_column: str
    intime_column: str
    outtime_column: str
    age_column: str
    discharge_status_column: str
    discharge_location_column: str


@dataclass(frozen=True)
class DescriptionMapSpec:
    file_path: str
    code_column: str
    text_column: str
    applies_to: tuple[str, ...]  # entries "event_type_name:column"


@dataclass(frozen=True)
class DiagnosesTableSpec:
    """Optional diagnosis-code table, joined by hospital admission for Dx labels."""

    file_path: str
    hospital_admission_id_column: str
    code_column: str


@dataclass(frozen=True)
class DatasetManifest:
    dataset_name: str
    stays_table: StaysTableSpec
    event_tables: tuple[EventTableSpec, ...]
    description_maps: tuple[DescriptionMapSpec, ...] = ()
    diagnoses_table: DiagnosesTableSpec | None = None
    root: Path = field(default=Path("."), compare=False)

    def resolve(self, file_path: str) -> Path:
        p = Path(file_path)
        return p if p.is_absolute() else self.root / p

    def event_table(self, event_type_name: str) -> EventTableSpec:
        for t in self.event_tables:
            if t.event_type_name == event_type_name:
                return t
        raise ManifestError("event_tables", f"no event table named {event_type_name!r}")

    def code_columns_for(self, event_type_name: str) -> frozenset[str]:
        cols = set()
        for dm in self.description_maps:
            for target in dm.applies_to:
                table, column = target.split(":", 1)
                if table == event_type_name:
                    cols.add(column)
        return frozenset(cols)


def _require(doc: dict, key: str, where: str) -> object:
    if key not in doc:
        raise ManifestError(f"{where}.{key}" if where else key, "missing required field")
    return doc[key]


def _csv_header(path: Path, field_name: str) -> list[str]:
    if not path.is_file():
        raise ManifestError(field_name, f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        row = next(csv.reader(fh), None)
    if not row:
        raise ManifestError(field_name, f"empty CSV: {path}")
    return row


def _check_columns(header: list[str], columns: dict[str, str], where: str) -> None:
    for field_name, column in columns.items():
        if column not in header:
            raise ManifestError(f"{where}.{field_name}", f"column {column!r} not in header {header}")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and eagerly validate a manifest JSON file.

    Every referenced file must exist and every referenced column must appear in
    that file's CSV header; dangling description-map targets are errors. Paths
    resolve relative to the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError("path", f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError("path", f"manifest is not valid JSON: {exc}") from exc
    root = path.parent

    version = doc.get("format_version", MANIFEST_FORMAT_VERSION)
    if version != MANIFEST_FORMAT_VERSION:
        raise ManifestError("format_version", f"unsupported manifest version {version!r}")
    name = _require(doc, "dataset_name", "")
    if not isinstance(name, str) or not name:
        raise ManifestError("dataset_name", "must be a non-empty string")

    st = _require(doc, "stays_table", "")
    stays = StaysTableSpec(
        file_path=_require(st, "file_path", "stays_table"),
        stay_id_column=_require(st, "stay_id_column", "stays_table"),
        patient_id_column=_require(st, "patient_id_column", "stays_table"),
        hospital_admission_id_column=_require(st, "hospital_admission_id_column", "stays_table"),
        intime_column=_require(st, "intime_column", "stays_table"),
        outtime_column=_require(st, "outtime_column", "stays_table"),
        age_column=_require(st, "age_column", "stays_table"),
        discharge_status_column=_require(st, "discharge_status_column", "stays_table"),
        discharge_location_column=_require(st, "discharge_location_column", "stays_table"),
    )
    stays_header = _csv_header(root / stays.file_path if not Path(stays.file_path).is_absolute()
                               else Path(stays.file_path), "stays_table.file_path")
    _check_columns(stays_header, {
        "stay_id_column": stays.stay_id_column,
        "patient_id_column": stays.patient_id_column,
        "hospital_admission_id_column": stays.hospital_admission_id_column,
        "intime_column": stays.intime_column,
        "outtime_column": stays.outtime_column,
        "age_column": stays.age_column,
        "discharge_status_column": stays.discharge_status_column,
        "discharge_location_column": stays.discharge_location_column,
    }, "stays_table")

    raw_tables = _require(doc, "event_tables", "")
    if not isinstance(raw_tables, list) or not raw_tables:
        raise ManifestError("event_tables", "must be a non-empty list")
    tables: list[EventTableSpec] = []
    headers: dict[str, list[str]] = {}
    for i, rt in enumerate(raw_tables):
        where = f"event_tables[{i}]"
        spec = EventTableSpec(
            file_path=_require(rt, "file_path", where),
            event_type_name=_require(rt, "event_type_name", where),
            stay_id_column=_require(rt, "stay_id_column", where),
            time_column=_require(rt, "time_column", where),
            excluded_columns=tuple(rt.get("excluded_columns", ())),
            main_column=rt.get("main_column"),
        )
        if spec.event_type_name in headers:
            raise ManifestError(f"{where}.event_type_name", f"duplicate table name {spec.event_type_name!r}")
        fp = Path(spec.file_path)
        header = _csv_header(fp if fp.is_absolute() else root / fp, f"{where}.file_path")
        required = {"stay_id_column": spec.stay_id_column, "time_column": spec.time_column}
        if spec.main_column is not None:
            required["main_column"] = spec.main_column
        _check_columns(header, required, where)
        headers[spec.event_type_name] = header
        tables.append(spec)

    maps: list[DescriptionMapSpec] = []
    for i, rm in enumerate(doc.get("description_maps", ())):
        where = f"description_maps[{i}]"
        spec = DescriptionMapSpec(
            file_path=_require(rm, "file_path", where),
            code_column=_require(rm, "code_column", where),
            text_column=_require(rm, "text_column", where),
            applies_to=tuple(_require(rm, "applies_to", where)),
        )
        fp = Path(spec.file_path)
        header = _csv_header(fp if fp.is_absolute() else root / fp, f"{where}.file_path")
        _check_columns(header, {"code_column": spec.code_column, "text_column": spec.text_column}, where)
        if not spec.applies_to:
            raise ManifestError(f"{where}.applies_to", "must name at least one table:column")
        for target in spec.applies_to:
            if ":" not in target:
                raise ManifestError(f"{where}.applies_to", f"malformed target {target!r}, want 'table:column'")
            table, column = target.split(":", 1)
            if table not in headers:
                raise ManifestError(f"{where}.applies_to", f"unknown event table {table!r}")
            if column not in headers[table]:
                raise ManifestError(f"{where}.applies_to", f"column {column!r} not in table {table!r}")
        maps.append(spec)

    diagnoses = None
    if doc.get("diagnoses_table") is not None:
        dt = doc["diagnoses_table"]
        diagnoses = DiagnosesTableSpec(
            file_path=_require(dt, "file_path", "diagnoses_table"),
            hospital_admission_id_column=_require(dt, "hospital_admission_id_column", "diagnoses_table"),
            code_column=_require(dt, "code_column", "diagnoses_table"),
        )
        fp = Path(diagnoses.file_path)
        header = _csv_header(fp if fp.is_absolute() else root / fp, "diagnoses_table.file_path")
        _check_columns(header, {
            "hospital_admission_id_column": diagnoses.hospital_admission_id_column,
            "code_column": diagnoses.code_column,
        }, "diagnoses_table")

    return DatasetManifest(
        dataset_name=name,
        stays_table=stays,
        event_tables=tuple(tables),
        description_maps=tuple(maps),
        diagnoses_table=diagnoses,
        root=root,
    )
