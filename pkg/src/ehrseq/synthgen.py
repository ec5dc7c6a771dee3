"""Synthetic multi-hospital ICU exports with known causal structure.

Real hospital exports cannot ship with this repository, so the experiment
harness and its tests run on generated data instead. Each hospital draws
events from a pool of latent clinical concepts (drugs and lab analytes)
whose descriptions come from a fixed compositional lexicon. Stay outcomes
follow a logistic risk model over the concepts present in the stay, so all
task labels carry learnable signal, and the exact concept weights are
written to a ground-truth JSON for importance and separability checks.

Heterogeneity is controllable along the axes that matter for transfer:

- ``schema_style`` switches table and column names (and the timestamp
  format) between two realistic layouts.
- ``code_style`` either hides concepts behind opaque per-hospital codes
  plus a description map, or writes the description text inline.
- ``vocab_overlap`` sets the fraction of a hospital's concepts drawn from
  the shared lexicon prefix; the remainder come from a slice reserved by
  hospital name, so low-overlap hospitals share little description text.

Code strings embed the hospital name, so two hospitals never share codes
even when they share every underlying concept. Ancillary event columns
(dose, route, lab values) are sampled independently of the concept so the
strings they share across hospitals carry no label signal; the concept
identity lives only in the main code/name column.

Generation is deterministic: the same config and noise scale produce a
byte-identical directory.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .metrics import auprc

SCHEMA_STYLES = ("mimic_like", "eicu_like")
CODE_STYLES = ("coded_with_descriptions", "raw_text")
GROUND_TRUTH_FILE = "ground_truth.json"
DX_MAP_FILE = "dx_class_map.csv"

N_DRUG_CONCEPTS = 80
N_LAB_CONCEPTS = 30
N_RESERVED_SLICES = 8

# Drivers are drawn from this many leading shared drug concepts, so any
# hospital with vocab_overlap >= DRIVER_POOL / N_DRUG_CONCEPTS contains all
# of them. Below that the label signal degrades honestly.
DRIVER_POOL = 24
DRIVER_WEIGHTS = (2.4, 2.1, 1.8)
BACKGROUND_WEIGHT_STD = 0.35

PREVALENCE_TARGETS = {"Mort": 0.12, "LOS3": 0.30, "LOS7": 0.10, "Readm": 0.03}
SEPARABILITY_TASKS = ("Mort", "LOS3", "LOS7")
MIN_SEPARABILITY_MARGIN = 0.2

_RISK_TASKS = ("Mort", "LOS3", "Readm", "Fi_ac", "Dx")
_TASK_SALT = {t: i for i, t in enumerate(_RISK_TASKS)}

_AGENT_PREFIXES = ("cef", "dola", "vera", "meto", "lori", "pexa",
                   "rina", "talo", "zena", "bromi", "cali", "dura")
_AGENT_SUFFIXES = ("pril", "zole", "mycin", "olol", "sartan",
                   "statin", "mab", "tide", "caine", "dipine")
ROUTES = ("oral", "intravenous", "subcutaneous", "topical", "inhaled")
STRENGTHS = ("10 mg", "50 mg", "100 mg", "250 mg")

_SHARED_ANALYTES = (
    "sodium", "potassium", "chloride", "bicarbonate", "lactate", "creatinine",
    "urea nitrogen", "glucose", "calcium", "magnesium", "phosphate", "albumin",
    "bilirubin", "hemoglobin", "hematocrit", "platelet count",
    "white cell count", "troponin", "ferritin", "ammonia", "amylase",
    "lipase", "fibrinogen", "osmolality",
)
_RESERVED_GREEK = ("alfa", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta")
_RESERVED_KINDS = ("panel", "index", "marker", "fraction", "ratio", "titer")
SPECIMENS = ("serum", "plasma", "whole blood", "urine", "arterial")
_LAB_UNITS = ("mmol/l", "mg/dl", "g/dl", "iu/l", "ng/ml")

_EPOCH = datetime(2100, 1, 1)

_DEATH_DURATION = (1500, 3500)  # keeps every death inside the 60 h horizon
_SHORT_STAY = (1500, 4200)
_MEDIUM_STAY = (4500, 10000)
_LONG_STAY = (10200, 19800)
_FI_AC_BANDS = ((0.60, "home"), (0.80, "skilled nursing facility"),
                (0.95, "rehab"), (1.01, "hospice"))


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def _agents() -> list[str]:
    return [p + s for p in _AGENT_PREFIXES for s in _AGENT_SUFFIXES]


def drug_lexicon() -> list[str]:
    """About 500 shared drug descriptions, interleaved so any prefix of the
    list spans many distinct agents."""
    shared = _agents()[:40]
    out = []
    for i in range(500):
        agent = shared[i % 40]
        route = ROUTES[(i // 40) % len(ROUTES)]
        strength = STRENGTHS[(i // 200) % len(STRENGTHS)]
        out.append(f"{agent} {route} {strength}")
    return out


def lab_lexicon() -> list[str]:
    return [f"{SPECIMENS[i % 5]} {_SHARED_ANALYTES[i // 5]}"
            for i in range(5 * len(_SHARED_ANALYTES))]


def _reserved_drugs(slice_idx: int) -> list[str]:
    agents = _agents()[40 + 10 * slice_idx:50 + 10 * slice_idx]
    return [f"{a} {r} {s}" for a in agents for r in ROUTES for s in STRENGTHS]


def _reserved_labs(slice_idx: int) -> list[str]:
    greek = _RESERVED_GREEK[slice_idx]
    return [f"{sp} {greek} {kind}" for kind in _RESERVED_KINDS for sp in SPECIMENS]


@dataclass(frozen=True)
class LatentConcept:
    """One synthetic clinical concept; identity is the description text."""

    concept_id: str
    kind: str  # "drug" or "lab"
    description: str

    def lab_base(self) -> float:
        return 1.0 + (_stable_hash(self.concept_id) % 400) / 2.0

    def lab_unit(self) -> str:
        return _LAB_UNITS[_stable_hash(self.concept_id) % len(_LAB_UNITS)]


@dataclass(frozen=True)
class HospitalConfig:
    name: str
    n_stays: int
    schema_style: str = "mimic_like"
    code_style: str = "coded_with_descriptions"
    vocab_overlap: float = 1.0
    event_rate: float = 0.8  # mean events per observed hour
    risk_model_seed: int = 0

    def __post_init__(self) -> None:
        if not self.name or not self.name.strip():
            raise ConfigError("hospital name must be non-empty")
        if self.n_stays < 50:
            raise ConfigError(f"n_stays must be >= 50, got {self.n_stays}")
        if self.schema_style not in SCHEMA_STYLES:
            raise ConfigError(f"unknown schema_style {self.schema_style!r}")
        if self.code_style not in CODE_STYLES:
            raise ConfigError(f"unknown code_style {self.code_style!r}")
        if not 0.0 <= self.vocab_overlap <= 1.0:
            raise ConfigError(f"vocab_overlap must be in [0, 1], got {self.vocab_overlap}")
        if not self.event_rate > 0:
            raise ConfigError(f"event_rate must be positive, got {self.event_rate}")

    def to_dict(self) -> dict:
        return {"name": self.name, "n_stays": self.n_stays,
                "schema_style": self.schema_style, "code_style": self.code_style,
                "vocab_overlap": self.vocab_overlap, "event_rate": self.event_rate,
                "risk_model_seed": self.risk_model_seed}

    @classmethod
    def from_dict(cls, doc: dict) -> "HospitalConfig":
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad hospital config: {exc}") from None

    def code_prefix(self) -> str:
        prefix = "".join(ch for ch in self.name.upper() if ch.isalnum())[:10]
        return prefix or "H"


def hospital_concepts(cfg: HospitalConfig) -> tuple[LatentConcept, ...]:
    """The hospital's concept pool: a shared-lexicon prefix sized by
    vocab_overlap plus concepts from a slice reserved by hospital name."""
    slice_idx = _stable_hash(cfg.name) % N_RESERVED_SLICES
    shared_d = round(cfg.vocab_overlap * N_DRUG_CONCEPTS)
    shared_l = round(cfg.vocab_overlap * N_LAB_CONCEPTS)
    drugs = drug_lexicon()[:shared_d] + _reserved_drugs(slice_idx)[:N_DRUG_CONCEPTS - shared_d]
    labs = lab_lexicon()[:shared_l] + _reserved_labs(slice_idx)[:N_LAB_CONCEPTS - shared_l]
    out = [LatentConcept(f"drug|{d}", "drug", d) for d in drugs]
    out += [LatentConcept(f"lab|{d}", "lab", d) for d in labs]
    return tuple(out)


def driver_concepts(task: str, risk_model_seed: int) -> tuple[str, ...]:
    """The 3 designated high-weight drug descriptions for a task."""
    if task == "LOS7":  # LOS7 shares the length-of-stay risk score
        task = "LOS3"
    rng = np.random.default_rng([risk_model_seed, 97, _TASK_SALT[task]])
    picks = rng.choice(DRIVER_POOL, size=3, replace=False)
    lexicon = drug_lexicon()
    return tuple(lexicon[int(i)] for i in picks)


def concept_weight(task: str, concept: LatentConcept, risk_model_seed: int) -> float:
    """Per-task causal weight; a pure function of (task, concept, seed) so
    hospitals sharing a concept and a risk seed share its weight."""
    if task == "LOS7":
        task = "LOS3"
    if concept.kind == "lab":
        return 0.0
    drivers = driver_concepts(task, risk_model_seed)
    if concept.description in drivers:
        return DRIVER_WEIGHTS[drivers.index(concept.description)]
    rng = np.random.default_rng(
        [risk_model_seed, 11, _TASK_SALT[task], _stable_hash(concept.concept_id)])
    return float(rng.normal(0.0, BACKGROUND_WEIGHT_STD))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


@dataclass
class _Stay:
    index: int
    age: int
    active: np.ndarray
    eta: dict
    obs_times: np.ndarray
    obs_picks: np.ndarray
    dose_idx: np.ndarray
    route_idx: np.ndarray
    lab_z: np.ndarray
    late_frac: np.ndarray
    late_picks: np.ndarray
    late_dose: np.ndarray
    late_route: np.ndarray
    late_z: np.ndarray
    dx_u: np.ndarray
    dx_variant: np.ndarray
    duration_u: float
    readm_gap: int
    readm_duration: int
    intime_jitter: int
    # filled in after thresholding
    risks: dict | None = None
    labels: dict | None = None
    duration: int = 0
    status: str = ""
    location: str = ""
    dx_classes: tuple = ()

    def stay_id(self) -> str:
        return f"S{self.index:05d}"

    def hadm_id(self) -> str:
        return f"H{self.index:05d}"


def _simulate(cfg: HospitalConfig, salt: int, noise_scale: float) -> tuple[list[_Stay], tuple[LatentConcept, ...]]:
    concepts = hospital_concepts(cfg)
    n_concepts = len(concepts)
    weights = {t: np.array([concept_weight(t, c, cfg.risk_model_seed) for c in concepts])
               for t in _RISK_TASKS}

    class_rng = np.random.default_rng([cfg.risk_model_seed, 13])
    dx_rate = class_rng.uniform(0.05, 0.25, size=18)
    dx_base = np.log(dx_rate / (1.0 - dx_rate))
    dx_slope = class_rng.normal(0.8, 0.3, size=18)

    rng = np.random.default_rng([cfg.risk_model_seed, 1000 + salt])
    stays: list[_Stay] = []
    for i in range(cfg.n_stays):
        age = int(rng.integers(18, 91))
        n_active = 4 + int(min(rng.poisson(4.0), 10))
        active = np.sort(rng.choice(n_concepts, size=min(n_active, n_concepts), replace=False))
        eta = {t: float(rng.normal()) for t in _RISK_TASKS}
        n_obs = max(6, int(rng.poisson(cfg.event_rate * 12.0)))
        n_late = int(rng.poisson(2.0))
        stays.append(_Stay(
            index=i, age=age, active=active, eta=eta,
            obs_times=np.sort(rng.integers(0, 721, size=n_obs)),
            obs_picks=rng.choice(active, size=n_obs),
            dose_idx=rng.integers(0, len(STRENGTHS), size=n_obs),
            route_idx=rng.integers(0, len(ROUTES), size=n_obs),
            lab_z=rng.normal(size=n_obs),
            late_frac=rng.uniform(size=n_late),
            late_picks=rng.choice(active, size=n_late),
            late_dose=rng.integers(0, len(STRENGTHS), size=n_late),
            late_route=rng.integers(0, len(ROUTES), size=n_late),
            late_z=rng.normal(size=n_late),
            dx_u=rng.uniform(size=18),
            dx_variant=rng.integers(0, 3, size=18),
            duration_u=float(rng.uniform()),
            readm_gap=int(rng.integers(1000, 5000)),
            readm_duration=int(rng.integers(60, 1200)),
            intime_jitter=int(rng.integers(0, 1440)),
        ))

    risks = {t: np.array([weights[t][s.active].sum() for s in stays]) for t in _RISK_TASKS}
    u = {t: risks[t] + noise_scale * np.array([s.eta[t] for s in stays])
         for t in _RISK_TASKS}

    thresholds = {
        "Mort": float(np.quantile(u["Mort"], 1.0 - PREVALENCE_TARGETS["Mort"])),
        "LOS3": float(np.quantile(u["LOS3"], 1.0 - PREVALENCE_TARGETS["LOS3"])),
        "LOS7": float(np.quantile(u["LOS3"], 1.0 - PREVALENCE_TARGETS["LOS7"])),
        "Readm": float(np.quantile(u["Readm"], 1.0 - PREVALENCE_TARGETS["Readm"])),
    }

    dead = u["Mort"] > thresholds["Mort"]
    survivor_fi = u["Fi_ac"][~dead]
    fi_cuts = [float(np.quantile(survivor_fi, q)) for q, _ in _FI_AC_BANDS[:-1]] if len(survivor_fi) else []

    for pos, stay in enumerate(stays):
        is_dead = bool(dead[pos])
        los7 = (not is_dead) and u["LOS3"][pos] > thresholds["LOS7"]
        los3 = (not is_dead) and u["LOS3"][pos] > thresholds["LOS3"]
        readm = bool(u["Readm"][pos] > thresholds["Readm"])
        if is_dead:
            lo, hi = _DEATH_DURATION
        elif los7:
            lo, hi = _LONG_STAY
        elif los3:
            lo, hi = _MEDIUM_STAY
        else:
            lo, hi = _SHORT_STAY
        stay.duration = lo + int(stay.duration_u * (hi - lo))
        if is_dead:
            stay.status, stay.location = "Expired", "died"
        else:
            stay.status = "Alive"
            fi_u = u["Fi_ac"][pos]
            band = len(fi_cuts)
            for b, cut in enumerate(fi_cuts):
                if fi_u <= cut:
                    band = b
                    break
            stay.location = _FI_AC_BANDS[band][1]
        dx_p = _sigmoid(dx_base + dx_slope * (risks["Dx"][pos] + noise_scale * stay.eta["Dx"]))
        stay.dx_classes = tuple(int(c) for c in np.nonzero(stay.dx_u < dx_p)[0])
        stay.risks = {t: float(risks[t][pos]) for t in ("Mort", "Readm", "Fi_ac", "Dx")}
        stay.risks["LOS3"] = float(risks["LOS3"][pos])
        stay.risks["LOS7"] = float(risks["LOS3"][pos])
        stay.labels = {
            "Mort": int(is_dead),  # every death lands inside the horizon
            "LOS3": int(stay.duration > 3 * 1440),
            "LOS7": int(stay.duration > 7 * 1440),
            "Readm": int(readm),
        }
    return stays, concepts


def _oracle_stats(stays: list[_Stay]) -> tuple[dict, dict, dict]:
    oracle, prevalence, margins = {}, {}, {}
    for task in ("Mort", "LOS3", "LOS7", "Readm"):
        labels = np.array([s.labels[task] for s in stays], dtype=np.float64)
        scores = np.array([s.risks[task] for s in stays])
        prevalence[task] = float(labels.mean())
        if 0 < labels.sum() < len(labels):
            oracle[task] = auprc(scores, labels)
            margins[task] = oracle[task] - prevalence[task]
        else:
            oracle[task] = None
            margins[task] = None
    return oracle, prevalence, margins


# Column/table layouts per schema style. Timestamps are ISO datetimes in the
# mimic-like layout and plain minute offsets in the eicu-like layout.
_LAYOUTS = {
    "mimic_like": {
        "stays_file": "icustays.csv", "stay": "ICUSTAY_ID", "hadm": "HADM_ID",
        "subject": "SUBJECT_ID", "intime": "INTIME", "outtime": "OUTTIME",
        "age": "AGE", "status": "DISCHARGE_STATUS", "location": "DISCHARGE_LOCATION",
        "lab_file": "labevents.csv", "lab_type": "labevents", "lab_time": "CHARTTIME",
        "lab_code": "ITEMID", "lab_value": "VALUENUM", "lab_unit": "VALUEUOM",
        "lab_flag": "FLAG",
        "drug_file": "prescriptions.csv", "drug_type": "prescriptions",
        "drug_time": "STARTTIME", "drug_code": "DRUG", "drug_dose": "DOSE_VAL",
        "drug_route": "ROUTE",
        "dx_file": "diagnoses.csv", "dx_hadm": "HADM_ID", "dx_code": "ICD_CODE",
        "lab_map_file": "d_labitems.csv", "drug_map_file": "d_prescriptions.csv",
        "map_text": "LABEL", "iso_times": True,
    },
    "eicu_like": {
        "stays_file": "patient.csv", "stay": "patientunitstayid",
        "hadm": "patienthealthsystemstayid", "subject": "uniquepid",
        "intime": "unitadmitoffset", "outtime": "unitdischargeoffset",
        "age": "age", "status": "hospitaldischargestatus",
        "location": "hospitaldischargelocation",
        "lab_file": "lab.csv", "lab_type": "lab", "lab_time": "labresultoffset",
        "lab_code": "labname", "lab_value": "labresult", "lab_unit": "labmeasurename",
        "lab_flag": "labresulttext",
        "drug_file": "medication.csv", "drug_type": "medication",
        "drug_time": "drugstartoffset", "drug_code": "drugname",
        "drug_dose": "dosage", "drug_route": "routeadmin",
        "dx_file": "diagnosis.csv", "dx_hadm": "patienthealthsystemstayid",
        "dx_code": "icd9code",
        "lab_map_file": "lab_dictionary.csv", "drug_map_file": None,
        "map_text": "description", "iso_times": False,
    },
}


def _format_time(minutes: int, iso: bool) -> str:
    if not iso:
        return str(minutes)
    return (_EPOCH + timedelta(minutes=minutes)).strftime("%Y-%m-%d %H:%M:%S")


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class GenerationResult:
    out_dir: Path
    manifest_path: Path
    ground_truth_path: Path
    attempts: int
    oracle_auprc: dict
    prevalence: dict
    n_stay_rows: int
    n_event_rows: int


def generate_hospital(cfg: HospitalConfig, out_dir: str | Path,
                      noise_scale: float = 1.0, max_attempts: int = 5) -> GenerationResult:
    """Generate one hospital's export under out_dir.

    Simulation is retried with a fresh internal salt until the oracle AUPRC
    margin over prevalence reaches MIN_SEPARABILITY_MARGIN for the core
    binary tasks; a config whose margins never clear the bar (for example
    vocab_overlap too low for any driver concept to be present) fails with
    ConfigError after max_attempts tries.
    """
    if noise_scale < 0:
        raise ConfigError(f"noise_scale must be >= 0, got {noise_scale}")
    stays = None
    concepts: tuple[LatentConcept, ...] = ()
    attempts = 0
    history = []
    for salt in range(max_attempts):
        attempts = salt + 1
        stays, concepts = _simulate(cfg, salt, noise_scale)
        oracle, prevalence, margins = _oracle_stats(stays)
        bad = [t for t in SEPARABILITY_TASKS
               if margins[t] is None or margins[t] < MIN_SEPARABILITY_MARGIN]
        history.append({t: margins[t] for t in SEPARABILITY_TASKS})
        if not bad:
            break
    else:
        raise ConfigError(
            f"hospital {cfg.name!r}: oracle margin below {MIN_SEPARABILITY_MARGIN} "
            f"after {max_attempts} attempts; margins per attempt: {history}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layout = _LAYOUTS[cfg.schema_style]
    coded = cfg.code_style == "coded_with_descriptions"
    prefix = cfg.code_prefix()
    iso = layout["iso_times"]

    codes = {}
    for j, concept in enumerate(concepts):
        tag = "MED" if concept.kind == "drug" else "LAB"
        codes[concept.concept_id] = f"{prefix}-{tag}-{j:03d}"

    # the drug name column is inline text unless this layout maps drug codes
    drug_coded = coded and layout["drug_map_file"] is not None

    def drug_name(c: LatentConcept) -> str:
        return codes[c.concept_id] if drug_coded else c.description

    def lab_name(c: LatentConcept) -> str:
        return codes[c.concept_id] if coded else c.description

    stay_rows, lab_rows, drug_rows, dx_rows = [], [], [], []
    for stay in stays:
        intime = stay.index * 30000 + stay.intime_jitter
        outtime = intime + stay.duration
        stay_rows.append([stay.stay_id(), stay.hadm_id(), f"P{stay.index:05d}",
                          _format_time(intime, iso), _format_time(outtime, iso),
                          str(stay.age), stay.status, stay.location])

        horizon = min(stay.duration, 2880)
        late_times = [721 + int(f * (horizon - 721)) for f in stay.late_frac] if horizon > 721 else []
        events = list(zip(stay.obs_times.tolist(), stay.obs_picks.tolist(),
                          stay.dose_idx.tolist(), stay.route_idx.tolist(),
                          stay.lab_z.tolist()))
        events += list(zip(late_times, stay.late_picks.tolist(),
                           stay.late_dose.tolist(), stay.late_route.tolist(),
                           stay.late_z.tolist()))
        for minute, pick, dose_i, route_i, z in events:
            concept = concepts[pick]
            when = _format_time(intime + minute, iso)
            if concept.kind == "drug":
                drug_rows.append([stay.stay_id(), when, drug_name(concept),
                                  STRENGTHS[dose_i], ROUTES[route_i]])
            else:
                value = max(0.1, concept.lab_base() * (1.0 + 0.08 * z))
                flag = "abnormal" if z > 1.2 else ""
                lab_rows.append([stay.stay_id(), when, lab_name(concept),
                                 f"{value:.1f}", concept.lab_unit(), flag])
        for cls in stay.dx_classes:
            dx_rows.append([stay.hadm_id(), f"{prefix}-DX-{cls:02d}-{stay.dx_variant[cls]}"])
        if stay.labels["Readm"]:
            re_in = outtime + stay.readm_gap
            stay_rows.append([stay.stay_id() + "R", stay.hadm_id(), f"P{stay.index:05d}",
                              _format_time(re_in, iso),
                              _format_time(re_in + stay.readm_duration, iso),
                              str(stay.age), "Alive", "home"])

    _write_csv(out / layout["stays_file"],
               [layout["stay"], layout["hadm"], layout["subject"], layout["intime"],
                layout["outtime"], layout["age"], layout["status"], layout["location"]],
               stay_rows)
    _write_csv(out / layout["lab_file"],
               [layout["stay"], layout["lab_time"], layout["lab_code"],
                layout["lab_value"], layout["lab_unit"], layout["lab_flag"]],
               lab_rows)
    _write_csv(out / layout["drug_file"],
               [layout["stay"], layout["drug_time"], layout["drug_code"],
                layout["drug_dose"], layout["drug_route"]],
               drug_rows)
    _write_csv(out / layout["dx_file"], [layout["dx_hadm"], layout["dx_code"]], dx_rows)
    _write_csv(out / DX_MAP_FILE, ["code", "class_index"],
               [[f"{prefix}-DX-{cls:02d}-{k}", str(cls)]
                for cls in range(18) for k in range(3)])

    description_maps = []
    if coded:
        _write_csv(out / layout["lab_map_file"], [layout["lab_code"], layout["map_text"]],
                   [[codes[c.concept_id], c.description] for c in concepts if c.kind == "lab"])
        description_maps.append({
            "file_path": layout["lab_map_file"], "code_column": layout["lab_code"],
            "text_column": layout["map_text"],
            "applies_to": [f"{layout['lab_type']}:{layout['lab_code']}"],
        })
    if drug_coded:
        _write_csv(out / layout["drug_map_file"], [layout["drug_code"], layout["map_text"]],
                   [[codes[c.concept_id], c.description] for c in concepts if c.kind == "drug"])
        description_maps.append({
            "file_path": layout["drug_map_file"], "code_column": layout["drug_code"],
            "text_column": layout["map_text"],
            "applies_to": [f"{layout['drug_type']}:{layout['drug_code']}"],
        })

    manifest = {
        "format_version": 1,
        "dataset_name": cfg.name,
        "stays_table": {
            "file_path": layout["stays_file"], "stay_id_column": layout["stay"],
            "patient_id_column": layout["subject"],
            "hospital_admission_id_column": layout["hadm"],
            "intime_column": layout["intime"], "outtime_column": layout["outtime"],
            "age_column": layout["age"], "discharge_status_column": layout["status"],
            "discharge_location_column": layout["location"],
        },
        "event_tables": [
            {"file_path": layout["lab_file"], "event_type_name": layout["lab_type"],
             "stay_id_column": layout["stay"], "time_column": layout["lab_time"],
             "excluded_columns": [], "main_column": layout["lab_code"]},
            {"file_path": layout["drug_file"], "event_type_name": layout["drug_type"],
             "stay_id_column": layout["stay"], "time_column": layout["drug_time"],
             "excluded_columns": [], "main_column": layout["drug_code"]},
        ],
        "description_maps": description_maps,
        "diagnoses_table": {"file_path": layout["dx_file"],
                            "hospital_admission_id_column": layout["dx_hadm"],
                            "code_column": layout["dx_code"]},
    }
    _write_json(out / "manifest.json", manifest)

    oracle, prevalence, _ = _oracle_stats(stays)
    weights_doc = {}
    for task in ("Mort", "LOS3", "LOS7", "Readm", "Fi_ac"):
        weights_doc[task] = {c.concept_id: concept_weight(task, c, cfg.risk_model_seed)
                             for c in concepts}
    ground_truth = {
        "format_version": 1,
        "hospital": cfg.to_dict(),
        "noise_scale": noise_scale,
        "attempts": attempts,
        "concepts": [{"concept_id": c.concept_id, "kind": c.kind,
                      "description": c.description,
                      "code": codes[c.concept_id]
                              if (drug_coded if c.kind == "drug" else coded) else None}
                     for c in concepts],
        "drivers": {t: list(driver_concepts(t, cfg.risk_model_seed))
                    for t in ("Mort", "LOS3", "LOS7", "Readm", "Fi_ac")},
        "weights": weights_doc,
        "stays": {s.stay_id(): {"risks": s.risks, "labels": s.labels,
                                "fi_ac_class": "death" if s.status == "Expired" else s.location,
                                "dx_classes": list(s.dx_classes)}
                  for s in stays},
        "prevalence": prevalence,
        "oracle_auprc": oracle,
    }
    _write_json(out / GROUND_TRUTH_FILE, ground_truth)

    return GenerationResult(
        out_dir=out, manifest_path=out / "manifest.json",
        ground_truth_path=out / GROUND_TRUTH_FILE, attempts=attempts,
        oracle_auprc=oracle, prevalence=prevalence,
        n_stay_rows=len(stay_rows), n_event_rows=len(lab_rows) + len(drug_rows))


def verify_separability(dataset_dir: str | Path, task: str) -> dict:
    """Oracle AUPRC of the true risk score against realized labels; an
    upper bound any model should approach. Binary tasks only."""
    path = Path(dataset_dir) / GROUND_TRUTH_FILE
    if not path.exists():
        raise ConfigError(f"no {GROUND_TRUTH_FILE} under {dataset_dir}")
    doc = json.loads(path.read_text())
    stays = doc["stays"]
    if not stays:
        raise ConfigError("ground truth contains no stays")
    sample = next(iter(stays.values()))
    if task not in sample["labels"]:
        raise ConfigError(f"task {task!r} has no scalar labels in the ground truth")
    ids = sorted(stays)
    scores = np.array([stays[s]["risks"][task] for s in ids])
    labels = np.array([float(stays[s]["labels"][task]) for s in ids])
    value = auprc(scores, labels)
    return {"task": task, "auprc": value, "prevalence": float(labels.mean()),
            "margin": value - float(labels.mean()), "n_stays": len(ids)}


def _respell(name: str) -> str:
    """A different spelling of the same normalized text."""
    if " " in name:
        return name.replace(" ", "  ")
    return name + " "


def respell_columns(src_dir: str | Path, dst_dir: str | Path,
                    dataset_name: str | None = None) -> Path:
    """Copy a generated dataset, rewriting every CSV header cell and every
    manifest column reference to a whitespace variant that normalizes to the
    same text. Data rows are untouched, so ingestion and serialization of
    the two directories must agree byte for byte."""
    src, dst = Path(src_dir), Path(dst_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    dst.mkdir(parents=True, exist_ok=True)

    csv_files = {manifest["stays_table"]["file_path"], DX_MAP_FILE}
    csv_files.update(t["file_path"] for t in manifest["event_tables"])
    csv_files.update(m["file_path"] for m in manifest.get("description_maps", []))
    if manifest.get("diagnoses_table"):
        csv_files.add(manifest["diagnoses_table"]["file_path"])
    for name in sorted(csv_files):
        with open(src / name, newline="") as fh:
            rows = list(csv.reader(fh))
        rows[0] = [_respell(cell) for cell in rows[0]]
        with open(dst / name, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)

    for key in ("stay_id_column", "patient_id_column", "hospital_admission_id_column",
                "intime_column", "outtime_column", "age_column",
                "discharge_status_column", "discharge_location_column"):
        manifest["stays_table"][key] = _respell(manifest["stays_table"][key])
    for table in manifest["event_tables"]:
        table["stay_id_column"] = _respell(table["stay_id_column"])
        table["time_column"] = _respell(table["time_column"])
        table["excluded_columns"] = [_respell(c) for c in table["excluded_columns"]]
        if table.get("main_column"):
            table["main_column"] = _respell(table["main_column"])
    for dm in manifest.get("description_maps", []):
        dm["code_column"] = _respell(dm["code_column"])
        dm["text_column"] = _respell(dm["text_column"])
        dm["applies_to"] = [f"{t.split(':', 1)[0]}:{_respell(t.split(':', 1)[1])}"
                            for t in dm["applies_to"]]
    if manifest.get("diagnoses_table"):
        dt = manifest["diagnoses_table"]
        dt["hospital_admission_id_column"] = _respell(dt["hospital_admission_id_column"])
        dt["code_column"] = _respell(dt["code_column"])
    if dataset_name is not None:
        manifest["dataset_name"] = dataset_name
    _write_json(dst / "manifest.json", manifest)

    gt = src / GROUND_TRUTH_FILE
    if gt.exists():
        (dst / GROUND_TRUTH_FILE).write_bytes(gt.read_bytes())
    return dst / "manifest.json"
