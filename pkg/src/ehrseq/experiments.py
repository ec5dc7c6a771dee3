"""Experiment designs: single-domain, pooled, and transfer learning.

Every involved dataset is split independently with the same split seed, so a
dataset's test set is identical across modes and deltas between modes are
computed on matched test sets. Tokenizers and lookup vocabularies are built
from training splits only; transfer modes build them from the source alone
and reuse them unchanged on the target.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .events import SINGLE_DOMAIN_ONLY_TASKS, TaskKind, TASKS
from .ingest import Cohort
from .metrics import standard_error, task_auprc
from .models import PredictorSpec, TEXT_FAMILIES, build_predictor
from .serialize import (ConventionalMode, FeatureSelection, ValueVocab,
                        apply_feature_selection, build_value_vocab,
                        derive_feature_selection, serialize_conventional,
                        serialize_patient_flattened,
                        serialize_patient_hierarchical)
from .split import SplitAssignment, stratified_split
from .tokenizer import Tokenizer, train_bpe
from .training import TrainerConfig, TrainResult, labels_array, predict_dataset, train_model

MODES = ("single", "pooled", "transfer_zero_shot", "transfer_finetune")
REPORT_FORMAT_VERSION = 1
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

_SELECTED_FAMILIES = ("text_selected_hierarchical", "lookup_selected_flat")


@dataclass(frozen=True)
class ModelSize:
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

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "d_model", "heads", "ffn_dim", "dropout", "f_layers", "g_layers",
            "h_layers", "l_event", "n_max", "l_flat")}

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSize":
        return cls(**doc)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    family: str
    mode: str
    sources: tuple[str, ...]
    target: str | None = None
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    split_seed: int = 0
    tokenizer_vocab: int = 1024
    selection_k: int = 3
    model: ModelSize = field(default_factory=ModelSize)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.sources:
            raise ConfigError("at least one source dataset required")
        if self.mode != "single" and self.task in SINGLE_DOMAIN_ONLY_TASKS:
            raise ConfigError(
                f"{self.task} is single-domain only (label definitions do not pool)")
        if self.mode == "single" and len(self.sources) != 1:
            raise ConfigError("single mode takes exactly one source")
        if self.mode == "pooled" and len(self.sources) < 2:
            raise ConfigError("pooled mode needs at least two sources")
        if self.mode.startswith("transfer"):
            if len(self.sources) != 1:
                raise ConfigError("transfer modes take exactly one source")
            if not self.target:
                raise ConfigError("transfer modes require a target dataset")
            if self.target == self.sources[0]:
                raise ConfigError("transfer target must differ from the source")
        if not self.seeds:
            raise ConfigError("at least one seed required")

    def to_dict(self) -> dict:
        return {"task": self.task, "family": self.family, "mode": self.mode,
                "sources": list(self.sources), "target": self.target,
                "seeds": list(self.seeds), "split_seed": self.split_seed,
                "tokenizer_vocab": self.tokenizer_vocab,
                "selection_k": self.selection_k, "model": self.model.to_dict(),
                "trainer": self.trainer.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        doc["sources"] = tuple(doc.get("sources", ()))
        doc["seeds"] = tuple(doc.get("seeds", DEFAULT_SEEDS))
        if "model" in doc:
            doc["model"] = ModelSize.from_dict(doc["model"])
        if "trainer" in doc:
            doc["trainer"] = TrainerConfig.from_dict(doc["trainer"])
        return cls(**doc)


@dataclass
class Representation:
    """Everything learned from the training corpus that shapes model inputs."""

    tokenizer: Tokenizer | None = None
    vocab: ValueVocab | None = None
    selection: FeatureSelection | None = None


def tokenizer_corpus(samples) -> list[str]:
    """The strings the text serializer will sub-word encode: event types,
    feature names, and non-numeric value texts (numbers use digit tokens)."""
    corpus = []
    for s in samples:
        for ev in s.events:
            corpus.append(ev.event_type.text)
            for f in ev.features:
                corpus.append(f.name.text)
                if f.value.kind.name != "NUMERIC":
                    corpus.append(f.value.display)
    return corpus


def build_representation(family: str, train_samples, tokenizer_vocab: int,
                         selection_k: int) -> Representation:
    rep = Representation()
    if family in TEXT_FAMILIES:
        rep.tokenizer = train_bpe(tokenizer_corpus(train_samples), tokenizer_vocab)
    else:
        rep.vocab = build_value_vocab(train_samples)
    if family in _SELECTED_FAMILIES:
        rep.selection = derive_feature_selection(train_samples, selection_k)
    return rep


def serialize_samples(samples, family: str, rep: Representation, size: ModelSize) -> list:
    if family == "text_hierarchical":
        return [serialize_patient_hierarchical(s, rep.tokenizer, size.l_event, size.n_max)
                for s in samples]
    if family == "text_selected_hierarchical":
        return [serialize_patient_hierarchical(
            apply_feature_selection(s, rep.selection), rep.tokenizer,
            size.l_event, size.n_max) for s in samples]
    if family == "text_flat":
        return [serialize_patient_flattened(s, rep.tokenizer, size.l_flat)
                for s in samples]
    if family == "lookup_hierarchical":
        return [serialize_conventional(s, rep.vocab, ConventionalMode.FULL_HIERARCHICAL,
                                       n_max=size.n_max) for s in samples]
    if family == "lookup_selected_flat":
        return [serialize_conventional(s, rep.vocab, ConventionalMode.SELECTED_FLAT,
                                       rep.selection, n_max=size.n_max) for s in samples]
    raise ConfigError(f"unknown model family {family!r}")


def predictor_spec(cfg: ExperimentConfig, rep: Representation, n_outputs: int) -> PredictorSpec:
    size = cfg.model
    kind = TASKS[cfg.task].kind.value
    common = dict(family=cfg.family, task_kind=kind, n_outputs=n_outputs,
                  d_model=size.d_model, heads=size.heads, ffn_dim=size.ffn_dim,
                  dropout=size.dropout, f_layers=size.f_layers,
                  g_layers=size.g_layers, h_layers=size.h_layers,
                  l_event=size.l_event, n_max=size.n_max, l_flat=size.l_flat)
    if cfg.family in TEXT_FAMILIES:
        return PredictorSpec(vocab_size=rep.tokenizer.vocab_size, **common)
    if cfg.family == "lookup_hierarchical":
        return PredictorSpec(n_values=rep.vocab.n_values, n_names=rep.vocab.n_names,
                             **common)
    return PredictorSpec(n_values=rep.vocab.n_values, **common)


def _n_outputs(cfg: ExperimentConfig, cohorts: dict[str, Cohort]) -> int:
    spec = TASKS[cfg.task]
    if spec.kind is TaskKind.BINARY:
        return 1
    if spec.kind is TaskKind.MULTILABEL:
        return spec.n_classes
    return cohorts[cfg.sources[0]].n_classes(cfg.task)


@dataclass
class Prepared:
    """Serialized splits plus the spec models are built from."""

    spec: PredictorSpec
    rep: Representation
    splits: dict[str, SplitAssignment]
    train: tuple[list, np.ndarray]
    valid: tuple[list, np.ndarray]
    tests: dict[str, tuple[list, np.ndarray]]
    pretrain: tuple[list, np.ndarray] | None = None        # fine-tune source phase
    prevalid: tuple[list, np.ndarray] | None = None

    def n_train(self) -> int:
        return len(self.train[0])


def _dataset_parts(cohort: Cohort, split: SplitAssignment):
    return {part: split.part(cohort.samples, part) for part in ("train", "valid", "test")}


def prepare(cfg: ExperimentConfig, cohorts: dict[str, Cohort]) -> Prepared:
    involved = list(cfg.sources) + ([cfg.target] if cfg.target else [])
    missing = [name for name in involved if name not in cohorts]
    if missing:
        raise ConfigError(f"datasets not provided: {missing}")
    splits = {name: stratified_split(cohorts[name].samples, cfg.task, cfg.split_seed)
              for name in involved}
    parts = {name: _dataset_parts(cohorts[name], splits[name]) for name in involved}

    rep_corpus = [s for name in cfg.sources for s in parts[name]["train"]]
    rep = build_representation(cfg.family, rep_corpus, cfg.tokenizer_vocab,
                               cfg.selection_k)
    spec = predictor_spec(cfg, rep, _n_outputs(cfg, cohorts))

    def pack(samples):
        return (serialize_samples(samples, cfg.family, rep, cfg.model),
                labels_array(samples, cfg.task))

    if cfg.mode == "single":
        src = cfg.sources[0]
        return Prepared(spec, rep, splits, pack(parts[src]["train"]),
                        pack(parts[src]["valid"]), {src: pack(parts[src]["test"])})
    if cfg.mode == "pooled":
        train = [s for name in cfg.sources for s in parts[name]["train"]]
        valid = [s for name in cfg.sources for s in parts[name]["valid"]]
        tests = {name: pack(parts[name]["test"]) for name in cfg.sources}
        return Prepared(spec, rep, splits, pack(train), pack(valid), tests)
    if cfg.mode == "transfer_zero_shot":
        src = cfg.sources[0]
        return Prepared(spec, rep, splits, pack(parts[src]["train"]),
                        pack(parts[src]["valid"]),
                        {cfg.target: pack(parts[cfg.target]["test"])})
    src = cfg.sources[0]
    return Prepared(spec, rep, splits, pack(parts[cfg.target]["train"]),
                    pack(parts[cfg.target]["valid"]),
                    {cfg.target: pack(parts[cfg.target]["test"])},
                    pretrain=pack(parts[src]["train"]),
                    prevalid=pack(parts[src]["valid"]))


@dataclass
class SeedRun:
    seed: int
    model: object
    test_auprc: dict[str, float]
    train_result: TrainResult
    source_result: TrainResult | None = None


def run_seed(cfg: ExperimentConfig, prep: Prepared, seed: int) -> SeedRun:
    kind = prep.spec.task_kind
    model = build_predictor(prep.spec, seed)
    source_result = None
    if cfg.mode == "transfer_finetune":
        source_result = train_model(model, prep.pretrain[0], prep.pretrain[1],
                                    prep.prevalid[0], prep.prevalid[1],
                                    cfg.trainer, seed)
        result = train_model(model, prep.train[0], prep.train[1],
                             prep.valid[0], prep.valid[1], cfg.trainer, seed + 1)
    else:
        result = train_model(model, prep.train[0], prep.train[1],
                             prep.valid[0], prep.valid[1], cfg.trainer, seed)
    tests = {}
    for name, (inputs, labels) in prep.tests.items():
        probs = predict_dataset(model, inputs, cfg.trainer.eval_batch_size)
        tests[name] = task_auprc(kind, probs, labels)
    return SeedRun(seed, model, tests, result, source_result)


@dataclass
class ExperimentRun:
    config: ExperimentConfig
    report: dict
    seed_runs: list[SeedRun]

    def models(self) -> dict[int, object]:
        return {run.seed: run.model for run in self.seed_runs}


def _aggregate(seed_runs: list[SeedRun], dataset: str) -> dict:
    values = [run.test_auprc[dataset] for run in seed_runs]
    return {"per_seed": values, "mean": float(np.mean(values)),
            "se": standard_error(values)}


def run_experiment(cfg: ExperimentConfig, cohorts: dict[str, Cohort],
                   threads: int = 1,
                   baseline_report: dict | None = None) -> ExperimentRun:
    """Run all seeds and aggregate. Fine-tune reports include the delta
    against the target's single-domain runs (computed here unless a baseline
    report for the same task/target/seeds is supplied)."""
    t0 = time.monotonic()
    prep = prepare(cfg, cohorts)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            seed_runs = list(pool.map(lambda s: run_seed(cfg, prep, s), cfg.seeds))
    else:
        seed_runs = [run_seed(cfg, prep, s) for s in cfg.seeds]
    report = {
        "format_version": REPORT_FORMAT_VERSION,
        "config": cfg.to_dict(),
        "results": {name: _aggregate(seed_runs, name) for name in prep.tests},
        "train_results": {str(r.seed): r.train_result.to_dict() for r in seed_runs},
        "split_warnings": {name: list(split.warnings)
                           for name, split in prep.splits.items() if split.warnings},
    }
    if cfg.mode == "transfer_finetune":
        if baseline_report is None:
            single_cfg = replace(cfg, mode="single", sources=(cfg.target,),
                                 target=None)
            baseline_report = run_experiment(single_cfg, cohorts, threads).report
        base = baseline_report["results"][cfg.target]
        if baseline_report["config"]["seeds"] != list(cfg.seeds):
            raise ConfigError("baseline report seeds do not match")
        fine = report["results"][cfg.target]
        deltas = [f - b for f, b in zip(fine["per_seed"], base["per_seed"])]
        report["baseline_single"] = base
        report["delta_vs_single"] = {"per_seed": deltas,
                                     "mean": float(np.mean(deltas)),
                                     "se": standard_error(deltas)}
    report["wallclock_sec"] = time.monotonic() - t0
    return ExperimentRun(cfg, report, seed_runs)
