"""Command-line entry point binding the pipeline into batch subcommands.

Conventions shared by every command: configuration files are JSON and any
flag given on the command line overrides the file value; machine-readable
output (JSON) goes to standard output or the --out path; diagnostics go to
standard error. Exit codes: 0 success, 1 user/config error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, EhrseqError
from .experiments import (ExperimentConfig, ModelSize, Representation,
                          build_representation, prepare, run_experiment,
                          run_seed, serialize_samples)
from .importance import feature_importance, main_columns
from .ingest import Cohort, ingest_dataset, load_dx_class_map
from .manifest import load_manifest
from .metrics import task_auprc
from .models import PredictorSpec, build_predictor
from .neural.checkpoint import (MAGIC, assign_parameters, load_checkpoint,
                                save_checkpoint)
from .plotting import plot_report_files
from .serialize import FeatureSelection, ValueVocab
from .split import stratified_split
from .synthgen import HospitalConfig, generate_hospital
from .tokenizer import Tokenizer
from .training import TrainerConfig, labels_array, predict_dataset, train_model


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote {out}", file=sys.stderr)
    else:
        print(text)


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read JSON file {path}: {exc}") from exc


def _load_cohort(manifest_path: str, dx_map_path: str | None):
    manifest = load_manifest(manifest_path)
    dx_map = load_dx_class_map(dx_map_path) if dx_map_path else None
    return manifest, ingest_dataset(manifest, dx_map)


def _part_samples(cohort: Cohort, task: str, split_seed: int, part: str):
    if part == "all":
        return list(cohort.samples)
    split = stratified_split(cohort.samples, task, split_seed)
    return split.part(cohort.samples, part)


# -- generate ----------------------------------------------------------------


def _config_from(from_dict, doc: dict, what: str):
    try:
        return from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}") from exc


def _cmd_generate(args) -> None:
    doc = _load_json(args.config) if args.config else {}
    noise = args.noise_scale if args.noise_scale is not None \
        else doc.pop("noise_scale", 1.0)
    overrides = {
        "name": args.name, "n_stays": args.n_stays,
        "schema_style": args.schema_style, "code_style": args.code_style,
        "vocab_overlap": args.vocab_overlap, "event_rate": args.event_rate,
        "risk_model_seed": args.risk_model_seed
        if args.risk_model_seed is not None else args.seed,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    cfg = _config_from(HospitalConfig.from_dict, doc, "hospital")
    result = generate_hospital(cfg, args.dir, noise_scale=noise)
    _emit({
        "dataset_dir": str(result.out_dir),
        "manifest": str(result.manifest_path),
        "ground_truth": str(result.ground_truth_path),
        "attempts": result.attempts,
        "oracle_auprc": result.oracle_auprc,
        "prevalence": result.prevalence,
        "n_stay_rows": result.n_stay_rows,
        "n_event_rows": result.n_event_rows,
    }, args.out)


# -- ingest ------------------------------------------------------------------


def _cmd_ingest(args) -> None:
    _, (cohort, report) = _load_cohort(args.manifest, args.dx_map)
    doc = report.to_dict()
    doc["dataset_name"] = cohort.dataset_name
    doc["label_spaces"] = {task: list(space)
                           for task, space in cohort.label_spaces.items()}
    _emit(doc, args.out)


# -- representation commands --------------------------------------------------


def _cmd_train_tokenizer(args) -> None:
    _, (cohort, _) = _load_cohort(args.manifest, args.dx_map)
    train = _part_samples(cohort, args.task, args.split_seed, "train")
    rep = build_representation("text_hierarchical", train, args.vocab_size, 1)
    doc = json.loads(rep.tokenizer.to_json())
    doc_out = {"vocab_size": rep.tokenizer.vocab_size,
               "n_merges": len(rep.tokenizer.merges)}
    if args.out:
        Path(args.out).write_text(rep.tokenizer.to_json(), encoding="utf-8")
        print(f"wrote {args.out}", file=sys.stderr)
        _emit(doc_out, None)
    else:
        _emit(doc, None)


def _representation_doc(rep: Representation) -> dict:
    return {
        "tokenizer": json.loads(rep.tokenizer.to_json()) if rep.tokenizer else None,
        "vocab": rep.vocab.to_dict() if rep.vocab else None,
        "selection": ({etype: list(names) for etype, names
                       in sorted(rep.selection.by_event_type.items())}
                      if rep.selection else None),
    }


def _representation_from_doc(doc: dict) -> Representation:
    rep = Representation()
    if doc.get("tokenizer"):
        rep.tokenizer = Tokenizer.from_json(json.dumps(doc["tokenizer"]))
    if doc.get("vocab"):
        rep.vocab = ValueVocab.from_dict(doc["vocab"])
    if doc.get("selection"):
        rep.selection = FeatureSelection(
            {etype: tuple(names) for etype, names in doc["selection"].items()})
    return rep


def _cmd_serialize(args) -> None:
    _, (cohort, _) = _load_cohort(args.manifest, args.dx_map)
    train = _part_samples(cohort, args.task, args.split_seed, "train")
    samples = _part_samples(cohort, args.task, args.split_seed, args.part)
    if args.tokenizer:
        rep = Representation(tokenizer=Tokenizer.load(args.tokenizer))
        if args.family == "text_selected_hierarchical":
            rep.selection = build_representation(
                args.family, train, args.vocab_size, args.selection_k).selection
    else:
        rep = build_representation(args.family, train, args.vocab_size,
                                   args.selection_k)
    size = ModelSize(l_event=args.l_event, n_max=args.n_max, l_flat=args.l_flat)
    items = serialize_samples(samples, args.family, rep, size)
    encoded = []
    for sample, item in zip(samples, items):
        row: dict = {"stay_id": sample.stay_id}
        if hasattr(item, "event_sequences"):
            row["events"] = [list(seq.ids) for seq in item.event_sequences]
            row["intervals"] = list(item.interval_buckets)
        elif hasattr(item, "sequence"):
            row["sequence"] = list(item.sequence.ids)
        else:
            row["events"] = [{"value_ids": list(ev.value_ids),
                              "name_ids": list(ev.name_ids)}
                             for ev in item.events]
            row["intervals"] = list(item.interval_buckets)
        encoded.append(row)
    _emit({"family": args.family, "part": args.part, "items": encoded}, args.out)


# -- train / evaluate ----------------------------------------------------------


def _model_size_from_args(args) -> ModelSize:
    size = ModelSize()
    fields = ("d_model", "heads", "ffn_dim", "dropout", "f_layers", "g_layers",
              "h_layers", "l_event", "n_max", "l_flat")
    overrides = {f: getattr(args, f) for f in fields
                 if getattr(args, f, None) is not None}
    return replace(size, **overrides)


def _trainer_from_args(args) -> TrainerConfig:
    trainer = TrainerConfig()
    fields = ("lr", "batch_size", "max_epochs", "patience", "weight_decay",
              "pos_weight")
    overrides = {f: getattr(args, f) for f in fields
                 if getattr(args, f, None) is not None}
    return replace(trainer, **overrides)


def _cmd_train(args) -> None:
    _, (cohort, _) = _load_cohort(args.manifest, args.dx_map)
    cfg = ExperimentConfig(
        task=args.task, family=args.family, mode="single",
        sources=(cohort.dataset_name,), seeds=(args.seed,),
        split_seed=args.split_seed, tokenizer_vocab=args.vocab_size,
        selection_k=args.selection_k, model=_model_size_from_args(args),
        trainer=_trainer_from_args(args))
    prep = prepare(cfg, {cohort.dataset_name: cohort})
    run = run_seed(cfg, prep, args.seed)
    config_doc = {
        "task": args.task,
        "spec": prep.spec.to_dict(),
        "trainer": cfg.trainer.to_dict(),
        "representation": _representation_doc(prep.rep),
        "dataset": cohort.dataset_name,
        "split_seed": args.split_seed,
        "seed": args.seed,
    }
    save_checkpoint(args.checkpoint, config_doc, run.model.params())
    print(f"wrote {args.checkpoint}", file=sys.stderr)
    _emit({
        "checkpoint": args.checkpoint,
        "train_result": run.train_result.to_dict(),
        "test_auprc": run.test_auprc,
    }, args.out)


def _load_model(checkpoint_path: str):
    config, params = load_checkpoint(checkpoint_path)
    if "spec" not in config:
        raise ConfigError(f"{checkpoint_path}: checkpoint has no model spec")
    spec = PredictorSpec.from_dict(config["spec"])
    model = build_predictor(spec, seed=0)
    assign_parameters(model.params(), params)
    return config, model


def _cmd_evaluate(args) -> None:
    config, model = _load_model(args.checkpoint)
    task = args.task or config["task"]
    if task != config["task"]:
        raise ConfigError(
            f"checkpoint was trained for task {config['task']!r}, not {task!r}")
    if args.family and args.family != model.spec.family:
        raise ConfigError(
            f"checkpoint holds a {model.spec.family} model, not {args.family}")
    _, (cohort, _) = _load_cohort(args.manifest, args.dx_map)
    samples = _part_samples(cohort, task, args.split_seed, args.part)
    if not samples:
        raise ConfigError(f"no samples in part {args.part!r}")
    rep = _representation_from_doc(config.get("representation", {}))
    size = ModelSize(l_event=model.spec.l_event, n_max=model.spec.n_max,
                     l_flat=model.spec.l_flat)
    inputs = serialize_samples(samples, model.spec.family, rep, size)
    labels = labels_array(samples, task)
    probs = predict_dataset(model, inputs)
    _emit({
        "task": task,
        "dataset": cohort.dataset_name,
        "part": args.part,
        "n_samples": len(samples),
        "auprc": task_auprc(model.spec.task_kind, probs, labels),
    }, args.out)


# -- experiments ---------------------------------------------------------------


def _cmd_run_experiment(args) -> None:
    doc = _load_json(args.config)
    if "experiment" not in doc or "datasets" not in doc:
        raise ConfigError(
            "experiment config needs 'experiment' and 'datasets' sections")
    exp_doc = dict(doc["experiment"])
    if args.seed is not None:
        exp_doc["seeds"] = [args.seed]
    if args.seeds:
        exp_doc["seeds"] = [int(s) for s in args.seeds.split(",")]
    cfg = _config_from(ExperimentConfig.from_dict, exp_doc, "experiment")
    cohorts = {}
    config_dir = Path(args.config).parent
    involved = set(cfg.sources) | ({cfg.target} if cfg.target else set())
    missing = involved - set(doc["datasets"])
    if missing:
        raise ConfigError(f"datasets section lacks manifests for {sorted(missing)}")
    for name, manifest_path in doc["datasets"].items():
        if name not in involved:
            continue
        path = Path(manifest_path)
        if not path.is_absolute():
            path = config_dir / path
        dx_path = (doc.get("dx_maps") or {}).get(name)
        if dx_path and not Path(dx_path).is_absolute():
            dx_path = str(config_dir / dx_path)
        _, (cohort, _) = _load_cohort(str(path), dx_path)
        cohorts[name] = cohort
    baseline = None
    if doc.get("baseline_report"):
        baseline = _load_json(str(config_dir / doc["baseline_report"]))
    run = run_experiment(cfg, cohorts, threads=args.threads,
                         baseline_report=baseline)
    _emit(run.report, args.out)


def _cmd_importance(args) -> None:
    config, model = _load_model(args.checkpoint)
    task = args.task or config["task"]
    manifest, (cohort, _) = _load_cohort(args.manifest, args.dx_map)
    samples = _part_samples(cohort, task, args.split_seed, args.part)
    rep = _representation_from_doc(config.get("representation", {}))
    size = ModelSize(l_event=model.spec.l_event, n_max=model.spec.n_max,
                     l_flat=model.spec.l_flat)
    inputs = serialize_samples(samples, model.spec.family, rep, size)
    report = feature_importance(model, samples, inputs, task,
                                main_columns(manifest))
    doc = report.to_dict()
    doc["top"] = [[text, score] for text, score in report.top(args.top_k)]
    _emit(doc, args.out)


# -- plot / inspect -------------------------------------------------------------


def _cmd_plot(args) -> None:
    if not args.report:
        raise ConfigError("at least one --report is required")
    if not args.svg:
        raise ConfigError("--svg output path is required")
    svg = plot_report_files(args.report, args.svg, title=args.title or "")
    _emit({"svg": args.svg, "n_reports": len(args.report),
           "bytes": len(svg.encode("utf-8"))}, args.out)


def _inspect_doc(path: Path) -> dict:
    blob = path.read_bytes()
    if blob[:8] == MAGIC:
        config, params = load_checkpoint(path)
        return {"kind": "checkpoint",
                "config_keys": sorted(config),
                "task": config.get("task"),
                "family": (config.get("spec") or {}).get("family"),
                "n_parameters": int(sum(a.size for a in params.values())),
                "parameter_names": sorted(params)}
    try:
        doc = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: neither a checkpoint nor JSON") from exc
    if "merges" in doc and "vocab" in doc:
        tok = Tokenizer.from_json(blob.decode("utf-8"))
        return {"kind": "tokenizer", "vocab_size": tok.vocab_size,
                "n_merges": len(tok.merges)}
    if "results" in doc:
        return {"kind": "report",
                "mode": (doc.get("config") or {}).get("mode"),
                "family": (doc.get("config") or {}).get("family"),
                "results": {name: entry.get("mean")
                            for name, entry in doc["results"].items()}}
    if "stays_table" in doc:
        manifest = load_manifest(path)
        return {"kind": "manifest", "dataset_name": manifest.dataset_name,
                "event_tables": [t.event_type_name for t in manifest.event_tables],
                "n_description_maps": len(manifest.description_maps)}
    if "stays" in doc and "concepts" in doc:
        return {"kind": "ground_truth", "hospital": doc.get("hospital"),
                "n_stays": len(doc["stays"]), "n_concepts": len(doc["concepts"])}
    raise ConfigError(f"{path}: unrecognized artifact")


def _cmd_inspect(args) -> None:
    path = Path(args.path)
    if not path.is_file():
        raise ConfigError(f"no such file: {path}")
    _emit(_inspect_doc(path), args.out)


# -- parser ---------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=None,
                     help="primary random seed of this command")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker threads where the command supports them")
    sub.add_argument("--out", default=None,
                     help="write the JSON result here instead of stdout")


def _add_cohort_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--manifest", required=True, help="dataset manifest JSON")
    sub.add_argument("--dx-map", default=None,
                     help="diagnosis code to class index CSV")
    sub.add_argument("--task", default="Mort")
    sub.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ehrseq",
                     description="Schema-agnostic event-sequence prediction "
                                 "pipeline for tabular hospital exports.")
    subs = parser.add_subparsers(dest="command", required=True,
                                 parser_class=_Parser)

    gen = subs.add_parser("generate", help="write a synthetic hospital export")
    gen.add_argument("--config", default=None, help="hospital config JSON")
    gen.add_argument("--dir", required=True, help="output dataset directory")
    gen.add_argument("--name")
    gen.add_argument("--n-stays", type=int, dest="n_stays")
    gen.add_argument("--schema-style", dest="schema_style")
    gen.add_argument("--code-style", dest="code_style")
    gen.add_argument("--vocab-overlap", type=float, dest="vocab_overlap")
    gen.add_argument("--event-rate", type=float, dest="event_rate")
    gen.add_argument("--risk-model-seed", type=int, dest="risk_model_seed")
    gen.add_argument("--noise-scale", type=float, dest="noise_scale")
    _add_common(gen)
    gen.set_defaults(func=_cmd_generate)

    ing = subs.add_parser("ingest", help="run cohort extraction and report")
    ing.add_argument("--manifest", required=True)
    ing.add_argument("--dx-map", default=None)
    _add_common(ing)
    ing.set_defaults(func=_cmd_ingest)

    tok = subs.add_parser("train-tokenizer",
                          help="fit the sub-word vocabulary on a train split")
    _add_cohort_flags(tok)
    tok.add_argument("--vocab-size", type=int, default=1024)
    _add_common(tok)
    tok.set_defaults(func=_cmd_train_tokenizer)

    ser = subs.add_parser("serialize", help="emit model inputs for inspection")
    _add_cohort_flags(ser)
    ser.add_argument("--family", required=True)
    ser.add_argument("--part", default="test",
                     choices=("train", "valid", "test", "all"))
    ser.add_argument("--tokenizer", default=None,
                     help="tokenizer JSON (text families; default retrains)")
    ser.add_argument("--vocab-size", type=int, default=1024)
    ser.add_argument("--selection-k", type=int, default=3, dest="selection_k")
    ser.add_argument("--l-event", type=int, default=128, dest="l_event")
    ser.add_argument("--n-max", type=int, default=256, dest="n_max")
    ser.add_argument("--l-flat", type=int, default=4096, dest="l_flat")
    _add_common(ser)
    ser.set_defaults(func=_cmd_serialize)

    tr = subs.add_parser("train", help="train one predictor on one dataset")
    _add_cohort_flags(tr)
    tr.add_argument("--family", required=True)
    tr.add_argument("--checkpoint", required=True,
                    help="output checkpoint path")
    tr.add_argument("--vocab-size", type=int, default=1024)
    tr.add_argument("--selection-k", type=int, default=3, dest="selection_k")
    for flag, kind in (("--d-model", int), ("--heads", int), ("--ffn-dim", int),
                       ("--dropout", float), ("--f-layers", int),
                       ("--g-layers", int), ("--h-layers", int),
                       ("--l-event", int), ("--n-max", int), ("--l-flat", int)):
        tr.add_argument(flag, type=kind, default=None,
                        dest=flag[2:].replace("-", "_"))
    for flag, kind in (("--lr", float), ("--batch-size", int),
                       ("--max-epochs", int), ("--patience", int),
                       ("--weight-decay", float), ("--pos-weight", float)):
        tr.add_argument(flag, type=kind, default=None,
                        dest=flag[2:].replace("-", "_"))
    _add_common(tr)
    tr.set_defaults(func=_cmd_train)

    ev = subs.add_parser("evaluate", help="score a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--dx-map", default=None)
    ev.add_argument("--task", default=None,
                    help="must match the checkpoint's task (default: use it)")
    ev.add_argument("--family", default=None,
                    help="must match the checkpoint's family when given")
    ev.add_argument("--split-seed", type=int, default=0)
    ev.add_argument("--part", default="test",
                    choices=("train", "valid", "test", "all"))
    _add_common(ev)
    ev.set_defaults(func=_cmd_evaluate)

    exp = subs.add_parser("run-experiment",
                          help="run a multi-seed experiment from a config file")
    exp.add_argument("--config", required=True,
                     help="JSON with 'experiment' and 'datasets' sections")
    exp.add_argument("--seeds", default=None,
                     help="comma-separated seed list overriding the file")
    _add_common(exp)
    exp.set_defaults(func=_cmd_run_experiment)

    imp = subs.add_parser("importance",
                          help="rank main-feature texts by gradient attribution")
    imp.add_argument("--checkpoint", required=True)
    imp.add_argument("--manifest", required=True)
    imp.add_argument("--dx-map", default=None)
    imp.add_argument("--task", default=None)
    imp.add_argument("--split-seed", type=int, default=0)
    imp.add_argument("--part", default="train",
                     choices=("train", "valid", "test", "all"))
    imp.add_argument("--top-k", type=int, default=10, dest="top_k")
    _add_common(imp)
    imp.set_defaults(func=_cmd_importance)

    plo = subs.add_parser("plot", help="render report JSONs as an SVG chart")
    plo.add_argument("--report", action="append", default=[],
                     help="report JSON path (repeatable)")
    plo.add_argument("--svg", required=True, help="output SVG path")
    plo.add_argument("--title", default=None)
    _add_common(plo)
    plo.set_defaults(func=_cmd_plot)

    ins = subs.add_parser("inspect", help="summarize any pipeline artifact")
    ins.add_argument("path", help="checkpoint, tokenizer, manifest or report")
    _add_common(ins)
    ins.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except SystemExit as exc:  # argparse --help
        code = exc.code
        return int(code) if isinstance(code, int) else 0
    except EhrseqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
