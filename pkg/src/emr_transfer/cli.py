"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/config/checkpoint error,
3 training divergence.  Every run writes ``run_manifest.json`` into its
output directory with the config hash, seed and the artifacts it produced.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

from .adversarial import TransitionModel
from .data import Dataset, impute_and_normalize, load_csv, save_csv
from .dtw import TransferMap, build_transfer_map
from .errors import CheckpointError, ConfigError, DataError, DivergenceError, TransferError
from .evaluation import format_report, report_json, run_cv
from .losses import LossWeights
from .models import SourceModel, TargetModel, load_model, save_model
from .pipeline import (RunConfig, evaluate_target, init_target_from_transition, train_target, train_teacher,
                       train_transition)
from .synthetic import GeneratorConfig, synth_generate

log = logging.getLogger("emr_transfer")

SUBCOMMANDS = ("simulate", "train-teacher", "train-transition", "dtw-match", "transfer", "train-target",
               "run-cv", "evaluate")
MANIFEST = "run_manifest.json"
CURVE_HEADER = ("epoch", "train_loss", "val_mse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    p = _Parser(prog="emr-transfer", description="Cross-dataset transfer learning for EMR time series.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="run configuration JSON")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
        return sp

    add("simulate", "write a synthetic source/target dataset pair as CSV")
    add("train-teacher", "stage 1: train the teacher on the source task")
    sp = add("train-transition", "stage 2: adversarial + distillation training of the transition model")
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    add("dtw-match", "map every target feature to a source channel")
    sp = add("transfer", "build the target model init from a transition checkpoint")
    sp.add_argument("--transition", help="transition checkpoint (not needed with --ablation scratch)")
    sp.add_argument("--map", help="transfer map CSV from dtw-match")
    sp.add_argument("--ablation", choices=["scratch"], help="skip the transfer: random target init")
    sp = add("train-target", "stage 3: fine-tune a target model")
    sp.add_argument("--model", required=True, help="target model checkpoint to start from")
    sp = add("run-cv", "full pipeline under patient-grouped k-fold cross-validation")
    sp.add_argument("--ablation", choices=["scratch"], help="also train the from-scratch comparator")
    sp = add("evaluate", "test-set metrics of a trained target model")
    sp.add_argument("--model", required=True, help="target model checkpoint")
    return p


# configuration ---------------------------------------------------------------

def _section(doc, name):
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return sec


def run_config(doc: dict, seed: int) -> RunConfig:
    """RunConfig from the JSON sections ``model``, ``train``, ``loss`` and ``data``."""
    model, train, loss, data = (_section(doc, n) for n in ("model", "train", "loss", "data"))
    dtw = _section(doc, "dtw")
    overrides = {k: train[k] for k in ("teacher", "transition", "target") if k in train}
    try:
        return RunConfig(
            seed=int(seed),
            lr=float(train.get("lr", 1e-3)),
            batch=int(train.get("batch", 32)),
            epochs=int(train.get("epochs", 200)),
            patience=int(train.get("patience", 10)),
            val_fraction=float(train.get("val_fraction", 0.2)),
            weights=LossWeights(float(loss.get("alpha", 1.0)), float(loss.get("beta", 1.0)),
                                float(loss.get("gamma", 1.0))),
            hidden=int(model.get("hidden", 16)),
            rep=int(model.get("rep", 32)),
            source_task=data.get("source_task", "regression"),
            dtw_max_patients=dtw.get("max_patients", 500),
            dtw_max_len=dtw.get("max_len"),
            overrides=overrides,
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from None


class Run:
    """One CLI invocation: config, output directory and artifact bookkeeping."""

    def __init__(self, args):
        self.args = args
        self.config_path = Path(args.config)
        try:
            self.config_bytes = self.config_path.read_bytes()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {self.config_path}") from None
        try:
            self.doc = json.loads(self.config_bytes)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{self.config_path}: invalid JSON: {e}") from None
        if not isinstance(self.doc, dict):
            raise ConfigError(f"{self.config_path}: top level must be an object")
        self.seed = args.seed if args.seed is not None else int(self.doc.get("seed", 0))
        self.out = Path(args.out)
        self.artifacts = {}

    def prepare_out(self):
        if self.out.exists() and not self.out.is_dir():
            raise UsageError(f"output path {self.out} exists and is not a directory")
        if self.out.exists() and any(self.out.iterdir()) and not self.args.force:
            raise UsageError(f"output directory {self.out} is not empty (use --force to overwrite)")
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts[name] = p
        return p

    def data_path(self, ref):
        p = Path(ref)
        return p if p.is_absolute() else self.config_path.parent / p

    def dataset(self, key, required=True) -> Dataset | None:
        data = _section(self.doc, "data")
        entry = data.get(key)
        if entry is None:
            if required:
                raise ConfigError(f"config data section has no {key!r} entry")
            return None
        if not isinstance(entry, dict) or not {"observations", "outcomes", "schema"} <= set(entry):
            raise ConfigError(f"data.{key} needs 'observations', 'outcomes' and 'schema'")
        return load_csv(self.data_path(entry["observations"]), self.data_path(entry["outcomes"]),
                        self.data_path(entry["schema"]))

    def run_config(self):
        return run_config(self.doc, self.seed)

    def write_manifest(self):
        manifest = {
            "command": self.args.command,
            "argv": self.argv,
            "config_path": str(self.config_path),
            "config_sha256": hashlib.sha256(self.config_bytes).hexdigest(),
            "seed": self.seed,
            "artifacts": {name: _sha256(p) for name, p in sorted(self.artifacts.items())},
        }
        (self.out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_rows(path, rows, header):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(r[h]) for h in header])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_curve(path, rows):
    write_rows(path, rows, CURVE_HEADER)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# subcommands -----------------------------------------------------------------

def _normalized(ds):
    return impute_and_normalize(ds, ds)


def cmd_simulate(run: Run):
    gen = GeneratorConfig.from_dict(_section(_section(run.doc, "data"), "generator"))
    source, target = synth_generate(gen, run.seed)
    for name, ds in (("source", source), ("target", target)):
        save_csv(ds, run.path(f"{name}_observations.csv"), run.path(f"{name}_outcomes.csv"),
                 run.path(f"{name}_schema.json"))


def cmd_train_teacher(run: Run):
    source = _normalized(run.dataset("source"))
    res = train_teacher(source, run.run_config())
    save_model(res.model, run.path("teacher.json"))
    write_rows(run.path("teacher_log.csv"), res.log, ("epoch", "train_loss", "val_loss"))


def _load(path, kind):
    model = load_model(path)
    if not isinstance(model, kind):
        raise CheckpointError(f"{path}: expected a {kind.__name__} checkpoint, got {model.kind!r}")
    return model


def cmd_train_transition(run: Run):
    teacher = _load(run.args.teacher, SourceModel)
    source = _normalized(run.dataset("source"))
    target = _normalized(run.dataset("target"))
    res = train_transition(teacher, source, target, run.run_config())
    save_model(res.model, run.path("transition.json"))
    write_rows(run.path("transition_log.csv"), res.log,
               ("epoch", "train_loss", "val_loss", "l_pred", "l_rep", "l_d", "domain_acc"))


def cmd_dtw_match(run: Run):
    cfg = run.run_config()
    source = _normalized(run.dataset("source"))
    target = _normalized(run.dataset("target"))
    tmap = build_transfer_map(source, target, cfg.dtw_max_patients, cfg.dtw_max_len, cfg.seed)
    tmap.save(run.path("transfer_map.csv"))


def cmd_transfer(run: Run):
    cfg = run.run_config()
    features = run.dataset("target").features
    if run.args.ablation == "scratch":
        model = init_target_from_transition(None, features, None, cfg, scratch=True)
    else:
        if not run.args.transition or not run.args.map:
            raise UsageError("transfer needs --transition and --map (or --ablation scratch)")
        transition = _load(run.args.transition, TransitionModel)
        model = init_target_from_transition(transition, features, TransferMap.load(run.args.map), cfg)
    save_model(model, run.path("target_init.json"))


def _target_splits(run: Run):
    train_raw = run.dataset("target")
    test_raw = run.dataset("target_test", required=False)
    train = _normalized(train_raw)
    test = impute_and_normalize(test_raw, train_raw) if test_raw is not None else None
    return train, test


def cmd_train_target(run: Run):
    model = _load(run.args.model, TargetModel)
    train, test = _target_splits(run)
    res = train_target(model, train, run.run_config())
    save_model(model, run.path("target.json"))
    write_curve(run.path("curve.csv"), res.log)
    if test is not None:
        _write_json(run.path("metrics.json"), evaluate_target(model, test))


def cmd_evaluate(run: Run):
    model = _load(run.args.model, TargetModel)
    train, test = _target_splits(run)
    if test is None:
        raise ConfigError("evaluate needs a data.target_test entry")
    metrics = evaluate_target(model, test)
    _write_json(run.path("metrics.json"), metrics)
    text = "".join(f"{m}: n/a\n" if v is None else f"{m}: {v:.3f}\n" for m, v in sorted(metrics.items()))
    run.path("metrics.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_run_cv(run: Run):
    cfg = run.run_config()
    cv = _section(run.doc, "cv")
    seeds = [run.seed] if run.args.seed is not None else [int(s) for s in cv.get("seeds", [run.seed])]
    result = run_cv(run.dataset("source"), run.dataset("target"), cfg, k=int(cv.get("k", 5)), seeds=seeds,
                    scratch=run.args.ablation == "scratch")
    run.path("report.json").write_text(report_json(result.report), encoding="utf-8")
    text = format_report(result.report)
    run.path("report.txt").write_text(text, encoding="utf-8")
    for tag, rows in sorted(result.curves.items()):
        write_curve(run.path(f"curves/{tag}.csv"), rows)
    for tag, exp in sorted(result.models.items()):
        if exp.target is not None:
            save_model(exp.target, run.path(f"checkpoints/{tag}_target.json"))
        if exp.scratch is not None:
            save_model(exp.scratch, run.path(f"checkpoints/{tag}_scratch.json"))
    sys.stdout.write(text)


COMMANDS = {
    "simulate": cmd_simulate,
    "train-teacher": cmd_train_teacher,
    "train-transition": cmd_train_transition,
    "dtw-match": cmd_dtw_match,
    "transfer": cmd_transfer,
    "train-target": cmd_train_target,
    "run-cv": cmd_run_cv,
    "evaluate": cmd_evaluate,
}


def run_command(argv) -> int:
    argv = list(argv)
    try:
        args = build_parser().parse_args(argv)
        run = Run(args)
        run.argv = argv
        run.prepare_out()
        COMMANDS[args.command](run)
        run.write_manifest()
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    except (DataError, ConfigError, CheckpointError, TransferError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    return 0


def verify_manifest(out_dir) -> dict:
    """Load a run manifest and check that its config file still has the recorded hash."""
    path = Path(out_dir) / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no manifest at {path}") from None
    cfg = Path(manifest["config_path"])
    try:
        digest = _sha256(cfg)
    except FileNotFoundError:
        raise ConfigError(f"config {cfg} named by the manifest is missing") from None
    if digest != manifest["config_sha256"]:
        raise ConfigError(f"config {cfg} changed since the run (hash mismatch)")
    return manifest


def replay(out_dir) -> int:
    """Re-execute a recorded run into the same directory after verifying its config hash."""
    manifest = verify_manifest(out_dir)
    argv = list(manifest["argv"])
    if "--force" not in argv:
        argv.append("--force")
    return run_command(argv)


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
