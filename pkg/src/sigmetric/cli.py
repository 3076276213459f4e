"""``sigmetric`` command-line interface.

Every command reads an optional JSON config (sections: cohort, split, train,
miner, objective, encoder, head, finetune, evaluate, sweep), applies flat
``--key value`` overrides and writes the fully resolved config to
``<out>/run.json``. A ``run.json`` can be passed back as ``--config``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError, SigmetricError
from .objectives import ALPHA_GRID

log = logging.getLogger("sigmetric")

SECTIONS = ("cohort", "split", "train", "miner", "objective", "encoder", "head",
            "finetune", "evaluate", "sweep")
ALIASES = {"alpha": "objective.alpha_scale"}
TRAIN_SCALARS = ("batch_size", "epochs", "lr", "seed", "distance_cache", "reshuffle_every",
                 "max_resample", "freeze_encoder", "triples_dump_dir", "record_wall_time",
                 "distance_downsample")
EXTRA_DEFAULTS = {
    "finetune": {"label_fraction": 1.0, "label_seed": 0},
    "evaluate": {"subgroups": False, "n_replicates": 1000, "seed": 0, "ks": [2, 3, 5], "split": "test"},
    "sweep": {"grid": list(ALPHA_GRID), "tasks": ["classification", "regression"],
              "regression_miner": "continuous_label"},
}
COMMAND_DEFAULTS = {
    "pretrain": {"miner": {"kind": "distance_ranked"}, "objective": {"task_loss": "none"}},
}
SPLIT_DIRS = ("labeled", "train", "valid", "test", "unlabeled")


# ---------------------------------------------------------------------------
# config resolution

def _section_defaults():
    from .encoder import EncoderConfig, HeadConfig
    from .objectives import ObjectiveSpec
    from .signals import SplitSpec, SyntheticCohortConfig
    from .training import TrainConfig

    train = TrainConfig()
    return {
        "cohort": dataclasses.asdict(SyntheticCohortConfig()),
        "split": dataclasses.asdict(SplitSpec()),
        "train": {k: getattr(train, k) for k in TRAIN_SCALARS},
        "miner": {"kind": "random", "measure": None, "seed": 0, "semihard_margin": None},
        "objective": dataclasses.asdict(ObjectiveSpec()),
        "encoder": dataclasses.asdict(EncoderConfig()),
        "head": dataclasses.asdict(HeadConfig()),
        **{k: dict(v) for k, v in EXTRA_DEFAULTS.items()},
    }


def _merge_sections(base, layer, where):
    for section, values in layer.items():
        if section not in SECTIONS:
            raise ConfigError(f"{where}: unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"{where}: section {section!r} must be an object")
        for key, value in values.items():
            if key not in base[section]:
                raise ConfigError(f"{where}: unknown key {section}.{key}")
            base[section][key] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _resolve_key(key, sections):
    key = ALIASES.get(key, key).replace("-", "_")
    if "." in key:
        section, name = key.split(".", 1)
        if section not in sections or name not in sections[section]:
            raise ConfigError(f"unknown override --{key}")
        return section, name
    owners = [s for s in SECTIONS if key in sections[s]]
    if not owners:
        raise ConfigError(f"unknown override --{key}")
    if len(owners) > 1:
        raise ConfigError(f"--{key} is ambiguous between {owners}; use --<section>.{key}")
    return owners[0], key


def parse_overrides(tokens):
    """``--key value`` pairs (``--key=value`` also accepted) into a list of (key, raw value)."""
    out, i = [], 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            k, v = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok} needs a value")
            k, v = tok[2:], tokens[i + 1]
            i += 2
        out.append((k, v))
    return out


def load_config_file(path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    # a run.json from a previous run carries its sections under "config"
    return data["config"] if "config" in data and "command" in data else data


def resolve_config(command, config_path=None, overrides=()):
    sections = _section_defaults()
    _merge_sections(sections, COMMAND_DEFAULTS.get(command, {}), "defaults")
    if config_path is not None:
        _merge_sections(sections, load_config_file(config_path), str(config_path))
    for key, raw in overrides:
        section, name = _resolve_key(key, sections)
        sections[section][name] = _parse_value(raw)
    if sections["head"]["task"] == "regression" and sections["objective"]["task_loss"] == "cross_entropy":
        sections["objective"]["task_loss"] = "rmse"
    return sections


def build_train_config(sections):
    from .training import TrainConfig

    data = dict(sections["train"])
    for name in ("miner", "objective", "encoder", "head"):
        data[name] = dict(sections[name])
    return TrainConfig.from_dict(data)


def write_run_json(out_dir, command, sections, args):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": sections, "args": args}
    (out_dir / "run.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands

def _load_split(data_dir, name, threshold):
    from .dataio import import_dataset

    path = Path(data_dir) / name
    if not path.exists():
        raise DataError(f"dataset directory {path} not found")
    return import_dataset(path, threshold)


def cmd_generate(args, sections):
    from .dataio import export_dataset
    from .signals import SplitSpec, SyntheticCohortConfig, generate_synthetic_cohort, split_by_patient

    cohort = SyntheticCohortConfig.from_dict(sections["cohort"])
    split = SplitSpec(**sections["split"])
    labeled, unlabeled = generate_synthetic_cohort(cohort)
    train, valid, test = split_by_patient(labeled, split)
    out = Path(args.out)
    for name, ds in zip(SPLIT_DIRS, (labeled, train, valid, test, unlabeled)):
        export_dataset(ds, out / name)
    write_run_json(out, "generate", sections, {"out": str(args.out)})
    prevalence = float(labeled.elevated().mean()) if len(labeled) else float("nan")
    print(f"patients: {len(labeled.patient_set())} labeled, {len(unlabeled.patient_set())} unlabeled")
    print(f"records: {len(labeled)} labeled windows, {len(unlabeled)} unlabeled windows")
    print(f"splits: train {len(train)}, valid {len(valid)}, test {len(test)}")
    print(f"prevalence (mPCWP > {cohort.classification_threshold:g} mmHg): {prevalence:.6f}")
    return 0


def _threshold(sections):
    return float(sections["cohort"]["classification_threshold"])


def _resume_pair(out):
    from .encoder import load_checkpoint

    last, best = out / "last.bin", out / "checkpoint.bin"
    if not (last.exists() and best.exists()):
        raise ConfigError(f"--resume needs {last} and {best}")
    return load_checkpoint(last), load_checkpoint(best)


def _check_resume_config(state, cfg):
    """Only ``epochs`` may change between a run and its resumption."""
    old = dict(state.meta.get("config") or {})
    new = json.loads(json.dumps(cfg.to_dict()))
    old.pop("epochs", None)
    new.pop("epochs", None)
    if old != new:
        changed = sorted(k for k in set(old) | set(new) if old.get(k) != new.get(k))
        raise ConfigError(f"resolved config differs from the checkpoint being resumed: {changed}")


def _finish_training(out, best, history, command):
    from .encoder import save_checkpoint

    save_checkpoint(best, out / "checkpoint.bin")
    if history.last_state is not None and history.last_state is not best:
        save_checkpoint(history.last_state, out / "last.bin")
    history.to_csv(out / "history.csv")
    last = history.records[-1]
    print(f"{command}: {len(history)} epochs; best epoch {history.best_epoch} "
          f"val {history.best_value!r}; last val {last['val_metric']!r}")


def cmd_train(args, sections):
    from .training import train_supervised_joint

    cfg = build_train_config(sections)
    th = _threshold(sections)
    train = _load_split(args.data, "train", th)
    valid = _load_split(args.data, "valid", th)
    out = Path(args.out)
    write_run_json(out, "train", sections, {"data": str(args.data), "out": str(args.out)})
    resume = None
    if args.resume:
        resume = _resume_pair(out)
        _check_resume_config(resume[0], cfg.replace(encoder=resume[0].encoder_cfg))
    best, history = train_supervised_joint(train, valid, cfg, resume=resume)
    _finish_training(out, best, history, "train")
    return 0


def cmd_pretrain(args, sections):
    from .encoder import load_checkpoint, save_checkpoint
    from .training import pretrain_selfsup

    cfg = build_train_config(sections)
    unlabeled = _load_split(args.data, "unlabeled", _threshold(sections))
    out = Path(args.out)
    write_run_json(out, "pretrain", sections, {"data": str(args.data), "out": str(args.out)})
    resume = None
    if args.resume:
        ckpt = out / "checkpoint.bin"
        if not ckpt.exists():
            raise ConfigError(f"--resume needs {ckpt}")
        resume = load_checkpoint(ckpt)
        _check_resume_config(resume, cfg.replace(encoder=resume.encoder_cfg))
    state, history = pretrain_selfsup(unlabeled, cfg, resume=resume)
    save_checkpoint(state, out / "checkpoint.bin")
    history.to_csv(out / "history.csv")
    losses = history.column("loss_metric")
    print(f"pretrain: {len(history)} epochs; metric loss {losses[0]!r} -> {losses[-1]!r}")
    return 0


def cmd_finetune(args, sections):
    from .encoder import load_checkpoint
    from .signals import subsample_patients
    from .training import finetune

    if args.freeze_encoder:
        sections["train"]["freeze_encoder"] = True
    cfg = build_train_config(sections)
    th = _threshold(sections)
    train = _load_split(args.data, "train", th)
    valid = _load_split(args.data, "valid", th)
    ft = sections["finetune"]
    frac = float(ft["label_fraction"])
    if not (0.0 < frac <= 1.0):
        raise ConfigError("finetune.label_fraction must lie in (0, 1]")
    if frac < 1.0:
        train = subsample_patients(train, frac, int(ft["label_seed"]))
    if args.no_pretrain and args.pretrained:
        raise ConfigError("--no-pretrain and --pretrained are mutually exclusive")
    if not args.no_pretrain and not args.pretrained and not args.resume:
        raise ConfigError("finetune needs --pretrained CHECKPOINT or --no-pretrain")
    out = Path(args.out)
    write_run_json(out, "finetune", sections, {
        "data": str(args.data), "out": str(args.out), "pretrained": args.pretrained,
        "no_pretrain": bool(args.no_pretrain), "freeze_encoder": bool(args.freeze_encoder),
    })
    if args.resume:
        pair = _resume_pair(out)
        best, history = finetune(None, train, valid, cfg, resume=pair)
    else:
        pretrained = load_checkpoint(args.pretrained) if args.pretrained else None
        best, history = finetune(pretrained, train, valid, cfg)
    _finish_training(out, best, history, "finetune")
    return 0


def cmd_evaluate(args, sections):
    from .encoder import load_checkpoint
    from .evaluation import evaluate

    ev = sections["evaluate"]
    if args.subgroups:
        ev["subgroups"] = True
    state = load_checkpoint(args.checkpoint)
    test = _load_split(args.data, ev["split"], _threshold(sections))
    out = Path(args.out)
    write_run_json(out, "evaluate", sections, {
        "checkpoint": str(args.checkpoint), "data": str(args.data), "out": str(args.out),
    })
    report = evaluate(state, test, subgroups=bool(ev["subgroups"]), n_replicates=int(ev["n_replicates"]),
                      seed=int(ev["seed"]), ks=tuple(int(k) for k in ev["ks"]))
    report.write(out)
    for m in report.metrics:
        print(f"{m.metric}: {m.estimate:.4f} (bootstrap {m.boot_mean:.4f} +/- {m.boot_std:.4f})")
    if report.recall_at_1 is not None:
        print(f"recall@1: {report.recall_at_1:.4f}")
    return 0


def cmd_sweep(args, sections):
    from .training import sweep_alpha, write_sweep_csv

    sw = sections["sweep"]
    if args.grid is not None:
        sw["grid"] = [float(v) for v in args.grid.split(",") if v.strip()] if args.grid.strip() else []
    if not sw["grid"]:
        raise ConfigError("alpha grid is empty")
    cfg = build_train_config(sections)
    th = _threshold(sections)
    train = _load_split(args.data, "train", th)
    valid = _load_split(args.data, "valid", th)
    out = Path(args.out)
    write_run_json(out, "sweep", sections, {"data": str(args.data), "out": str(args.out)})
    rows = sweep_alpha(sw["grid"], cfg, train, valid, regression_miner=sw["regression_miner"],
                       tasks=tuple(sw["tasks"]))
    write_sweep_csv(rows, out / "sweep.csv")
    for r in rows:
        flags = ("*cls" if r.best_classification else "") + ("*reg" if r.best_regression else "")
        print(f"alpha {r.alpha:g}: auc {r.auc} apr {r.apr} rmse {r.rmse} {flags}".rstrip())
    return 0


COMMANDS = {
    "generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train,
    "finetune": cmd_finetune, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
}


def build_parser():
    p = argparse.ArgumentParser(prog="sigmetric", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON config file (or a previous run.json)")
        if data:
            sp.add_argument("--data", required=True, help="directory written by 'generate'")
        sp.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("generate", help="write a synthetic cohort and its patient-disjoint splits"), data=False)
    for name in ("pretrain", "train"):
        sp = sub.add_parser(name, help=f"{name} a model")
        common(sp)
        sp.add_argument("--resume", action="store_true", help="continue from the checkpoints in --out")
    sp = sub.add_parser("finetune", help="task-only training from a pretrained or random encoder")
    common(sp)
    sp.add_argument("--pretrained", help="pretraining checkpoint")
    sp.add_argument("--no-pretrain", action="store_true", help="random-initialization baseline")
    sp.add_argument("--freeze-encoder", action="store_true", help="train the head only")
    sp.add_argument("--resume", action="store_true")
    sp = sub.add_parser("evaluate", help="bootstrapped metrics and the subgroup audit")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--subgroups", action="store_true", help="gender/age gaps, k-NN proportions, Kruskal-Wallis")
    sp = sub.add_parser("sweep", help="grid search over the metric-loss weight")
    common(sp)
    sp.add_argument("--grid", help="comma-separated alpha values")
    return p


def _apply_thread_cap():
    n = os.environ.get("SIGMETRIC_THREADS")
    if not n:
        return
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"SIGMETRIC_THREADS must be an integer, got {n!r}") from None
    if n < 1:
        raise ConfigError("SIGMETRIC_THREADS must be >= 1")
    import numba
    import torch

    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_cap()
        sections = resolve_config(args.command, args.config, parse_overrides(extra))
        return COMMANDS[args.command](args, sections)
    except SigmetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
