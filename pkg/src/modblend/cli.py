"""Command line: ``modblend gen|train|predict|eval <experiment>``.

Every command can also read its settings from an INI file (``--config``), one
section per command (``[gen]``, ``[train]``, ``[predict]``, ``[eval.horizon]``
...). Keys are the long flag names; flags given on the command line win.
Each run writes the fully resolved settings next to its outputs.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evalx, simgen
from . import numcore as nc
from .dmbn import (DMBN, CheckpointFormatError, TrainConfig, desk_spec, load_checkpoint, predict_trajectory,
                   save_checkpoint, train)
from .mvae import MVAE, MvaeConfig, desk_mvae_spec, load_mvae, mvae_train, save_mvae

log = logging.getLogger("modblend")

OUT_ROOT_ENV = "MODBLEND_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
EXPERIMENTS = ("missing", "horizon", "latents", "mirror", "retrieve", "ablate", "generalize")
SNAPSHOT = "resolved.ini"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- argument parsing ---------------------------------------------------------

def _int_list(text: str) -> list:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _availability(text: str) -> dict:
    out = {}
    for item in str(text).split(","):
        name, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected name=value pairs, got {item!r}")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"availability for {name!r} is not a number: {value!r}")
    return out


def _common(p):
    p.add_argument("--config", type=Path, help="INI file with a section for this command")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _eval_models(p, mvae_too=False):
    p.add_argument("--checkpoint", type=Path, help="trained DMBN checkpoint")
    if mvae_too:
        p.add_argument("--baseline", type=Path, help="trained baseline checkpoint")
    p.add_argument("--train-inline", action="store_true", help="train missing models (cached under --cache)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="modblend", description="Modality blending experiments at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a simulated interaction dataset")
    _common(p)
    p.add_argument("--push", type=int, default=50)
    p.add_argument("--grasp", type=int, default=50)
    p.add_argument("--out", type=Path, help="dataset file to write")

    p = sub.add_parser("train", help="train DMBN or the baseline")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--model", choices=("dmbn", "mvae"), default="dmbn")
    p.add_argument("--iters", type=int, default=TrainConfig.iterations)
    p.add_argument("--epochs", type=int, default=MvaeConfig.epochs)
    p.add_argument("--lr", type=float, help="defaults: 1e-4 (dmbn), 1e-3 (mvae)")
    p.add_argument("--batch-size", type=int, default=MvaeConfig.batch_size)
    p.add_argument("--obs-max", type=int, default=TrainConfig.obs_max)
    p.add_argument("--size", type=int, help="train on the first SIZE training interactions")
    p.add_argument("--image-only", action="store_true")
    p.add_argument("--image-variance", choices=("fixed-unit", "learned"), default="fixed-unit")
    p.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("predict", help="predict full trajectories from one observation")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--interaction", type=int, default=0, help="index into the test split")
    p.add_argument("--step", type=int, help="observed step (default: pre-contact)")
    p.add_argument("--scenario", choices=sorted(evalx.SCENARIOS), help="observe a demonstrator instead")
    p.add_argument("--availability", type=_availability, default="image=1,joint=0")
    p.add_argument("--out", type=Path)

    ev = sub.add_parser("eval", help="run an experiment")
    esub = ev.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    for name in EXPERIMENTS:
        p = esub.add_parser(name)
        _common(p)
        p.add_argument("--data", type=Path)
        p.add_argument("--out", type=Path)
        p.add_argument("--cache", type=Path, help="model cache for inline training")
        p.add_argument("--dmbn-iters", type=int, default=20_000)
        p.add_argument("--mvae-epochs", type=int, default=MvaeConfig.epochs)
        if name == "missing":
            p.add_argument("--sizes", type=_int_list, default="10,20,40,60,80")
            p.add_argument("--seeds", type=_int_list, default="0,1,2")
            p.add_argument("--train-inline", action="store_true")
        elif name == "ablate":
            p.add_argument("--runs", type=int, default=10)
            p.add_argument("--train-inline", action="store_true")
        else:
            _eval_models(p, mvae_too=(name == "horizon"))
        if name in ("mirror", "retrieve", "ablate"):
            p.add_argument("--scenarios", default=",".join(s.name for s in evalx.CANONICAL))
    return parser


def _section(args) -> str:
    return args.command if args.command != "eval" else f"eval.{args.experiment}"


def _subparser(parser, args):
    actions = {a.dest: a for a in parser._actions if isinstance(a, argparse._SubParsersAction)}
    p = actions["command"].choices[args.command]
    if args.command == "eval":
        p = {a.dest: a for a in p._actions if isinstance(a, argparse._SubParsersAction)}["experiment"]
        p = p.choices[args.experiment]
    return p


def parse(argv) -> argparse.Namespace:
    """Parse flags, folding in the ``--config`` section underneath them."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    if not args.config.exists():
        raise FileNotFoundError(f"config file {args.config} not found")
    ini = configparser.ConfigParser()
    ini.read(args.config)
    sub = _subparser(parser, args)
    known = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    section = _section(args)
    defaults = {}
    if ini.has_section(section):
        for key, raw in ini.items(section):
            dest = key.replace("-", "_")
            if dest not in known:
                raise UsageError(f"[{section}] unknown key {key!r} in {args.config}")
            action = known[dest]
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                defaults[dest] = ini.getboolean(section, key)
            else:
                try:
                    defaults[dest] = action.type(raw) if action.type else raw
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise UsageError(f"[{section}] {key}: {exc}")
                if action.choices is not None and defaults[dest] not in action.choices:
                    raise UsageError(f"[{section}] {key}: {raw!r} not in {sorted(action.choices)}")
    for other in ini.sections():
        if other != section and other not in _all_sections():
            raise UsageError(f"unknown section [{other}] in {args.config}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _all_sections() -> set:
    return {"gen", "train", "predict"} | {f"eval.{e}" for e in EXPERIMENTS}


def _fmt(value) -> str:
    if isinstance(value, dict):
        return ",".join(f"{k}={v!r}" for k, v in value.items())
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return "" if value is None else str(value)


def write_snapshot(args, path: Path) -> None:
    ini = configparser.ConfigParser()
    section = _section(args)
    skip = {"command", "experiment", "config", "verbose"}
    ini[section] = {k.replace("_", "-"): _fmt(v) for k, v in sorted(vars(args).items())
                    if k not in skip and v is not None}
    with open(path, "w") as fh:
        ini.write(fh)


def out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _out_dir(args, default_name: str) -> Path:
    out = args.out if args.out is not None else out_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


# --- commands -----------------------------------------------------------------

def cmd_gen(args) -> Path:
    _require(args, "out")
    ds = simgen.generate_dataset(args.push, args.grasp, args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    simgen.save_dataset(ds, args.out)
    write_snapshot(args, args.out.with_name(args.out.name + "." + SNAPSHOT))
    log.info("wrote %d interactions (%d train) to %s", len(ds.interactions), ds.split, args.out)
    return args.out


def cmd_train(args) -> Path:
    _require(args, "data")
    ds = simgen.load_dataset(args.data)
    interactions = ds.train if args.size is None else ds.train[:args.size]
    out = _out_dir(args, f"train-{args.model}-{args.seed}")
    if args.model == "dmbn":
        lr = 1e-4 if args.lr is None else args.lr
        model = DMBN(desk_spec(args.seed, image_only=args.image_only, image_variance=args.image_variance))
        cfg = TrainConfig(iterations=args.iters, lr=lr, obs_max=args.obs_max, seed=args.seed, log_every=1000)
        result = train(model, interactions, cfg)
        save_checkpoint(model, out / "model.ckpt", result.optimizer)
        curve = [("iteration", "loss")] + [(i + 1, repr(v)) for i, v in enumerate(result.losses)]
    else:
        lr = 1e-3 if args.lr is None else args.lr
        model = MVAE(desk_mvae_spec(args.seed))
        cfg = MvaeConfig(epochs=args.epochs, batch_size=args.batch_size, lr=lr, seed=args.seed)
        result = mvae_train(model, interactions, cfg)
        save_mvae(model, out / "model.ckpt", result.optimizer)
        curve = [("epoch", "loss")] + [(i + 1, repr(v)) for i, v in enumerate(result.losses)]
    with open(out / "loss.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(curve)
    args.lr = lr
    write_snapshot(args, out / SNAPSHOT)
    return out


def cmd_predict(args) -> Path:
    _require(args, "checkpoint")
    model, _ = load_checkpoint(args.checkpoint)
    unknown = set(args.availability) - set(model.names)
    if unknown:
        raise UsageError(f"unknown modalities in --availability: {sorted(unknown)}")
    w = [args.availability.get(n, 0.0) for n in model.names]
    if not any(v > 0 for v in w):
        raise UsageError("--availability: at least one modality must be available")
    if any(v < 0 or v > 1 for v in w):
        raise UsageError("--availability: values must lie in [0, 1]")
    if args.scenario is not None:
        T = simgen.T_STEPS
        times = (np.arange(T) / (T - 1)).astype(np.float32)
        step = simgen.pre_contact_index(T) if args.step is None else args.step
        if set(n for n, v in zip(model.names, w) if v > 0) != {"image"}:
            raise UsageError("a demonstrator scenario only provides the image modality")
        s = evalx.SCENARIOS[args.scenario]
        states = {"image": simgen.render_frame(s.scenes(T)[step], s.viewpoint, s.occlusion)}
    else:
        _require(args, "data")
        test = simgen.load_dataset(args.data).test
        if not 0 <= args.interaction < len(test):
            raise UsageError(f"--interaction must be in [0, {len(test)})")
        it = test[args.interaction]
        times = it.times
        step = simgen.pre_contact_index(it.T) if args.step is None else args.step
        if not 0 <= step < it.T:
            raise UsageError(f"--step must be in [0, {it.T})")
        states = {n: it.states[n][step] for n in model.names}
    obs = {n: [(times[step], states[n])] for n, v in zip(model.names, w) if v > 0}
    pred = predict_trajectory(model, obs, w, times)
    out = _out_dir(args, "predict")
    np.save(out / "times.npy", np.asarray(times))
    for name, p in pred.items():
        np.save(out / f"{name}_mean.npy", p.mean)
        np.save(out / f"{name}_std.npy", p.std)
    write_snapshot(args, out / SNAPSHOT)
    return out


def _trainer(args, ds) -> evalx.Trainer:
    return evalx.Trainer(ds, dmbn_iterations=args.dmbn_iters, mvae_epochs=args.mvae_epochs, cache_dir=args.cache)


def _dmbn_for(args, ds) -> DMBN:
    if args.checkpoint is not None:
        return load_checkpoint(args.checkpoint)[0]
    if not args.train_inline:
        raise UsageError("give --checkpoint or --train-inline")
    return _trainer(args, ds).dmbn(args.seed)


def _mvae_for(args, ds) -> MVAE:
    if args.baseline is not None:
        return load_mvae(args.baseline)[0]
    if not args.train_inline:
        raise UsageError("give --baseline or --train-inline")
    return _trainer(args, ds).mvae(args.seed)


def _scenarios(args) -> list:
    names = [n.strip() for n in args.scenarios.split(",") if n.strip()]
    bad = [n for n in names if n not in evalx.SCENARIOS]
    if bad or not names:
        raise UsageError(f"unknown scenario(s) {bad}; choose from {sorted(evalx.SCENARIOS)}")
    return [evalx.SCENARIOS[n] for n in names]


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def cmd_eval(args) -> Path:
    _require(args, "data")
    ds = simgen.load_dataset(args.data)
    out = _out_dir(args, f"eval-{args.experiment}")
    kind = args.experiment
    if kind == "missing":
        if not args.train_inline:
            raise UsageError("the sweep trains its own models; pass --train-inline")
        rows = evalx.eval_missing_modality(_trainer(args, ds), args.sizes, args.seeds)
        evalx.write_metrics(rows, out / "missing.csv")
    elif kind == "horizon":
        rows = evalx.eval_multistep(_dmbn_for(args, ds), _mvae_for(args, ds), ds, args.seed)
        evalx.write_metrics(rows, out / "horizon.csv")
        summary = {f"{m}/{n}": evalx.horizon_spearman(rows, m, n) for m in ("dmbn", "mvae") for n in ("image", "joint")}
        _write_json({"spearman": summary}, out / "horizon_summary.json")
    elif kind == "latents":
        export = evalx.export_latents(_dmbn_for(args, ds), ds, args.seed)
        evalx.write_latents(export, out / "latents.csv", out / "pca.csv")
        _write_json({"alignment_ratio": export.ratio, "rows": len(export.rows)}, out / "latents_summary.json")
    elif kind == "mirror":
        model = _dmbn_for(args, ds)
        ref = evalx.training_arm_average(ds.train)
        results = [evalx.mirror_test(model, s, ref) for s in _scenarios(args)]
        _write_json([r.report() for r in results], out / "mirror.json")
        for r in results:
            np.save(out / f"{r.scenario.name}_image.npy", r.images)
            if r.joints is not None:
                np.save(out / f"{r.scenario.name}_joint.npy", r.joints)
    elif kind == "retrieve":
        model = _dmbn_for(args, ds)
        report = {s.name: {k: asdict(m) for k, m in evalx.retrieval(model, s, ds.train).items()}
                  for s in _scenarios(args)}
        _write_json(report, out / "retrieval.json")
    elif kind == "ablate":
        if not args.train_inline:
            raise UsageError("the ablation trains its own models; pass --train-inline")
        report = evalx.ablate_image_only(_trainer(args, ds), _scenarios(args), args.runs)
        _write_json(report, out / "ablation.json")
    elif kind == "generalize":
        rows, _ = evalx.eval_generalization(_dmbn_for(args, ds), ds, seed=args.seed)
        evalx.write_metrics(rows, out / "generalize.csv")
    write_snapshot(args, out / SNAPSHOT)
    return out


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (simgen.DatasetFormatError, CheckpointFormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except nc.NonFiniteError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
