"""Command-line entry point.

Every subcommand reads a JSON run config (``--config``) and applies flag
overrides. Training commands own a run directory named by config hash and seed;
evaluation commands locate that directory again (or take ``--out`` pointing at
it directly) and read the checkpoint stored there.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import CheckpointError, load_checkpoint, model_from_checkpoint, save_checkpoint
from .data import DatasetError, gen_dataset, load_csv, save_csv
from .ensemble import bayes_ensemble_predict, structure_ensemble_refinement
from .evaluate import (
    ece,
    entropy_curve,
    mc_sweep,
    predictive_entropy,
    prediction_rows,
    reliability_data,
    write_csv,
)
from .tensor import NonFiniteError
from .train import Trainer

log = logging.getLogger("dbsn")

CHECKPOINT = "checkpoint.ckpt"
COMMANDS = ("train", "evaluate", "attack", "ood", "sweep-mc", "refine-ensemble", "baselines-compare")


class RunError(RuntimeError):
    pass


# -- config and data ----------------------------------------------------------------


def build_config(args) -> cfgmod.RunConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(data, dict):
        raise cfgmod.ConfigError("config must be a JSON object")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None and not _is_run_dir(args.out):
        data["out"] = args.out
    if args.method is not None:
        data["method"] = args.method
    if args.dataset is not None:
        ds = dict(data.get("dataset", {}))
        if args.dataset.endswith(".csv"):
            ds["path"] = args.dataset
        else:
            ds["kind"] = args.dataset
            ds["path"] = None
        data["dataset"] = ds
    ev = dict(data.get("eval", {}))
    if args.mc is not None:
        ev["mc"] = args.mc
    if args.eps_list is not None:
        ev["eps_list"] = args.eps_list
    data["eval"] = ev
    return cfgmod.from_dict(data)


def load_data(cfg: cfgmod.RunConfig):
    d = cfg.dataset
    if d.path:
        return load_csv(d.path)
    return gen_dataset(d.kind, d.n, d.noise, d.seed, d.test_fraction, d.ood_offset)


def _is_run_dir(path) -> bool:
    return (Path(path) / CHECKPOINT).is_file()


def _claim_run_dir(run_dir: Path, overwrite: bool) -> Path:
    if run_dir.exists() and any(run_dir.iterdir()) and not overwrite:
        raise RunError(f"run directory {run_dir} already exists; pass --overwrite to replace it")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _locate_run(args, cfg: cfgmod.RunConfig) -> tuple[Path, cfgmod.RunConfig]:
    """Find the run directory and reload its config echo, keeping eval overrides."""
    run_dir = Path(args.out) if args.out and _is_run_dir(args.out) else cfg.run_dir()
    if not _is_run_dir(run_dir):
        raise RunError(f"no checkpoint at {run_dir / CHECKPOINT}; run `train` first")
    echo = cfgmod.from_dict(json.loads((run_dir / "config.json").read_text()))
    return run_dir, replace(echo, eval=cfg.eval)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _metrics(model, x, y, cfg: cfgmod.RunConfig):
    pred = bayes_ensemble_predict(model, x, cfg.eval.mc, cfg.eval.eval_seed)
    report = ece(pred, y, cfg.eval.bins)
    return pred, report, {"error": pred.error(y), "nll": pred.nll(y), "ece": report.ece, "mc": cfg.eval.mc}


# -- subcommands --------------------------------------------------------------------


def cmd_train(args, cfg):
    run_dir = _claim_run_dir(cfg.run_dir(), args.overwrite)
    ds = load_data(cfg)
    x_tr, y_tr = ds.train
    x_te, y_te = ds.test
    _write_json(run_dir / "config.json", cfg.to_dict())
    save_csv(ds, run_dir / "dataset.csv")
    spec = cfg.network.build(ds.dim, ds.num_classes)
    trainer = Trainer(cfg.method, spec, cfg.train_config(), x_tr, y_tr, x_te, y_te)
    log.info("training %s for %d steps into %s", cfg.method, trainer.total_steps, run_dir)
    trainer.fit()
    write_csv(run_dir / "metrics.csv", trainer.state.history)
    save_checkpoint(trainer, run_dir / CHECKPOINT, run_config=cfg.to_dict())
    pred, report, final = _metrics(trainer.model, x_te, y_te, cfg)
    final.update(method=cfg.method, seed=cfg.seed, config_hash=cfg.config_hash(), steps=trainer.state.step)
    _write_json(run_dir / "final_metrics.json", final)
    write_csv(run_dir / "predictions.csv", prediction_rows(pred, y_te))
    write_csv(run_dir / "reliability.csv", reliability_data(report))
    return {"run_dir": str(run_dir), **final}


def _load_run(args, cfg):
    run_dir, cfg = _locate_run(args, cfg)
    model = model_from_checkpoint(load_checkpoint(run_dir / CHECKPOINT))
    return run_dir, cfg, model, load_data(cfg)


def cmd_evaluate(args, cfg):
    run_dir, cfg, model, ds = _load_run(args, cfg)
    x_te, y_te = ds.test
    pred, report, out = _metrics(model, x_te, y_te, cfg)
    _write_json(run_dir / "eval_metrics.json", out)
    write_csv(run_dir / "eval_predictions.csv", prediction_rows(pred, y_te))
    write_csv(run_dir / "eval_reliability.csv", reliability_data(report))
    return {"run_dir": str(run_dir), **out}


def cmd_attack(args, cfg):
    run_dir, cfg, model, ds = _load_run(args, cfg)
    x_te, y_te = ds.test
    ev = cfg.eval
    out = {}
    for kind in ("fgsm", "bim"):
        curve = entropy_curve(
            model, x_te, y_te, ev.eps_list, ds.input_range, ds.feature_min, ds.feature_max,
            attack=kind, S_attack=ev.attack_mc, S_eval=ev.mc, iters=ev.bim_iters, seed=ev.eval_seed,
        )
        write_csv(run_dir / f"attack_{kind}.csv", curve.rows())
        out[kind] = curve.mean_entropy
    return {"run_dir": str(run_dir), "eps_list": list(ev.eps_list), "mean_entropy": out}


def cmd_ood(args, cfg):
    run_dir, cfg, model, ds = _load_run(args, cfg)
    if ds.dim != 2:
        raise RunError("the shifted-blob OOD source is two-dimensional; dataset has dim %d" % ds.dim)
    d = cfg.dataset
    x_te, _ = ds.test
    ood = gen_dataset("blobs_shifted_ood", max(len(x_te), 2), d.noise, d.seed + 1000, ood_offset=d.ood_offset)
    rows, summary = [], {}
    for name, x in (("in", x_te), ("ood", ood.features)):
        h = np.sort(predictive_entropy(bayes_ensemble_predict(model, x, cfg.eval.mc, cfg.eval.eval_seed).probs))
        frac = np.arange(1, len(h) + 1) / len(h)
        rows += [{"set": name, "entropy": float(v), "cdf": float(f)} for v, f in zip(h, frac)]
        summary[f"{name}_mean_entropy"] = float(h.mean())
    write_csv(run_dir / "ood_entropy.csv", rows)
    _write_json(run_dir / "ood_summary.json", summary)
    return {"run_dir": str(run_dir), **summary}


def cmd_sweep(args, cfg):
    run_dir, cfg, model, ds = _load_run(args, cfg)
    x_te, y_te = ds.test
    rows = mc_sweep(model, x_te, y_te, cfg.eval.sweep, cfg.eval.eval_seed, cfg.eval.bins)
    write_csv(run_dir / "sweep_mc.csv", rows)
    return {"run_dir": str(run_dir), "rows": rows}


def cmd_refine(args, cfg):
    run_dir, cfg, model, ds = _load_run(args, cfg)
    if model.theta is None:
        raise RunError(f"refinement needs learned structure logits; method {cfg.method} has none")
    x_tr, y_tr = ds.train
    x_te, y_te = ds.test
    n = cfg.eval.refine_structures
    rows = []
    for control in (False, True):
        ens = structure_ensemble_refinement(model, x_tr, y_tr, n, cfg.train_config(), seed=cfg.seed, control=control)
        pred = bayes_ensemble_predict(ens, x_te, n, cfg.eval.eval_seed)
        rows.append({
            "variant": "control" if control else "refined",
            "structures": n,
            "error": pred.error(y_te),
            "nll": pred.nll(y_te),
            "ece": ece(pred, y_te, cfg.eval.bins).ece,
        })
    write_csv(run_dir / "refine.csv", rows)
    return {"run_dir": str(run_dir), "rows": rows}


def cmd_compare(args, cfg):
    ident = cfg.identity()
    ident["methods"] = list(cfg.eval.methods)
    tag = hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:12]
    out_dir = _claim_run_dir(Path(cfg.out) / f"compare-{tag}-s{cfg.seed}", args.overwrite)
    _write_json(out_dir / "config.json", cfg.to_dict())
    ds = load_data(cfg)
    x_tr, y_tr = ds.train
    x_te, y_te = ds.test
    spec = cfg.network.build(ds.dim, ds.num_classes)
    rows = []
    for method in cfg.eval.methods:
        log.info("baseline %s", method)
        trainer = Trainer(method, spec, cfg.train_config(), x_tr, y_tr, x_te, y_te)
        trainer.fit()
        save_checkpoint(trainer, out_dir / f"{method}.ckpt", run_config=replace(cfg, method=method).to_dict())
        _, _, m = _metrics(trainer.model, x_te, y_te, cfg)
        rows.append({"method": method, "error": m["error"], "nll": m["nll"], "ece": m["ece"]})
    write_csv(out_dir / "baselines.csv", rows)
    return {"run_dir": str(out_dir), "rows": rows}


HANDLERS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "ood": cmd_ood,
    "sweep-mc": cmd_sweep,
    "refine-ensemble": cmd_refine,
    "baselines-compare": cmd_compare,
}


def _eps_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad eps list {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty eps list")
    return vals


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output root, or an existing run directory for evaluation commands")
    common.add_argument("--mc", type=int, help="Bayes-ensemble sample count")
    common.add_argument("--eps-list", type=_eps_list, help="comma-separated attack sizes as fractions of input range")
    common.add_argument("--method")
    common.add_argument("--dataset", help="generator kind or path to a CSV file")
    common.add_argument("--overwrite", action="store_true", help="replace an existing run directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="dbsn", description="Train and evaluate structure-posterior networks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        result = HANDLERS[args.command](args, cfg)
    except (cfgmod.ConfigError, DatasetError, CheckpointError, RunError, NonFiniteError, OSError, ValueError) as exc:
        report = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(report), file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
