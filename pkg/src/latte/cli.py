"""Command-line driver: ``latte <verb> [--config PATH] [--set KEY=VALUE ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig
from .data import SplitScheme, SynthSpec, load_eegc, save_eegc, split_dataset, synth_generate
from .model import LatteConfig, LatteModel
from .training import (
    FinetuneConfig,
    PretrainConfig,
    TrainConfig,
    evaluate,
    finetune_subject,
    pretrain,
    run_loso,
    train_cross_subject,
)

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4

log = logging.getLogger("latte")


class MissingFile(Exception):
    pass


def _need(path, what: str) -> Path:
    if not path:
        raise MissingFile(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"{what} not found: {p}")
    return p


def model_config(cfg: RunConfig, meta) -> LatteConfig:
    try:
        return LatteConfig(
            channels=meta.channels,
            timesteps=meta.timesteps,
            classes=meta.classes,
            windows=cfg.windows,
            components=cfg.components,
            stf_kernel=cfg.stf_kernel,
            bottleneck=cfg.bottleneck,
            filters=cfg.filters,
            kernels=cfg.kernels,
            pool_k=cfg.pool_k,
            heads=cfg.heads,
            latent_dim=cfg.latent_dim,
            proc_rank=cfg.proc_rank,
            dec_rank=cfg.dec_rank,
            n_boosts=cfg.n_boosts,
            boost_scale=cfg.boost_scale,
            predecoder=cfg.predecoder,
            use_adapters=cfg.use_adapters,
            prototype_std=cfg.prototype_std,
            train_prototypes=cfg.train_prototypes,
            K=cfg.K,
        )
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from None


def train_config(cfg: RunConfig, classes: int, task: str) -> TrainConfig:
    metric = cfg.select_metric
    if metric == "auto":
        metric = "auc" if classes == 2 and task == "ern" else "accuracy"
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        adapter_lr=cfg.adapter_lr,
        seed=cfg.seed,
        select_metric=metric,
    )


def _task(cfg: RunConfig, ds) -> str:
    return ds.meta.task if cfg.task == "auto" else cfg.task


def _write_report(out: Path, report: dict) -> None:
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _metrics(res) -> dict:
    if res is None:
        return {}
    d = {"loss": round(res.loss, 6), "accuracy": round(res.accuracy, 6)}
    if res.auc is not None:
        d["auc"] = round(res.auc, 6)
    return d


def _load_data(args, cfg):
    ds = load_eegc(_need(args.data, "data file"))
    return ds, _task(cfg, ds)


def cmd_synth(args, cfg: RunConfig) -> int:
    weights = tuple(float(w) for w in cfg.synth_class_weights.split(",")) if cfg.synth_class_weights else None
    spec = SynthSpec(
        subjects=cfg.synth_subjects,
        classes=cfg.synth_classes,
        trials=cfg.synth_trials,
        channels=cfg.synth_channels,
        timesteps=cfg.synth_timesteps,
        snr=cfg.synth_snr,
        shift=cfg.synth_shift,
        seed=cfg.seed,
        sessions=cfg.synth_sessions,
        class_weights=weights,
    )
    try:
        ds = synth_generate(spec)
    except ValueError as exc:
        raise ConfigError("synth", str(exc)) from None
    target = Path(args.data or Path(args.out) / "synthetic.eegc")
    target.parent.mkdir(parents=True, exist_ok=True)
    save_eegc(ds, None, target)
    print(f"wrote {len(ds)} trials to {target}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    ds, task = _load_data(args, cfg)
    train, _, _ = split_dataset(ds, SplitScheme.for_task(task), cfg.seed)
    model = LatteModel(model_config(cfg, ds.meta), sorted(np.unique(ds.subject).tolist()), seed=cfg.seed)
    fill = cfg.fill if cfg.fill == "mean" else float(cfg.fill)
    pcfg = PretrainConfig(cfg.r, cfg.l_min, cfg.l_max, fill, cfg.pretrain_epochs, cfg.pretrain_lr, 0.0, cfg.batch_size, cfg.seed)
    res = pretrain(model, train, pcfg)
    out = Path(args.out)
    ckpt_io.save_model(out / "pretrained.latc", model, {"kind": "pretrained"})
    with (out / "pretrain.tsv").open("w") as fh:
        fh.write("epoch\treconstruction_loss\n")
        for i, v in enumerate(res.recon_curve):
            fh.write(f"{i}\t{v:.6f}\n")
    counts = {k: res.step_types.count(k) for k in ("reconstruction", "cut_and_fill")}
    _write_report(
        out,
        {
            "command": "pretrain",
            "seed": cfg.seed,
            "config_hash": cfg.config_hash(),
            "reconstruction_initial": round(res.recon_curve[0], 6),
            "reconstruction_final": round(res.recon_curve[-1], 6),
            "steps": counts,
        },
    )
    print(f"reconstruction loss {res.recon_curve[0]:.4f} -> {res.recon_curve[-1]:.4f}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    ds, task = _load_data(args, cfg)
    train, val, test = split_dataset(ds, SplitScheme.for_task(task), cfg.seed)
    mcfg = model_config(cfg, ds.meta)
    model = LatteModel(mcfg, sorted(np.unique(ds.subject).tolist()), seed=cfg.seed)
    if cfg.pretrained:
        src = ckpt_io.load_model(_need(cfg.pretrained, "pretrained checkpoint"))
        model.load_pretrained(src.pretrained_state())
    out = Path(args.out)
    tcfg = train_config(cfg, ds.meta.classes, task)
    res = train_cross_subject(model, train, val, tcfg, test=test, log_path=out / "metrics.tsv")
    ckpt_io.save(out / "model.latc", ckpt_io.from_model(res.model, {"best_epoch": res.best_epoch}))
    report = {
        "command": "train",
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "best_epoch": res.best_epoch,
        "val": _metrics(res.val),
        "test": _metrics(res.test),
    }
    _write_report(out, report)
    print(f"best epoch {res.best_epoch}; test accuracy {res.test.accuracy:.4f}" if res.test else "done")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    ds, task = _load_data(args, cfg)
    src = ckpt_io.load(_need(args.checkpoint, "checkpoint"))
    if cfg.subject < 0:
        raise ConfigError("subject", "finetune needs subject >= 0")
    train, val, test = split_dataset(ds, SplitScheme.for_task(task), cfg.seed)
    model = ckpt_io.to_model(src)
    tcfg = train_config(cfg, ds.meta.classes, task)
    out = Path(args.out)
    ft = FinetuneConfig(cfg.finetune_epochs, cfg.finetune_lr_scale, cfg.strict)
    try:
        res = finetune_subject(model, cfg.subject, train, val, tcfg, ft, log_path=out / "metrics.tsv")
    except KeyError as exc:
        raise ConfigError("subject", str(exc.args[0])) from None
    mine = test.subset(np.flatnonzero(test.subject == cfg.subject))
    result = evaluate(res.model, mine) if len(mine) else None
    ckpt_io.save(out / "model.latc", res.checkpoint)
    _write_report(
        out,
        {
            "command": "finetune",
            "seed": cfg.seed,
            "subject": cfg.subject,
            "config_hash": cfg.config_hash(),
            "best_epoch": res.best_epoch,
            "test": _metrics(result),
        },
    )
    if result is not None:
        print(f"subject {cfg.subject}: test accuracy {result.accuracy:.4f}")
    return 0


def cmd_loso(args, cfg: RunConfig) -> int:
    ds, task = _load_data(args, cfg)
    mcfg = model_config(cfg, ds.meta)
    out = Path(args.out)
    res = run_loso(ds, mcfg, train_config(cfg, ds.meta.classes, task), SplitScheme.for_task(task), out_dir=out)
    folds = [{k: (round(v, 6) if isinstance(v, float) else v) for k, v in f.items()} for f in res.folds]
    summary = {k: (round(v, 6) if isinstance(v, float) else v) for k, v in res.summary().items()}
    _write_report(out, {"command": "loso", "seed": cfg.seed, "config_hash": cfg.config_hash(), "folds": folds, "summary": summary})
    print(f"LOSO accuracy {summary['accuracy_mean']:.4f} +/- {summary['accuracy_std']:.4f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ds = load_eegc(_need(args.data, "data file"))
    model = ckpt_io.load_model(_need(args.checkpoint, "checkpoint"))
    res = evaluate(model, ds)
    out = Path(args.out)
    _write_report(out, {"command": "eval", "seed": cfg.seed, "config_hash": cfg.config_hash(), "test": _metrics(res)})
    line = f"accuracy {res.accuracy:.4f}"
    if res.auc is not None:
        line += f" auc {res.auc:.4f}"
    print(line)
    return 0


def cmd_inspect(args, cfg: RunConfig) -> int:
    if args.checkpoint:
        ck = ckpt_io.load(_need(args.checkpoint, "checkpoint"))
        model = ckpt_io.to_model(ck)
        print(f"checkpoint version {ck.version}, K = {ck.K}")
        print(f"subjects: {sorted(ck.banks)}")
        for k, v in model.parameter_counts().items():
            print(f"{k}: {v}")
        for k, v in sorted(ck.metadata.items()):
            print(f"meta {k} = {v}")
    if args.data:
        ds = load_eegc(_need(args.data, "data file"))
        m = ds.meta
        print(f"task {m.task}: {len(ds)} trials, C={m.channels}, T={m.timesteps}, classes={m.classes}")
        for s in np.unique(ds.subject):
            sel = ds.subject == s
            counts = np.bincount(ds.y[sel], minlength=m.classes).tolist()
            print(f"subject {s}: {int(sel.sum())} trials, sessions {sorted(set(ds.session[sel].tolist()))}, labels {counts}")
    if not args.checkpoint and not args.data:
        raise MissingFile("inspect needs --checkpoint and/or --data")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "loso": cmd_loso,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latte", description="Hyperbolic EEG classifier with subject adapters.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    parser.add_argument("--data", help="EEGC dataset file")
    parser.add_argument("--checkpoint", help="LATC checkpoint file")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.config:
            _need(args.config, "config file")
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = RunConfig.load(args.config, overrides)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: invalid config key {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingFile as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ckpt_io.FormatError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
