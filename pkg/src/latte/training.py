"""Pretraining, cross-subject training, subject fine-tuning and LOSO drivers."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt_io
from .data import Dataset, SplitScheme, split_dataset
from .metrics import accuracy, auc, softmax_scores
from .model import LatteConfig, LatteModel, PretrainDecoder
from .optim import AdamW, ParamGroup

log = logging.getLogger(__name__)


# -- losses -------------------------------------------------------------------


def cross_entropy_loss(logits, y) -> ag.Tensor:
    """Batch-mean softmax cross-entropy."""
    logits = ag.as_tensor(logits)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(y) != logits.shape[0]:
        raise ValueError("one label per row of logits")
    picked = logits[np.arange(len(y)), y]
    return (ag.logsumexp(logits, axis=-1) - picked).mean()


def cutfill_loss(x_hat, x, mask) -> ag.Tensor:
    """``||M * (x_hat - x)||_F^2 / ||M||_1``."""
    x_hat = ag.as_tensor(x_hat)
    x = np.asarray(x.data if isinstance(x, ag.Tensor) else x)
    mask = np.asarray(mask)
    if x_hat.shape != x.shape or mask.shape != x.shape:
        raise ValueError(f"shape mismatch: {x_hat.shape}, {x.shape}, {mask.shape}")
    total = float(np.abs(mask).sum())
    if total == 0:
        raise ValueError("cut mask is empty")
    m = mask.astype(x_hat.dtype)
    diff = (x_hat - x.astype(x_hat.dtype)) * m
    return ag.square(diff).sum() * (1.0 / total)


def reconstruction_loss(x_hat, x) -> ag.Tensor:
    """Mean squared error over every cell."""
    x_hat = ag.as_tensor(x_hat)
    x = np.asarray(x.data if isinstance(x, ag.Tensor) else x)
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {x_hat.shape} vs {x.shape}")
    return ag.square(x_hat - x.astype(x_hat.dtype)).mean()


@dataclass
class CutMask:
    mask: np.ndarray  # same shape as x, 1 on replaced cells
    spans: np.ndarray  # (B, 2) start, end (exclusive)


def apply_cut_and_fill(x, l_min: float, l_max: float, fill, rng: np.random.Generator):
    """Replace one random contiguous time span per item with ``fill`` on every channel.

    ``x`` is (B, C, T) or (B, 1, C, T). ``fill`` is a scalar or a per-channel
    array of length C. Span lengths are drawn uniformly from
    ``floor(l_min T) .. floor(l_max T)`` and starts from ``0 .. T - length``,
    one item at a time, length first.
    """
    x = np.asarray(x)
    if not 0 < l_min <= l_max <= 1:
        raise ValueError("need 0 < l_min <= l_max <= 1")
    B, T = x.shape[0], x.shape[-1]
    C = x.shape[-2]
    lo, hi = math.floor(l_min * T), math.floor(l_max * T)
    if lo < 1:
        raise ValueError(f"floor(l_min * T) = {lo}: spans would be empty")
    fill_arr = np.broadcast_to(np.asarray(fill, dtype=x.dtype).reshape(-1, 1) if np.ndim(fill) else fill, (C, T))
    mask = np.zeros(x.shape, dtype=x.dtype)
    out = x.copy()
    spans = np.zeros((B, 2), dtype=np.int64)
    for b in range(B):
        length = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, T - length + 1))
        end = start + length
        spans[b] = (start, end)
        mask[b, ..., start:end] = 1
        out[b, ..., start:end] = fill_arr[:, start:end]
    return out, CutMask(mask, spans)


# -- configs ----------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-2
    adapter_lr: float = 1e-5
    seed: int = 0
    select_metric: str = "accuracy"  # or auc
    log_every: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.adapter_lr < 0 or self.weight_decay < 0:
            raise ValueError("learning rates and weight decay must be nonnegative")
        if self.select_metric not in ("accuracy", "auc"):
            raise ValueError("select_metric must be accuracy or auc")


@dataclass
class PretrainConfig:
    r: float = 0.5
    l_min: float = 0.1
    l_max: float = 0.3
    fill: str | float = "mean"  # per-channel training mean, or a constant
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.r <= 1.0:
            raise ValueError("r must lie in [0, 1]")
        if not 0 < self.l_min <= self.l_max <= 1:
            raise ValueError("need 0 < l_min <= l_max <= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs or batch_size")


# Optimizer settings reported for the three public benchmarks.
TASK_DEFAULTS = {
    "mi": dict(batch_size=32, lr=1e-3, weight_decay=1e-2, windows=5, adapter_lr=1e-2),
    "ssvep": dict(batch_size=32, lr=1e-3, weight_decay=1e-2, windows=1, adapter_lr=1e-5),
    "ern": dict(batch_size=32, lr=1e-4, weight_decay=1e-3, windows=4, adapter_lr=1e-1),
}


# -- helpers ------------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def decoder_adapter_parameters(model: LatteModel) -> list:
    out = []
    for prefix, bank in model.banks():
        if prefix.startswith("predecoder."):
            out.extend(bank.parameters())
    return out


def build_optimizer(model: LatteModel, cfg: TrainConfig, subjects=None, lr_scale: float = 1.0) -> AdamW:
    """Shared weights at ``lr``; decoder adapters at ``adapter_lr``; processor adapters at ``lr``.

    With ``subjects`` given, only those subjects' adapters are optimized.
    """
    bank_ids = {id(p) for _, b in model.banks() for p in b.parameters()}
    allowed = None
    if subjects is not None:
        allowed = {id(p) for s in subjects for p in model.subject_parameters(s).values()}
    dec_ids = {id(p) for p in decoder_adapter_parameters(model)}
    main, dec = [], []
    for _, p in model.named_parameters():
        if not p.trainable:
            continue
        if id(p) in bank_ids and allowed is not None and id(p) not in allowed:
            continue
        (dec if id(p) in dec_ids else main).append(p)
    return AdamW(
        [
            ParamGroup(main, cfg.lr * lr_scale, cfg.weight_decay),
            ParamGroup(dec, cfg.adapter_lr * lr_scale, cfg.weight_decay),
        ]
    )


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    auc: float | None
    logits: np.ndarray


def evaluate(model: LatteModel, ds: Dataset, batch_size: int = 256) -> EvalResult:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty split")
    logits, pred = model.predict(ds.x, ds.subject, batch_size)
    loss = float(cross_entropy_loss(logits.astype(np.float64), ds.y).data)
    score = None
    if model.config.classes == 2 and len(np.unique(ds.y)) == 2:
        score = auc(softmax_scores(logits.astype(np.float64))[:, 1], ds.y)
    return EvalResult(loss, accuracy(pred, ds.y), score, logits)


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.6f}"


class MetricsLog:
    """Tab-separated per-epoch trace: epoch, split, loss, accuracy, auc."""

    header = "epoch\tsplit\tloss\taccuracy\tauc"

    def __init__(self, path=None):
        self.rows: list[tuple] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.write_text(self.header + "\n")

    def add(self, epoch: int, split: str, loss: float, acc: float | None, auc_: float | None) -> None:
        row = (epoch, split, loss, acc, auc_)
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(self.format_row(row) + "\n")

    @staticmethod
    def format_row(row) -> str:
        epoch, split, loss, acc, auc_ = row
        return f"{epoch}\t{split}\t{_fmt(loss)}\t{_fmt(acc)}\t{_fmt(auc_)}"

    def text(self) -> str:
        return "\n".join([self.header] + [self.format_row(r) for r in self.rows]) + "\n"


@dataclass
class TrainResult:
    model: LatteModel
    checkpoint: ckpt_io.ModelCheckpoint
    best_epoch: int
    history: MetricsLog
    val: EvalResult | None = None
    test: EvalResult | None = None


def _snapshot(model: LatteModel):
    params = [p.data.copy() for p in model.parameters()]
    bufs = [(m, k, a.copy()) for _, a, m, k in model.named_buffers()]
    return params, bufs


def _restore(model: LatteModel, snap) -> None:
    params, bufs = snap
    for p, d in zip(model.parameters(), params):
        p.data = d.copy()
    for m, k, a in bufs:
        m.buffers[k] = a.copy()


def _score(res: EvalResult, cfg: TrainConfig) -> float:
    return res.auc if cfg.select_metric == "auc" and res.auc is not None else res.accuracy


def _better(score, loss, best) -> bool:
    if best is None:
        return True
    b_score, b_loss = best
    if score != b_score:
        return score > b_score
    return loss < b_loss


def _fit(
    model, train, val, cfg: TrainConfig, opt: AdamW, log_path=None, tag: str = "train", score_start: bool = False
) -> TrainResult:
    """Minibatch AdamW on cross-entropy with best-validation snapshotting.

    With ``score_start`` the incoming weights compete as epoch 0, so a
    continuation run never returns something worse on validation than its
    starting point.
    """
    cfg.validate()
    if len(train) == 0:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    history = MetricsLog(log_path)
    best = None
    best_epoch = 0
    snap = _snapshot(model)
    val_res = None
    if score_start and len(val):
        val_res = evaluate(model, val)
        history.add(0, "val", val_res.loss, val_res.accuracy, val_res.auc)
        best = (_score(val_res, cfg), val_res.loss)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        tot_loss, correct, seen = 0.0, 0, 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            logits = model(train.x[idx], train.subject[idx])
            loss = cross_entropy_loss(logits, train.y[idx])
            opt.zero_grad()
            ag.backward(loss)
            opt.step()
            tot_loss += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=-1) == train.y[idx]))
            seen += len(idx)
        history.add(epoch, tag, tot_loss / seen, correct / seen, None)
        if len(val):
            res = evaluate(model, val)
            history.add(epoch, "val", res.loss, res.accuracy, res.auc)
            score = _score(res, cfg)
            if _better(score, res.loss, best):
                best = (score, res.loss)
                best_epoch = epoch
                snap = _snapshot(model)
                val_res = res
        else:
            best_epoch = epoch
            snap = _snapshot(model)
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("epoch %d loss %.4f acc %.3f", epoch, tot_loss / seen, correct / seen)
    _restore(model, snap)
    model.eval()
    return TrainResult(model, ckpt_io.from_model(model, {"best_epoch": best_epoch}), best_epoch, history, val_res)


def train_cross_subject(
    model: LatteModel,
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    test: Dataset | None = None,
    log_path=None,
) -> TrainResult:
    """Joint training over every subject; returns the best-validation snapshot."""
    for s in np.unique(train.subject):
        if not np.any(train.subject == s):
            raise ValueError(f"subject {s} has no training trials")
    missing = sorted(set(np.unique(train.subject).tolist()) - set(model.subjects))
    if model.config.use_adapters and missing:
        raise ValueError(f"model has no adapters for subjects {missing}")
    opt = build_optimizer(model, cfg)
    result = _fit(model, train, val, cfg, opt, log_path)
    if test is not None and len(test):
        result.test = evaluate(model, test)
        result.history.add(result.best_epoch, "test", result.test.loss, result.test.accuracy, result.test.auc)
    return result


@dataclass
class FinetuneConfig:
    epochs: int = 20
    lr_scale: float = 0.1
    strict: bool = True


def finetune_subject(
    source,
    subject: int,
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    ft: FinetuneConfig | None = None,
    log_path=None,
) -> TrainResult:
    """Continue training on one subject's trials; other subjects' adapters stay untouched.

    ``source`` is a LatteModel (modified in place) or a ModelCheckpoint.
    """
    ft = ft or FinetuneConfig()
    model = ckpt_io.to_model(source) if isinstance(source, ckpt_io.ModelCheckpoint) else source
    subject = int(subject)
    if model.config.use_adapters and subject not in model.subjects:
        if ft.strict:
            raise KeyError(f"subject {subject} has no adapter in the checkpoint")
        model.add_subject(subject, np.random.default_rng(cfg.seed + 104729))
    train = train.subset(np.flatnonzero(train.subject == subject))
    val = val.subset(np.flatnonzero(val.subject == subject))
    if ft.epochs == 0:
        model.eval()
        return TrainResult(model, ckpt_io.from_model(model), 0, MetricsLog(log_path))
    if len(train) == 0:
        raise ValueError(f"no training trials for subject {subject}")
    run = TrainConfig(**{**cfg.__dict__, "epochs": ft.epochs})
    opt = build_optimizer(model, run, subjects=[subject], lr_scale=ft.lr_scale)
    return _fit(model, train, val, run, opt, log_path, tag="finetune", score_start=True)


@dataclass
class LosoResult:
    folds: list[dict] = field(default_factory=list)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f["accuracy"] for f in self.folds])

    def summary(self) -> dict:
        acc = self.accuracies
        out = {"folds": len(acc), "accuracy_mean": float(acc.mean()), "accuracy_std": float(acc.std())}
        aucs = [f["auc"] for f in self.folds if f["auc"] is not None]
        if len(aucs) == len(self.folds):
            out["auc_mean"] = float(np.mean(aucs))
            out["auc_std"] = float(np.std(aucs))
        return out


def adapter_contribution(model: LatteModel, x, subjects) -> float:
    """Largest absolute adapter output on a probe batch (0.0 when no adapter applies)."""
    was = model.training
    model.eval()
    worst = 0.0
    try:
        with ag.no_grad():
            trace: dict = {}
            model.forward(x, subjects, trace)
            feats_in = ag.transpose(ag.as_tensor(x, dtype=model.config.np_dtype), (0, 2, 1))
            for layer, inp in ((model.sca, feats_in), (model.predecoder.fc, trace["centroid_unpatch"][..., 1:])):
                d = layer.adapter_delta(inp, subjects)
                if d is not None:
                    worst = max(worst, float(np.max(np.abs(d.data))))
            bank = model.predecoder.boosts
            if bank is not None:
                pts = trace["predecoder"]
                boosted = bank(pts, subjects)
                worst = max(worst, float(np.max(np.abs(boosted.data - pts.data))))
    finally:
        model.train(was)
    return worst


def run_loso(
    ds: Dataset,
    config: LatteConfig,
    cfg: TrainConfig,
    scheme: SplitScheme | None = None,
    out_dir=None,
) -> LosoResult:
    """One fold per subject: train on the rest, test on every trial of the held-out subject."""
    subjects = sorted(np.unique(ds.subject).tolist())
    if len(subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least two subjects")
    scheme = scheme or SplitScheme.for_task(ds.meta.task)
    result = LosoResult()
    for held in subjects:
        rest = ds.subset(np.flatnonzero(ds.subject != held))
        heldout = ds.subset(np.flatnonzero(ds.subject == held))
        train, val, _ = split_dataset(rest, scheme, cfg.seed)
        assert held not in set(train.subject.tolist()) | set(val.subject.tolist()), "held-out subject leaked"
        others = [s for s in subjects if s != held]
        model = LatteModel(config, subjects=others, seed=cfg.seed)
        log_path = Path(out_dir) / f"fold_{held}.tsv" if out_dir is not None else None
        res = train_cross_subject(model, train, val, cfg, log_path=log_path)
        probe = adapter_contribution(model, heldout.x[: min(8, len(heldout))], heldout.subject[:8])
        if probe != 0.0:
            raise AssertionError(f"held-out subject {held} received adapter output {probe}")
        test = evaluate(model, heldout)
        result.folds.append(
            {"subject": held, "accuracy": test.accuracy, "auc": test.auc, "loss": test.loss, "best_epoch": res.best_epoch, "adapter_probe": probe}
        )
    return result


# -- pretraining ---------------------------------------------------------------------


@dataclass
class PretrainResult:
    state: dict[str, np.ndarray]
    step_types: list[str]
    recon_curve: list[float]  # reconstruction MSE before training and after each epoch
    decoder: PretrainDecoder


def _pretrain_params(model: LatteModel, decoder: PretrainDecoder) -> list:
    keep = ("sca.", "sca_bn.", "stf.", "stf_bn.", "inception.")
    ps = [p for n, p in model.named_parameters() if n.startswith(keep) and p.trainable]
    return ps + [p for p in decoder.parameters() if p.trainable]


def _recon_eval(model: LatteModel, decoder: PretrainDecoder, ds: Dataset, batch_size: int = 128) -> float:
    """Full-data reconstruction MSE using batch statistics, without touching running buffers."""
    snap = [(m, k, a.copy()) for _, a, m, k in model.named_buffers()]
    total, n = 0.0, 0
    model.train()
    with ag.no_grad():
        for idx in _batches(len(ds), batch_size, None):
            x = ds.x[idx]
            rec = decoder(model.pretrain_features(x, ds.subject[idx]))
            total += float(reconstruction_loss(rec, x).data) * len(idx)
            n += len(idx)
    for m, k, a in snap:
        m.buffers[k] = a
    return total / n


def pretrain(model: LatteModel, ds: Dataset, cfg: PretrainConfig, decoder: PretrainDecoder | None = None) -> PretrainResult:
    """Stochastic mix of reconstruction (probability r) and cut-and-fill updates."""
    cfg.validate()
    if len(ds) == 0:
        raise ValueError("no pretraining trials")
    decoder = decoder or PretrainDecoder(model.config, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    fill = ds.x.mean(axis=(0, 2)) if cfg.fill == "mean" else float(cfg.fill)
    opt = AdamW(_pretrain_params(model, decoder), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps: list[str] = []
    curve = [_recon_eval(model, decoder, ds)]
    for _ in range(cfg.epochs):
        model.train()
        for idx in _batches(len(ds), cfg.batch_size, rng):
            x = ds.x[idx]
            if rng.random() < cfg.r:
                steps.append("reconstruction")
                loss = reconstruction_loss(decoder(model.pretrain_features(x, ds.subject[idx])), x)
            else:
                steps.append("cut_and_fill")
                masked, cut = apply_cut_and_fill(x, cfg.l_min, cfg.l_max, fill, rng)
                loss = cutfill_loss(decoder(model.pretrain_features(masked, ds.subject[idx])), x, cut.mask)
            opt.zero_grad()
            ag.backward(loss)
            opt.step()
        curve.append(_recon_eval(model, decoder, ds))
    model.eval()
    return PretrainResult(model.pretrained_state(), steps, curve, decoder)
