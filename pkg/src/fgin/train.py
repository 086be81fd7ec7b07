"""Training loop (L1 + Adam + early stopping) and patch evaluation."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import metrics, ops
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NonFiniteError, ShapeError
from .model import ModelConfig, check_layout, forward_cube, forward_cube_backward, init_params
from .params import ParamStore, adam_step

log = logging.getLogger(__name__)


def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error and its gradient ``sign(pred - target) / N``."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss: pred {pred.shape} vs target {target.shape}", axis="shape")
    diff = pred - target
    return float(np.mean(np.abs(diff))), (np.sign(diff) / diff.size).astype(pred.dtype)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    if pred.shape != target.shape:
        raise ShapeError(f"loss: pred {pred.shape} vs target {target.shape}", axis="shape")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 * diff / diff.size).astype(pred.dtype)


LOSSES = {"l1": l1_loss, "mse": mse_loss}


@dataclass
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-4
    max_epochs: int = 500
    patience: int = 20
    min_delta: float = 0.01
    seed: int = 0
    scale: int | None = None  # must agree with ModelConfig.scale when given
    eval_every: int = 1
    loss: str = "l1"
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {sorted(LOSSES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    train_loss: float
    val_mpsnr: float | None = None
    val_mssim: float | None = None
    val_sam: float | None = None
    best: bool = False


TRAINLOG_COLUMNS = ("epoch", "steps", "train_loss", "val_mpsnr", "val_mssim", "val_sam", "best")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int | None = None
    best_mpsnr: float | None = None
    stop_reason: str = ""

    def best_series(self) -> list:
        """Running best validation MPSNR after each evaluation."""
        out, cur = [], None
        for r in self.records:
            if r.best:
                cur = r.val_mpsnr
            if r.val_mpsnr is not None:
                out.append(cur)
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAINLOG_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, r.steps, repr(r.train_loss),
                        "" if r.val_mpsnr is None else repr(r.val_mpsnr),
                        "" if r.val_mssim is None else repr(r.val_mssim),
                        "" if r.val_sam is None else repr(r.val_sam), int(r.best)])
        w.writerow(["# stop_reason", self.stop_reason, "best_epoch", self.best_epoch])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text

    def to_dict(self) -> dict:
        return {"records": [asdict(r) for r in self.records], "best_epoch": self.best_epoch,
                "best_mpsnr": self.best_mpsnr, "stop_reason": self.stop_reason}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainLog":
        return cls([EpochRecord(**r) for r in d["records"]], d["best_epoch"], d["best_mpsnr"], d["stop_reason"])


def _stack(arrs, dtype):
    return np.stack(arrs).astype(dtype, copy=False)


def evaluate_arrays(store: ParamStore, cfg: ModelConfig, lrs, hrs, label: str = "patch") -> list:
    """Inference-mode metrics for each (LR, HR) pair."""
    reports = []
    for i, (lr, hr) in enumerate(zip(lrs, hrs)):
        t0 = time.perf_counter()
        pred, _ = forward_cube(lr[None].astype(store.dtype, copy=False), store, cfg, training=False)
        reports.append(metrics.report(pred[0], hr, f"{label}{i}", time.perf_counter() - t0))
    return reports


def evaluate(store: ParamStore, patches, cfg: ModelConfig, role: str = "test"):
    """Per-patch :class:`~fgin.metrics.MetricsReport` list plus their mean."""
    check_layout(store, cfg)
    sel = patches.by_role(role)
    if not sel:
        raise ValueError(f"no {role} patches to evaluate")
    if sel[0].scale != cfg.scale:
        raise ConfigError(f"patches were degraded at {sel[0].scale}x, model expects {cfg.scale}x")
    reports = evaluate_arrays(store, cfg, [p.lr for p in sel], [p.hr for p in sel], role)
    return reports, metrics.aggregate(reports, f"{role}_mean")


def bilinear_baseline(patches, role: str = "test"):
    reports = []
    for i, p in enumerate(patches.by_role(role)):
        t0 = time.perf_counter()
        pred = ops.bilinear_resize(p.lr[None].astype(np.float64), p.scale)[0]
        reports.append(metrics.report(pred, p.hr, f"bilinear{i}", time.perf_counter() - t0))
    return reports, metrics.aggregate(reports, "bilinear_mean")


def _resume_state(path, mcfg, tcfg):
    store, cfg, extra, stores = load_checkpoint(path, expect=mcfg)
    st = extra.get("train_state")
    if st is None:
        raise ConfigError(f"{path} holds no resumable training state")
    saved, now = dict(st["train_config"]), tcfg.to_dict()
    for budget in ("max_epochs", "max_steps"):
        saved.pop(budget)
        now.pop(budget)
    if saved != now:
        raise ConfigError("resume: training config differs from the checkpointed run")
    return store, st, stores.get("best")


def train(patches, mcfg: ModelConfig, tcfg: TrainConfig, store: ParamStore | None = None,
          checkpoint_path=None, resume_from=None, progress=None):
    """Fit the network to ``patches``; returns ``(store, TrainLog)``.

    Each epoch shuffles the training patches with a PRNG seeded by
    ``(seed, epoch)``, so a run resumed from a per-epoch checkpoint replays
    the uninterrupted run exactly.  Validation MPSNR (falling back to the
    training patches when there is no validation split) drives early
    stopping; the best-scoring weights are restored before returning.
    """
    if tcfg.scale is not None and tcfg.scale != mcfg.scale:
        raise ConfigError(f"TrainConfig.scale {tcfg.scale} != ModelConfig.scale {mcfg.scale}")
    train_p = patches.by_role("train")
    if not train_p:
        raise ValueError("empty training set")
    val_p = patches.by_role("validation") or train_p
    loss_fn = LOSSES[tcfg.loss]

    tlog = TrainLog()
    best: ParamStore | None = None
    best_score = -np.inf
    bad = 0
    start_epoch, steps = 0, 0
    if resume_from is not None:
        store, st, best = _resume_state(resume_from, mcfg, tcfg)
        tlog = TrainLog.from_dict(st["log"])
        start_epoch, steps, bad = st["next_epoch"], st["steps"], st["bad"]
        best_score = -np.inf if st["best_score"] is None else st["best_score"]
        if tlog.stop_reason in ("early_stopping", "diverged"):
            if best is not None:
                store.load_state(best)
            return store, tlog
        tlog.stop_reason = ""
    elif store is None:
        store = init_params(mcfg, seed=tcfg.seed)
    check_layout(store, mcfg)

    n = len(train_p)
    dtype = store.dtype
    stop = ""
    for epoch in range(start_epoch, tcfg.max_epochs):
        last_good = store.copy()
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(n)
        losses = []
        for b0 in range(0, n, tcfg.batch_size):
            idx = order[b0:b0 + tcfg.batch_size]
            lr = _stack([train_p[i].lr for i in idx], dtype)
            hr = _stack([train_p[i].hr for i in idx], dtype)
            store.zero_grad()
            try:
                pred, cache = forward_cube(lr, store, mcfg, training=True)
                loss, dpred = loss_fn(pred, hr)
                if not np.isfinite(loss):
                    raise NonFiniteError("non-finite loss")
                forward_cube_backward(dpred, store, mcfg, cache)
                ops.check_finite(*store.grads.values(), where="gradient")
            except NonFiniteError:
                store.load_state(best if best is not None else last_good)
                stop = "diverged"
                break
            adam_step(store, tcfg.learning_rate)
            losses.append(loss)
            steps += 1
            if tcfg.max_steps is not None and steps >= tcfg.max_steps:
                stop = "max_steps"
                break
        if stop == "diverged":
            break
        rec = EpochRecord(epoch, steps, float(np.mean(losses)))
        last_epoch = epoch + 1 == tcfg.max_epochs or stop == "max_steps"
        if (epoch + 1) % tcfg.eval_every == 0 or last_epoch:
            reports = evaluate_arrays(store, mcfg, [p.lr for p in val_p], [p.hr for p in val_p], "val")
            agg = metrics.aggregate(reports)
            rec.val_mpsnr, rec.val_mssim, rec.val_sam = agg.mpsnr, agg.mssim, agg.sam
            if agg.mpsnr > best_score + tcfg.min_delta:
                best_score, bad = agg.mpsnr, 0
                best = store.copy()
                rec.best = True
                tlog.best_epoch, tlog.best_mpsnr = epoch, agg.mpsnr
            else:
                bad += 1
                if bad >= tcfg.patience:
                    stop = "early_stopping"
        tlog.records.append(rec)
        if progress is not None:
            progress(rec)
        log.info("epoch %d steps %d loss %.6f val_mpsnr %s", epoch, steps, rec.train_loss, rec.val_mpsnr)
        if checkpoint_path is not None:
            state = {"next_epoch": epoch + 1, "steps": steps, "bad": bad,
                     "best_score": None if best is None else best_score,
                     "log": tlog.to_dict() | {"stop_reason": stop},
                     "train_config": tcfg.to_dict()}
            save_checkpoint(store, mcfg, checkpoint_path, {"train_state": state},
                            {"best": best} if best is not None else None)
        if stop:
            break
    tlog.stop_reason = stop or "max_epochs"
    if best is not None:
        store.load_state(best)
    return store, tlog
