"""Maximum-likelihood fitting of spline flows."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .transport.base import DomainError
from .transport.flows import (
    ConditionalSplineFlow,
    FlowParams,
    FlowSpec,
    SplineFlow,
    flow_log_density_graph,
    init_flow_params,
)

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainReport", "TrainingError", "fit_flow", "loss_and_grad", "mean_nll"]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    schedule: str = "cosine"  # or "constant"
    val_fraction: float = 0.2
    patience: int = 20
    seed: int = 0
    flow: FlowSpec = field(default_factory=FlowSpec)

    def __post_init__(self):
        if not 0 < self.val_fraction <= 0.5:
            raise ValueError(f"val_fraction must lie in (0, 0.5], got {self.val_fraction}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be positive, epochs non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainReport:
    train_nll: list
    val_nll: list
    params: FlowParams
    epochs_run: int
    best_epoch: int

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_nll", "val_nll"])
            for e, (t, v) in enumerate(zip(self.train_nll, self.val_nll)):
                w.writerow([e, repr(float(t)), repr(float(v))])


def loss_and_grad(params, batch, context=None):
    """Mean negative log-likelihood of ``batch`` and its gradient as a flat vector.

    ``context`` holds model positions (ints) for conditional flows.
    """
    batch = np.asarray(batch, float)
    if batch.ndim != 2 or len(batch) == 0:
        raise ValueError("batch must be a non-empty 2-D array")
    ok_box = {}

    def objective(*weights):
        lp, ok = flow_log_density_graph(params, list(weights), batch, context)
        ok_box["ok"] = ok
        return -ad.mean(lp)

    loss, grads = ad.grad(objective, params.trainable())
    if not ok_box["ok"].all():
        raise DomainError(f"{int(np.sum(~ok_box['ok']))} batch point(s) saturate the sigmoid sandwich")
    return loss, np.concatenate([g.ravel() for g in grads])


def mean_nll(params, x, context=None, chunk=4096):
    total = 0.0
    for lo in range(0, len(x), chunk):
        ctx = None if context is None else context[lo : lo + chunk]
        lp, ok = flow_log_density_graph(params, params.trainable(), x[lo : lo + chunk], ctx)
        if not ok.all():
            return math.inf
        total -= float(np.sum(lp))
    return total / len(x)


def _standardization(x, context, n_models, aux_mask):
    def moments(rows, cols=slice(None)):
        sub = rows[:, cols]
        sd = sub.std(axis=0)
        if np.any(sd <= 0) or not np.all(np.isfinite(sd)):
            raise ValueError(f"degenerate sample coordinate(s) with zero variance: {np.flatnonzero(~(sd > 0))}")
        return sub.mean(axis=0), 1.0 / sd

    if context is None:
        return moments(x)
    shift = np.zeros((n_models, x.shape[1]))
    scale = np.ones_like(shift)
    for i in range(n_models):
        rows = x[context == i]
        cols = ~aux_mask[i]
        if not cols.any():
            continue
        shift[i, cols], scale[i, cols] = moments(rows, cols)
    return shift, scale


def fit_flow(samples, config=TrainConfig(), context=None, models=None, aux_mask=None, reference=None):
    """Fit a spline flow (conditional when ``context`` is given) by maximum likelihood.

    ``context`` holds one model label per row; ``models`` fixes their order
    (defaults to sorted unique labels); ``aux_mask`` marks auxiliary coordinates.
    Returns ``(map, TrainReport)``; the map carries the best-validation parameters.
    """
    x = np.asarray(samples, float)
    if x.ndim == 1:
        x = x[:, None]
    N, n = x.shape
    if N < 50:
        raise ValueError(f"need at least 50 samples to fit a flow, got {N}")
    if not np.isfinite(x).all():
        raise ValueError("samples contain non-finite values")
    rng = np.random.default_rng(config.seed)

    k_idx = None
    if context is not None:
        labels = list(context)
        models = tuple(models) if models is not None else tuple(sorted(set(labels)))
        pos = {k: i for i, k in enumerate(models)}
        missing = set(models) - set(labels)
        if missing:
            raise ValueError(f"models without samples: {sorted(missing)}")
        k_idx = np.array([pos[k] for k in labels], dtype=int)
        aux_mask = np.zeros((len(models), n), bool) if aux_mask is None else np.asarray(aux_mask, bool)

    perm = rng.permutation(N)
    n_val = max(1, int(round(config.val_fraction * N)))
    val, train = perm[:n_val], perm[n_val:]
    xtr, xva = x[train], x[val]
    ctr = None if k_idx is None else k_idx[train]
    cva = None if k_idx is None else k_idx[val]

    shift, scale = _standardization(xtr, ctr, None if models is None else len(models), aux_mask)
    params = init_flow_params(
        n, config.flow, shift=shift, scale=scale, rng=rng,
        models=models if k_idx is not None else None, aux_mask=aux_mask, reference=reference,
    )
    frozen = (params.shift.copy(), params.scale.copy())

    _, ok = flow_log_density_graph(params, params.trainable(), x, k_idx)
    if not ok.all():
        raise DomainError(f"{int(np.sum(~ok))} sample(s) saturate the sigmoid sandwich after standardization")

    train_hist = [mean_nll(params, xtr, ctr)]
    val_hist = [mean_nll(params, xva, cva)]
    best = (val_hist[0], 0, params)
    bs = min(config.batch_size, len(xtr))
    n_batches = len(xtr) // bs
    total_steps = max(1, config.epochs * n_batches)
    theta = params.flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(xtr))
        for b in range(n_batches):
            rows = order[b * bs : (b + 1) * bs]
            current = params.from_flat(theta)
            loss, g = loss_and_grad(current, xtr[rows], None if ctr is None else ctr[rows])
            if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                raise TrainingError(f"non-finite loss/gradient at epoch {epoch}, batch {b}: loss={loss}")
            step += 1
            lr = config.learning_rate
            if config.schedule == "cosine":
                lr *= 0.5 * (1.0 + math.cos(math.pi * (step - 1) / total_steps))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta = theta - lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
        params = params.from_flat(theta)
        train_hist.append(mean_nll(params, xtr, ctr))
        val_hist.append(mean_nll(params, xva, cva))
        if not np.isfinite(train_hist[-1]):
            raise TrainingError(f"training NLL became non-finite at epoch {epoch}")
        if val_hist[-1] < best[0]:
            best = (val_hist[-1], epoch, params)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best[1])
                break
    final = best[2]
    assert np.array_equal(final.shift, frozen[0]) and np.array_equal(final.scale, frozen[1])
    report = TrainReport(train_hist, val_hist, final, len(val_hist) - 1, best[1])
    tmap = ConditionalSplineFlow(final) if final.conditional else SplineFlow(final)
    return tmap, report
