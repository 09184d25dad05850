"""Training multi-view templates under a quadratic prior.

Objective minimized over the stacked parameter vector ``w``::

    F(w) = w^T K w + C * sum_i weight_i * max(0, 1 - y_i w . x_i)

With ``K = I`` this is the usual linear SVM, ``2 * (|w|^2 / 2 + (C/2) sum hinge)``.
Both routes below solve the dual with cyclic coordinate descent (random
permutation per pass, seeded) and stop when the relative duality gap drops
below ``tol``.  The primal value at the current dual iterate can rise
between passes, so each solver keeps the best primal iterate seen so far and
returns it; the logged objective is that running best (non-increasing) and
the gap ``best primal - current dual`` certifies the returned model:

* :func:`train_transformed` whitens features with ``U^{-T}``, runs a plain
  linear dual CD and maps the result back with ``U^{-1}``.
* :func:`train_direct` works in the original space on the kernel
  ``X K^{-1} X^T``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .model import MultiViewModel, TemplateLayout
from .regularizer import (Factorization, Regularizer, RegularizerError,
                          identity_regularizer, transform_features, transform_model_back)

log = logging.getLogger(__name__)

NEGATIVE = -1


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    C: float = 0.002
    tol: float = 1e-6
    max_passes: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.C <= 0 or self.tol <= 0 or self.max_passes < 1:
            raise TrainingError("C, tol and max_passes must be positive")


@dataclass
class WindowSet:
    """Labeled training windows.

    ``features`` has shape ``(N, n, m, L)``; ``views[i]`` is the view bin of
    a positive or ``-1`` for a negative.
    """

    features: np.ndarray
    views: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.views = np.asarray(self.views, dtype=np.int64)
        if self.features.ndim != 4 or self.features.shape[0] != self.views.shape[0]:
            raise TrainingError("features must be (N, n, m, L) with one view label each")
        if self.weights is None:
            self.weights = np.ones(len(self.views))
        self.weights = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(self.features)):
            raise TrainingError("window features must be finite")

    def __len__(self):
        return len(self.views)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.views >= 0)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.views < 0)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.features[idx], self.views[idx], self.weights[idx])

    @staticmethod
    def concat(sets) -> "WindowSet":
        sets = list(sets)
        return WindowSet(np.concatenate([s.features for s in sets]),
                         np.concatenate([s.views for s in sets]),
                         np.concatenate([s.weights for s in sets]))


@dataclass
class Examples:
    X: np.ndarray          # (n_examples, P), each row supported on one view
    y: np.ndarray          # +-1
    weights: np.ndarray
    layout: TemplateLayout

    def __len__(self):
        return len(self.y)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, pass_, primal, dual, current=None):
        gap = primal - dual
        current = primal if current is None else current
        self.rows.append(dict(pass_=pass_, objective=2.0 * primal, dual=2.0 * dual,
                              gap=gap / max(abs(primal), 1e-300), current=2.0 * current))

    @property
    def final_objective(self) -> float:
        return self.rows[-1]["objective"] if self.rows else float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["pass", "objective", "dual_objective", "relative_gap", "iterate_objective"])
            for r in self.rows:
                wr.writerow([int(r["pass_"])] + [repr(float(r[k])) for k in
                                                 ("objective", "dual", "gap", "current")])


def stack_examples(windows: WindowSet, layout: TemplateLayout) -> Examples:
    """Place each window into the stacked parameter space.

    A positive of view ``v`` becomes one example in block ``v`` (``y = +1``);
    a negative becomes one example per view block (``y = -1``).  The active
    view's bias slot is set to 1.
    """
    shape = (layout.rows, layout.cols, layout.cell_dim)
    if windows.features.shape[1:] != shape:
        raise TrainingError(f"window shape {windows.features.shape[1:]} != layout {shape}")
    if np.any(windows.views >= layout.views):
        raise TrainingError("positive view label out of range")
    flat = windows.features.reshape(len(windows), -1)
    rows, ys, ws, blocks = [], [], [], []
    for i, v in enumerate(windows.views):
        targets = [v] if v >= 0 else range(layout.views)
        for t in targets:
            rows.append(i)
            blocks.append(t)
            ys.append(1.0 if v >= 0 else -1.0)
            ws.append(windows.weights[i])
    X = np.zeros((len(rows), layout.n_params))
    size = layout.view_size
    for e, (i, t) in enumerate(zip(rows, blocks)):
        X[e, t * size:(t + 1) * size] = flat[i]
        if layout.per_view_bias:
            X[e, layout.bias_index(t)] = 1.0
    return Examples(X, np.array(ys), np.array(ws), layout)


def objective(w, examples: Examples, reg: Regularizer | None, C: float) -> float:
    w = np.asarray(w, dtype=float)
    quad = float(w @ w) if reg is None else reg.quad(w)
    margins = examples.y * (examples.X @ w)
    return quad + C * float(np.sum(examples.weights * np.maximum(0.0, 1.0 - margins)))


def _check_classes(examples: Examples):
    if not np.any(examples.y > 0) or not np.any(examples.y < 0):
        raise TrainingError("need at least one positive and one negative example")


def _gap_terms(alpha, upper, w_sq, margins):
    primal = 0.5 * w_sq + float(np.sum(upper * np.maximum(0.0, 1.0 - margins)))
    dual = float(np.sum(alpha)) - 0.5 * w_sq
    return primal, dual


def _dual_cd_linear(X, y, upper, cfg: TrainConfig, log_: TrainLog):
    """Linear dual CD for ``min |w|^2/2 + sum_i upper_i hinge_i``; returns ``(w, alpha)``."""
    n, P = X.shape
    rng = np.random.default_rng(cfg.seed)
    alpha = np.zeros(n)
    w = np.zeros(P)
    qii = np.einsum("ij,ij->i", X, X)
    best, best_w = np.inf, w.copy()
    for p in range(1, cfg.max_passes + 1):
        for i in rng.permutation(n):
            if qii[i] <= 0.0:
                continue
            xi = X[i]
            G = y[i] * (w @ xi) - 1.0
            a = alpha[i]
            if (a <= 0.0 and G >= 0.0) or (a >= upper[i] and G <= 0.0):
                continue
            new = min(max(a - G / qii[i], 0.0), upper[i])
            if new != a:
                w += (new - a) * y[i] * xi
                alpha[i] = new
        primal, dual = _gap_terms(alpha, upper, w @ w, y * (X @ w))
        if primal < best:
            best, best_w = primal, w.copy()
        log_.add(p, best, dual, primal)
        if best - dual <= cfg.tol * max(abs(best), 1e-300):
            break
    else:
        log.warning("dual CD hit max_passes=%d (gap %.3g)", cfg.max_passes, log_.rows[-1]["gap"])
    return best_w, alpha


def _dual_cd_kernel(Q, upper, cfg: TrainConfig, log_: TrainLog):
    """Dual CD on a precomputed signed Gram matrix ``Q_ij = y_i y_j k(x_i, x_j)``."""
    n = Q.shape[0]
    rng = np.random.default_rng(cfg.seed)
    alpha = np.zeros(n)
    Qa = np.zeros(n)
    diag = np.diag(Q).copy()
    best, best_alpha = np.inf, alpha.copy()
    for p in range(1, cfg.max_passes + 1):
        for i in rng.permutation(n):
            if diag[i] <= 0.0:
                continue
            G = Qa[i] - 1.0
            a = alpha[i]
            if (a <= 0.0 and G >= 0.0) or (a >= upper[i] and G <= 0.0):
                continue
            new = min(max(a - G / diag[i], 0.0), upper[i])
            if new != a:
                Qa += (new - a) * Q[:, i]
                alpha[i] = new
        w_sq = float(alpha @ Qa)
        primal, dual = _gap_terms(alpha, upper, w_sq, Qa)
        if primal < best:
            best, best_alpha = primal, alpha.copy()
        log_.add(p, best, dual, primal)
        if best - dual <= cfg.tol * max(abs(best), 1e-300):
            break
    else:
        log.warning("kernel dual CD hit max_passes=%d", cfg.max_passes)
    return best_alpha


def train_transformed(examples: Examples, fac: Factorization | None, cfg: TrainConfig = TrainConfig(),
                      meta: str = "", train_log: TrainLog | None = None) -> MultiViewModel:
    """Whiten features with the factorization, train a plain SVM, map back.

    ``fac=None`` means ``K = I`` (no transform).
    """
    _check_classes(examples)
    train_log = TrainLog() if train_log is None else train_log
    Xt = examples.X if fac is None else transform_features(fac, examples.X.T).T
    upper = 0.5 * cfg.C * examples.weights
    w_t, _ = _dual_cd_linear(Xt, examples.y, upper, cfg, train_log)
    w = w_t if fac is None else transform_model_back(fac, w_t)
    return MultiViewModel(examples.layout, w, meta)


def train_direct(examples: Examples, reg: Regularizer, cfg: TrainConfig = TrainConfig(),
                 meta: str = "", train_log: TrainLog | None = None) -> MultiViewModel:
    """Solve in the original space via the kernel ``X K^{-1} X^T``."""
    _check_classes(examples)
    if not reg.pd_certified:
        raise RegularizerError("regularizer is not certified positive definite")
    train_log = TrainLog() if train_log is None else train_log
    X, y = examples.X, examples.y
    if reg.lam == 0.0:
        KinvXt = X.T.copy()
    else:
        KinvXt = sla.solve(reg.K(), X.T, assume_a="pos")
    Q = (y[:, None] * (X @ KinvXt)) * y[None, :]
    Q = 0.5 * (Q + Q.T)
    upper = 0.5 * cfg.C * examples.weights
    alpha = _dual_cd_kernel(Q, upper, cfg, train_log)
    w = KinvXt @ (alpha * y)
    return MultiViewModel(examples.layout, w, meta)


def _pick(rng, idx: np.ndarray, k):
    if k == "all" or k is None or k >= len(idx):
        if k not in ("all", None) and k > len(idx):
            raise TrainingError(f"asked for {k} positives, only {len(idx)} available")
        return np.sort(idx)
    return np.sort(rng.choice(idx, size=int(k), replace=False))


def sample_per_view(windows: WindowSet, layout: TemplateLayout, per_view, rng) -> WindowSet:
    """Keep ``per_view[v]`` random positives of each view plus every negative.

    ``per_view`` is an int, ``"all"``, or a sequence with one entry per view.
    """
    if isinstance(per_view, (int, np.integer, str)) or per_view is None:
        per_view = [per_view] * layout.views
    if len(per_view) != layout.views:
        raise TrainingError("per-view counts need one entry per view")
    keep = []
    for v, k in enumerate(per_view):
        idx = np.flatnonzero(windows.views == v)
        if k != "all" and k is not None and k > len(idx):
            raise TrainingError(f"view {v} has {len(idx)} positives, {k} requested")
        if k == 0:
            continue
        keep.append(_pick(rng, idx, k))
    keep.append(windows.negatives)
    return windows.subset(np.concatenate(keep))


def bootstrap_sources(windows: WindowSet, layout: TemplateLayout, n_models: int, per_view_k,
                      seed: int, cfg: TrainConfig = TrainConfig(),
                      logs: list | None = None) -> list[MultiViewModel]:
    """Train ``n_models`` plain SVMs, each on its own seeded draw of ``per_view_k`` positives per view.

    If ``logs`` is a list, one :class:`TrainLog` per source is appended to it.
    """
    if n_models < 1:
        raise TrainingError("need at least one source model")
    for v in range(layout.views):
        have = int(np.sum(windows.views == v))
        if per_view_k != "all" and have < per_view_k:
            raise TrainingError(f"view {v} has {have} positives, need {per_view_k}")
    models = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_models)):
        rng = np.random.default_rng(child)
        sub = sample_per_view(windows, layout, per_view_k, rng)
        sub_cfg = TrainConfig(cfg.C, cfg.tol, cfg.max_passes, int(rng.integers(2**31)))
        tl = TrainLog()
        models.append(train_transformed(stack_examples(sub, layout), None, sub_cfg,
                                        meta=f"source {i}", train_log=tl))
        if logs is not None:
            logs.append(tl)
    return models
