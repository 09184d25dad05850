"""Quadratic regularizer ``K = I - lam * Sigma`` and its factorization ``K = U^T U``.

With ``x~ = U^{-T} x`` and ``w~ = U w`` we have ``w^T K w = |w~|^2`` and
``w~ . x~ = w . x``, so a plain SVM trained on ``x~`` and mapped back through
``U^{-1}`` minimizes the prior-regularized objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .priors import SigmaMatrix

log = logging.getLogger(__name__)

LAMBDA_SCALE = 0.9
MAX_HALVINGS = 20
MAX_PARAMS = 20_000
EIG_FLOOR = 1e-12


class RegularizerError(ValueError):
    pass


@dataclass(frozen=True)
class Regularizer:
    sigma: np.ndarray
    lam: float
    e_max: float
    pd_certified: bool
    halvings: int = 0

    @property
    def P(self) -> int:
        return self.sigma.shape[0]

    def K(self) -> np.ndarray:
        return np.eye(self.P) - self.lam * self.sigma

    def quad(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(w @ w - self.lam * (w @ (self.sigma @ w)))

    def summary(self) -> dict:
        return dict(lam=self.lam, e_max=self.e_max, halvings=self.halvings,
                    pd_certified=self.pd_certified)


@dataclass(frozen=True)
class Factorization:
    method: str
    U: np.ndarray
    condition: float
    # eigen method only: K = V diag(evals) V^T, U = diag(sqrt(evals)) V^T
    evals: np.ndarray | None = None
    evecs: np.ndarray | None = None

    @property
    def P(self) -> int:
        return self.U.shape[0]


def identity_regularizer(P: int) -> Regularizer:
    return Regularizer(np.zeros((P, P)), 0.0, 0.0, True, 0)


def _is_pd(K: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return False
    return True


def build_regularizer(sigma, lam_scale: float = LAMBDA_SCALE,
                      max_halvings: int = MAX_HALVINGS, max_params: int = MAX_PARAMS) -> Regularizer:
    """Set ``lam = lam_scale / e_max`` and certify ``K`` positive definite.

    ``sigma`` is a :class:`SigmaMatrix` or a symmetric array.  If the Cholesky
    check fails (possible for indefinite sparse priors) ``lam`` is halved
    until it passes, at most ``max_halvings`` times.
    """
    S = sigma.to_dense() if isinstance(sigma, SigmaMatrix) else np.asarray(sigma, dtype=float)
    P = S.shape[0]
    if S.shape != (P, P):
        raise RegularizerError("prior matrix must be square")
    if P > max_params:
        raise RegularizerError(f"P={P} exceeds the dense factorization cap of {max_params}")
    asym = np.max(np.abs(S - S.T)) if P else 0.0
    if asym > 1e-10 * max(1.0, np.max(np.abs(S))):
        raise RegularizerError(f"prior matrix is not symmetric (max asymmetry {asym:.3g})")
    S = 0.5 * (S + S.T)
    e_max = float(sla.eigh(S, eigvals_only=True, subset_by_index=[P - 1, P - 1])[0]) if P else 0.0
    if e_max <= 0.0 or not np.any(S):
        return Regularizer(S, 0.0, max(e_max, 0.0), True, 0)
    lam = lam_scale / e_max
    for halvings in range(max_halvings + 1):
        if _is_pd(np.eye(P) - lam * S):
            if halvings:
                log.info("prior needed %d lambda halvings (lam=%.4g)", halvings, lam)
            return Regularizer(S, lam, e_max, True, halvings)
        lam *= 0.5
    raise RegularizerError(f"K stayed indefinite after {max_halvings} lambda halvings")


def factorize(reg: Regularizer, method: str = "cholesky") -> Factorization:
    if not reg.pd_certified:
        raise RegularizerError("regularizer is not certified positive definite")
    K = reg.K()
    if method == "cholesky":
        try:
            U = sla.cholesky(K, lower=False)
        except np.linalg.LinAlgError as exc:
            raise RegularizerError(f"Cholesky failed: {exc}") from exc
        # cheap lower bound on cond(K); the eigen route reports the exact value
        d = np.abs(np.diag(U))
        return Factorization("cholesky", U, float((d.max() / d.min()) ** 2))
    if method == "eigen":
        evals, evecs = sla.eigh(K)
        if evals[0] <= EIG_FLOOR:
            raise RegularizerError(f"eigenvalue {evals[0]:.3g} below {EIG_FLOOR}")
        U = np.sqrt(evals)[:, None] * evecs.T
        return Factorization("eigen", U, float(evals[-1] / evals[0]), evals, evecs)
    raise RegularizerError(f"unknown factorization method {method!r}")


def _check_len(fac: Factorization, x: np.ndarray):
    if x.shape[0] != fac.P:
        raise RegularizerError(f"vector length {x.shape[0]} != P={fac.P}")


def transform_features(fac: Factorization, x) -> np.ndarray:
    """``U^{-T} x``; ``x`` may be a vector or a ``(P, k)`` matrix of columns."""
    x = np.asarray(x, dtype=float)
    _check_len(fac, x)
    if fac.method == "cholesky":
        return sla.solve_triangular(fac.U, x, trans="T", lower=False)
    scale = 1.0 / np.sqrt(fac.evals)
    proj = fac.evecs.T @ x
    return proj * (scale if x.ndim == 1 else scale[:, None])


def transform_model(fac: Factorization, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    _check_len(fac, w)
    return fac.U @ w


def transform_model_back(fac: Factorization, w_t) -> np.ndarray:
    """Solve ``U w = w~`` without forming ``U^{-1}``."""
    w_t = np.asarray(w_t, dtype=float)
    _check_len(fac, w_t)
    if fac.method == "cholesky":
        return sla.solve_triangular(fac.U, w_t, lower=False)
    scale = 1.0 / np.sqrt(fac.evals)
    return fac.evecs @ (scale * w_t if w_t.ndim == 1 else scale[:, None] * w_t)
