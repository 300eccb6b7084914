"""Conditional group means, the block-matrix prediction variance, and PIs.

The predictor plugs each subject's conditional mode into the linear
predictor.  Its covariance solves the symmetric system

    M = [[X'WX, X'WZ], [Z'WX, Z'WZ + G^{-1}]],   C_q = (X_q; Z_q)' M^{-1} (X_q; Z_q)

with W the diagonal iterative weights at the conditional modes and
G = sigma2 I.  On an identity-link Gaussian model this is exactly the
Henderson mixed-model-equation prediction covariance; for the binary and
count families it is the Laplace-approximate analogue.  The naive-plus-
correction decomposition of the same quantity lives in the tests as an
independent oracle, not here.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .families import Family, family_ops
from .fitter import FittedModel
from .marginal import GroupMeanEstimate, Interval, MeanKind, ci_direct, ci_inverse_log, ci_inverse_logit

_SIGMA2_FLOOR = 1e-9  # below this the random-effect block is dropped (G^{-1} -> inf)
_JITTER = 1e-10


@dataclass(frozen=True, eq=False)
class PredictionStructure:
    """Design pieces of the prediction system for one fitted model."""

    X: np.ndarray            # (N, p) fixed design
    subject_index: np.ndarray  # (N,) row -> subject column of Z
    weights: np.ndarray      # (N,) diagonal of W at the conditional modes
    sigma2: float
    n_subjects: int

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def with_random_block(self) -> bool:
        return self.sigma2 > _SIGMA2_FLOOR


class _Factorization:
    def __init__(self, struct: PredictionStructure):
        X, w, subj, K = struct.X, struct.weights, struct.subject_index, struct.n_subjects
        p = struct.p
        self.struct = struct
        if struct.with_random_block():
            m = np.zeros((p + K, p + K))
            m[:p, :p] = X.T @ (w[:, None] * X)
            bw = np.zeros((K, p))
            np.add.at(bw, subj, w[:, None] * X)
            m[:p, p:] = bw.T
            m[p:, :p] = bw
            dsum = np.bincount(subj, weights=w, minlength=K)
            m[p:, p:][np.diag_indices(K)] = dsum + 1.0 / struct.sigma2
        else:
            m = X.T @ (w[:, None] * X)
        try:
            self.cho = cho_factor(m)
        except np.linalg.LinAlgError:
            m = m + _JITTER * np.eye(m.shape[0])
            self.cho = cho_factor(m)

    def design_columns(self, rows: np.ndarray) -> np.ndarray:
        """(X_q; Z_q) for the given observation rows, one column per row."""
        struct = self.struct
        nq = rows.shape[0]
        top = struct.X[rows].T
        if not struct.with_random_block():
            return top
        bottom = np.zeros((struct.n_subjects, nq))
        bottom[struct.subject_index[rows], np.arange(nq)] = 1.0
        return np.vstack([top, bottom])

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve(self.cho, rhs)


_CACHE: "weakref.WeakKeyDictionary[FittedModel, _Factorization]" = weakref.WeakKeyDictionary()


def build_prediction_structure(fitted: FittedModel) -> PredictionStructure:
    """Iterative weights and design pieces evaluated at the conditional modes."""
    ds = fitted.dataset
    ops = family_ops(fitted.spec.family)
    eta = ds.X @ fitted.params.beta + np.asarray(fitted.cond_modes)[ds.subject_index]
    w = ds.weights * ops.fisher_weight(eta, fitted.params.kappa) / fitted.params.sigma0_2
    return PredictionStructure(
        X=ds.X,
        subject_index=np.asarray(ds.subject_index),
        weights=np.asarray(w, float),
        sigma2=fitted.params.sigma2,
        n_subjects=ds.n_subjects,
    )


def _factorization(fitted: FittedModel) -> _Factorization:
    fac = _CACHE.get(fitted)
    if fac is None:
        fac = _Factorization(build_prediction_structure(fitted))
        _CACHE[fitted] = fac
    return fac


def factorize_structure(struct: PredictionStructure) -> _Factorization:
    """Entry point for driving the block solve with hand-built structures."""
    return _Factorization(struct)


# ---- predictors ---------------------------------------------------------------


def predicted_eta(fitted: FittedModel, x, subject_id: str) -> float:
    """x'beta_hat + b_hat for the given subject's conditional mode."""
    x = np.asarray(x, float)
    if subject_id not in fitted.dataset.subject_position:
        raise KeyError(f"unknown subject {subject_id!r}")
    return float(x @ fitted.params.beta + fitted.mode_for(subject_id))


def predicted_eta_rows(fitted: FittedModel) -> np.ndarray:
    """Predicted linear predictor for every observation row."""
    ds = fitted.dataset
    return ds.X @ fitted.params.beta + np.asarray(fitted.cond_modes)[ds.subject_index]


def _group_rows_idx(fitted: FittedModel, group_id: str) -> np.ndarray:
    gi = fitted.dataset.group_index
    if group_id not in gi:
        raise KeyError(f"unknown group {group_id!r}")
    return gi.indices[group_id]


def conditional_group_mean(fitted: FittedModel, group_id: str) -> float:
    """lambda_hat_q: group average of the inverse link at the predicted eta."""
    idx = _group_rows_idx(fitted, group_id)
    ops = family_ops(fitted.spec.family)
    return float(np.mean(ops.inverse_link(predicted_eta_rows(fitted)[idx])))


def predictor_at_mean_covariate(fitted: FittedModel, group_id: str) -> float:
    """Benchmark predictor lambda*_q using the group-average covariate row."""
    idx = _group_rows_idx(fitted, group_id)
    ds = fitted.dataset
    xbar = ds.X[idx].mean(axis=0)
    eta = float(xbar @ fitted.params.beta) + np.asarray(fitted.cond_modes)[ds.subject_index[idx]]
    ops = family_ops(fitted.spec.family)
    return float(np.mean(ops.inverse_link(eta)))


# ---- prediction variance -------------------------------------------------------


def prediction_covariance(fitted: FittedModel, group_id: str) -> np.ndarray:
    """Conditional covariance matrix of the predicted eta vector of one group.

    Solves M S = (X_q; Z_q) rather than inverting M.  At the sigma2 = 0
    boundary the random-effect block is dropped (predictions carry
    fixed-effect uncertainty only).
    """
    idx = _group_rows_idx(fitted, group_id)
    fac = _factorization(fitted)
    rhs = fac.design_columns(idx)
    c = rhs.T @ fac.solve(rhs)
    return 0.5 * (c + c.T)


def conditional_group_variance(fitted: FittedModel, group_id: str) -> float:
    """Delta-method variance of lambda_hat_q through the prediction covariance.

    Equals J' D C D J / N_q^2 with D the diagonal of inverse-link
    derivatives at the predicted etas, computed via the collapsed vector
    a = (X_q; Z_q) D J without forming C.
    """
    idx = _group_rows_idx(fitted, group_id)
    ops = family_ops(fitted.spec.family)
    d = ops.dinverse_link(predicted_eta_rows(fitted)[idx])
    fac = _factorization(fitted)
    a = fac.design_columns(idx) @ d
    var = float(a @ fac.solve(a)) / idx.shape[0] ** 2
    return max(var, 0.0)


def mode_beta_jacobian(fitted: FittedModel) -> np.ndarray:
    """Rows db_hat_i / dbeta from the implicit-function identity.

    Row i is -(J'WJ + 1/sigma2)^{-1} J'WX_i with W the iterative weights at
    the conditional modes.
    """
    struct = build_prediction_structure(fitted)
    ds = fitted.dataset
    k = ds.n_subjects
    wx = np.zeros((k, ds.p))
    np.add.at(wx, struct.subject_index, struct.weights[:, None] * struct.X)
    wsum = np.bincount(struct.subject_index, weights=struct.weights, minlength=k)
    denom = wsum + 1.0 / fitted.params.sigma2
    return -wx / denom[:, None]


# ---- prediction intervals -------------------------------------------------------


pi_direct = ci_direct


def pi_inverse(point: float, variance: float, alpha: float, family: Family) -> Interval:
    """Link-scale Wald prediction interval, back-transformed per family."""
    if family is Family.LOGISTIC:
        return ci_inverse_logit(point, variance, alpha)
    return ci_inverse_log(point, variance, alpha)


def conditional_estimates(fitted: FittedModel, alpha: float = 0.05) -> dict[str, GroupMeanEstimate]:
    """Predicted group means with direct and inverse prediction intervals."""
    gi = fitted.dataset.group_index
    out: dict[str, GroupMeanEstimate] = {}
    for gid in gi.group_ids:
        point = conditional_group_mean(fitted, gid)
        variance = conditional_group_variance(fitted, gid)
        intervals = {
            "direct": pi_direct(point, variance, alpha),
            "inverse": pi_inverse(point, variance, alpha, fitted.spec.family),
        }
        out[gid] = GroupMeanEstimate(
            group_id=gid,
            kind=MeanKind.CONDITIONAL,
            point=point,
            variance=variance,
            n_obs=gi.size(gid),
            intervals=intervals,
        )
    return out
