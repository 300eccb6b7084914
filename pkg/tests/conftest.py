"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from glmm_means import (
    Dataset,
    Family,
    FitConfig,
    FittedModel,
    ModelSpec,
    ParamVector,
    SubjectBlock,
    fit,
)
from glmm_means.fitter import _Workspace


def toy_dataset(family, K=12, n=3, sigma=0.4, seed=5, kappa=8.0, beta=(0.2, -0.6)):
    """Small two-covariate dataset with alternating group labels."""
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta, float)
    subjects = []
    for i in range(K):
        x = np.column_stack([np.ones(n), rng.uniform(-1.0, 1.0, size=n)])
        b = rng.normal(0.0, sigma)
        eta = x @ beta + b
        if family is Family.LOGISTIC:
            y = rng.binomial(1, 1.0 / (1.0 + np.exp(-eta))).astype(float)
        else:
            mu = np.exp(eta)
            y = rng.negative_binomial(kappa, kappa / (kappa + mu)).astype(float)
        groups = tuple("g0" if j % 2 == 0 else "g1" for j in range(n))
        subjects.append(SubjectBlock(subject_id=f"s{i}", y=y, X=x, groups=groups))
    return Dataset(subjects)


def manual_fitted(dataset, family, beta, sigma2, kappa=None, cov=None, gh_nodes=25):
    """FittedModel at hand-picked parameters, with modes solved consistently."""
    spec = ModelSpec(family=family, p=len(beta))
    ws = _Workspace(dataset, family, gh_nodes)
    beta = np.asarray(beta, float)
    if sigma2 == 0.0:
        modes = np.zeros(dataset.n_subjects)
        curv = np.full(dataset.n_subjects, np.inf)
    else:
        modes, curv = ws.solve_modes(beta, sigma2, kappa)
    dim = len(beta) + 1 + (1 if family is Family.NEGBIN else 0)
    cov = np.zeros((dim, dim)) if cov is None else np.asarray(cov, float)
    return FittedModel(
        dataset=dataset,
        spec=spec,
        config=FitConfig(gh_nodes=gh_nodes),
        params=ParamVector(beta=beta, sigma2=sigma2, kappa=kappa),
        cov_psi=cov,
        cond_modes=modes,
        cond_curvatures=curv,
        loglik=float("nan"),
        converged=True,
        iterations=0,
        optimizer_used="manual",
        score_norm=0.0,
    )


@pytest.fixture(scope="session")
def logistic_toy_fit():
    ds = toy_dataset(Family.LOGISTIC, K=40, n=3, sigma=0.5, seed=11)
    return fit(ds, ModelSpec(family=Family.LOGISTIC, p=2), FitConfig())


@pytest.fixture(scope="session")
def time_study_r200():
    """Time-design logistic study shared by the slower Monte Carlo checks."""
    import glmm_means as gm

    design = gm.logistic_design(control="time", replications=200, seed=424)
    return design, gm.run_study(design, return_records=True)


@pytest.fixture(scope="session")
def negbin_toy_fit():
    ds = toy_dataset(Family.NEGBIN, K=40, n=3, sigma=0.3, seed=12, beta=(0.4, 0.5))
    return fit(ds, ModelSpec(family=Family.NEGBIN, p=2), FitConfig())
