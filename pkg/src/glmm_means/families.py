"""Response-family kernels shared by the fitter and the prediction machinery.

Each family exposes the per-observation conditional log-density, its first
two derivatives in the linear predictor, the inverse link, and a sampler.
`aux` carries the negative-binomial size parameter and is ignored elsewhere.
All functions broadcast over numpy arrays.
"""

from __future__ import annotations

import enum

import numpy as np
from scipy.special import digamma, gammaln


class Family(enum.Enum):
    LOGISTIC = "logistic"
    NEGBIN = "negbin"

    @property
    def link_name(self) -> str:
        return "logit" if self is Family.LOGISTIC else "log"


def stable_expit(eta):
    """exp(eta)/(1+exp(eta)) without overflow on either tail."""
    eta = np.asarray(eta, dtype=float)
    z = np.exp(-np.abs(eta))
    out = np.where(eta >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return out if out.ndim else float(out)


class _Logistic:
    name = "logistic"
    sigma0_2 = 1.0

    @staticmethod
    def loglik(y, eta, aux=None):
        # log pmf of Bernoulli(expit(eta)); logaddexp(0, eta) = log(1 + e^eta)
        return y * eta - np.logaddexp(0.0, eta)

    @staticmethod
    def score_eta(y, eta, aux=None):
        return y - stable_expit(eta)

    @staticmethod
    def fisher_weight(eta, aux=None):
        p = stable_expit(eta)
        return p * (1.0 - p)

    @staticmethod
    def obs_curvature(y, eta, aux=None):
        p = stable_expit(eta)
        return p * (1.0 - p)

    @staticmethod
    def inverse_link(eta):
        return stable_expit(eta)

    @staticmethod
    def dinverse_link(eta):
        p = stable_expit(eta)
        return p * (1.0 - p)

    @staticmethod
    def variance(mu, aux=None):
        return mu * (1.0 - mu)

    @staticmethod
    def sample(rng, mu, aux=None):
        return rng.binomial(1, mu).astype(float)

    @staticmethod
    def validate_response(y):
        return np.all((y == 0.0) | (y == 1.0))


class _NegBinomial:
    """Negative binomial with mean mu = exp(eta) and size kappa.

    Var(Y) = mu + mu^2 / kappa.  Stable forms use mu/(mu+kappa) =
    expit(eta - log kappa) so large eta never materializes exp(eta).
    """

    name = "negbin"
    sigma0_2 = 1.0

    @staticmethod
    def loglik(y, eta, aux):
        kappa = aux
        logk = np.log(kappa)
        const = gammaln(y + kappa) - gammaln(kappa) - gammaln(y + 1.0) + kappa * logk
        return const + y * eta - (y + kappa) * np.logaddexp(logk, eta)

    @staticmethod
    def score_eta(y, eta, aux):
        kappa = aux
        return y - (y + kappa) * stable_expit(eta - np.log(kappa))

    @staticmethod
    def score_kappa(y, eta, aux):
        kappa = aux
        logk = np.log(kappa)
        frac = stable_expit(logk - eta)  # kappa / (kappa + mu)
        return (
            digamma(y + kappa)
            - digamma(kappa)
            + logk
            + 1.0
            - np.logaddexp(logk, eta)
            - (y + kappa) * frac / kappa
        )

    @staticmethod
    def fisher_weight(eta, aux):
        kappa = aux
        # mu * kappa / (mu + kappa)
        return kappa * stable_expit(eta - np.log(kappa))

    @staticmethod
    def obs_curvature(y, eta, aux):
        kappa = aux
        s = stable_expit(eta - np.log(kappa))  # mu / (mu + kappa)
        return (y + kappa) * s * (1.0 - s)

    @staticmethod
    def inverse_link(eta):
        return np.exp(eta)

    @staticmethod
    def dinverse_link(eta):
        return np.exp(eta)

    @staticmethod
    def variance(mu, aux):
        return mu + mu * mu / aux

    @staticmethod
    def sample(rng, mu, aux):
        kappa = aux
        return rng.negative_binomial(kappa, kappa / (kappa + mu)).astype(float)

    @staticmethod
    def validate_response(y):
        return np.all((y >= 0.0) & (y == np.floor(y)))


class _Gaussian:
    """Identity-link Gaussian with unit dispersion.

    Not part of the public model surface; used internally so the
    prediction-variance machinery can be checked against closed-form
    linear-mixed-model results, where the Laplace approximation is exact.
    """

    name = "gaussian"
    sigma0_2 = 1.0

    @staticmethod
    def loglik(y, eta, aux=None):
        return -0.5 * (y - eta) ** 2 - 0.5 * np.log(2.0 * np.pi)

    @staticmethod
    def score_eta(y, eta, aux=None):
        return y - eta

    @staticmethod
    def fisher_weight(eta, aux=None):
        return np.ones_like(np.asarray(eta, dtype=float))

    @staticmethod
    def obs_curvature(y, eta, aux=None):
        return np.ones_like(np.asarray(eta, dtype=float))

    @staticmethod
    def inverse_link(eta):
        return np.asarray(eta, dtype=float)

    @staticmethod
    def dinverse_link(eta):
        return np.ones_like(np.asarray(eta, dtype=float))

    @staticmethod
    def sample(rng, mu, aux=None):
        return rng.normal(mu, 1.0)

    @staticmethod
    def validate_response(y):
        return True


LOGISTIC_OPS = _Logistic()
NEGBIN_OPS = _NegBinomial()
GAUSSIAN_OPS = _Gaussian()

_OPS = {Family.LOGISTIC: LOGISTIC_OPS, Family.NEGBIN: NEGBIN_OPS}


def family_ops(family: Family):
    return _OPS[family]
