"""Normal-Inverse-Gamma (NIG) evidential distribution.

All functions take plain floats or numpy arrays. The autodiff versions used in
training live in :mod:`ceqrdqn.losses`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special

LOWER, UPPER = 0, 1  # percentile-level axis: 5th, 95th
PERCENTILE_LEVELS = (0.05, 0.95)


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class NIGParams:
    """Evidential parameters (gamma, v, alpha, beta) with v > 0, alpha > 1, beta > 0."""

    gamma: float
    v: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.v > 0:
            raise DomainError(f"v must be > 0, got {self.v}")
        if not self.alpha > 1:
            raise DomainError(f"alpha must be > 1, got {self.alpha}")
        if not self.beta > 0:
            raise DomainError(f"beta must be > 0, got {self.beta}")

    def __iter__(self):
        return iter((self.gamma, self.v, self.alpha, self.beta))


class UncertaintyEstimate(NamedTuple):
    prediction: float
    aleatoric: float
    epistemic: float


@dataclass(frozen=True)
class NIGQuantileSet:
    """Evidential parameters indexed [action, percentile level (5th, 95th), quantile]."""

    gamma: np.ndarray
    v: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.gamma)
        if len(shape) != 3 or shape[1] != 2:
            raise DomainError(f"expected shape [A, 2, N], got {shape}")
        for name in ("v", "alpha", "beta"):
            if np.shape(getattr(self, name)) != shape:
                raise DomainError(f"{name} shape {np.shape(getattr(self, name))} != gamma shape {shape}")
        if not (np.all(self.v > 0) and np.all(self.alpha > 1) and np.all(self.beta > 0)):
            raise DomainError("NIG constraints violated (need v > 0, alpha > 1, beta > 0)")

    @classmethod
    def from_tensors(cls, nig) -> "NIGQuantileSet":
        return cls(*(np.asarray(getattr(t, "data", t), dtype=np.float64) for t in nig))

    @property
    def num_actions(self) -> int:
        return self.gamma.shape[0]

    @property
    def num_quantiles(self) -> int:
        return self.gamma.shape[2]

    def params(self, a: int, level: int, i: int) -> NIGParams:
        return NIGParams(self.gamma[a, level, i], self.v[a, level, i],
                         self.alpha[a, level, i], self.beta[a, level, i])


def nig_density(mu, sigma2, G) -> float:
    """Joint density p(mu, sigma^2 | gamma, v, alpha, beta)."""
    gamma, v, alpha, beta = G
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise DomainError("sigma2 must be > 0")
    log_p = (
        alpha * np.log(beta) + 0.5 * np.log(v) - special.gammaln(alpha)
        - 0.5 * np.log(2 * np.pi * sigma2)
        - (alpha + 1) * np.log(sigma2)
        - (2 * beta + v * (gamma - np.asarray(mu)) ** 2) / (2 * sigma2)
    )
    return np.exp(log_p)


def student_t_params(G) -> tuple[float, float, float]:
    """(location, scale^2, degrees of freedom) of the marginal p(y | G)."""
    gamma, v, alpha, beta = G
    return gamma, beta * (1 + v) / (v * alpha), 2 * alpha


def student_t_marginal_logpdf(y, G):
    loc, scale2, nu = student_t_params(G)
    z2 = (np.asarray(y, dtype=np.float64) - loc) ** 2 / scale2
    return (
        special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2)
        - 0.5 * np.log(nu * np.pi * scale2)
        - (nu + 1) / 2 * np.log1p(z2 / nu)
    )


def aleatoric(G):
    _, _, alpha, beta = G
    return beta / (alpha - 1)


def epistemic(G):
    _, v, alpha, beta = G
    return beta / (v * (alpha - 1))


def decompose(G) -> UncertaintyEstimate:
    """Prediction E[mu] = gamma, aleatoric E[sigma^2], epistemic Var[mu]."""
    gamma, v, _, _ = G
    al = aleatoric(G)
    return UncertaintyEstimate(gamma, al, al / v)


def total_evidence(G):
    """Phi = 2v + alpha + 1/beta."""
    _, v, alpha, beta = G
    return 2 * v + alpha + 1 / beta


def evidential_sd(v, alpha, beta):
    return np.sqrt(beta / (v * (alpha - 1)))


def action_uncertainties(nig: NIGQuantileSet, a: int | None = None):
    """Per-action (psi_ep, psi_al).

    The interval |(gamma + sd) - (gamma - sd)| around each percentile-level mean
    is exactly 2*sd, so it is computed that way. With ``a=None`` returns arrays
    over all actions.
    """
    sd = evidential_sd(nig.v, nig.alpha, nig.beta)  # [A, 2, N]
    width = 2.0 * sd
    psi_ep = (0.5 * (width[:, LOWER] + width[:, UPPER])).mean(axis=-1)
    psi_al = np.abs(nig.gamma[:, UPPER] - nig.gamma[:, LOWER]).mean(axis=-1)
    if a is None:
        return psi_ep, psi_al
    return float(psi_ep[a]), float(psi_al[a])
