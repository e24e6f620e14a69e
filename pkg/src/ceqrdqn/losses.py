"""Training objectives, written on :class:`~ceqrdqn.nnet.Tensor` so they differentiate.

Every function also accepts floats / numpy arrays and returns a Tensor; call
``float()`` on scalar results.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evidential import PERCENTILE_LEVELS, DomainError
from .nnet import Tensor, as_tensor, where


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    kappa: float = 1.0
    lambda_reg: float = 0.5
    lambda_cal: float = 0.5
    coverage_p: float = 0.9
    interval_q: float = 0.1  # miscoverage rate in the interval score

    def __post_init__(self):
        if not self.kappa > 0:
            raise DomainError("kappa must be > 0")
        if not self.lambda_reg >= 0:
            raise DomainError("lambda_reg must be >= 0")
        if not 0 <= self.lambda_cal <= 1:
            raise DomainError("lambda_cal must be in [0, 1]")
        if not 0 < self.coverage_p < 1:
            raise DomainError("coverage_p must be in (0, 1)")
        if not 0 < self.interval_q < 1:
            raise DomainError("interval_q must be in (0, 1)")


def midpoint_levels(n: int) -> np.ndarray:
    """Quantile levels (2i - 1) / 2n, i = 1..n."""
    if n < 2:
        raise DomainError("need at least two quantiles")
    return (2 * np.arange(1, n + 1) - 1) / (2.0 * n)


def _nig(G):
    if hasattr(G, "gamma"):
        return G.gamma, G.v, G.alpha, G.beta
    gamma, v, alpha, beta = G
    return gamma, v, alpha, beta


# -- quantile regression ------------------------------------------------------

def huber(e, kappa: float = 1.0) -> Tensor:
    e = as_tensor(e)
    small = np.abs(e.data) <= kappa
    return where(small, 0.5 * e * e, kappa * (e.abs() - 0.5 * kappa))


def quantile_huber(e, q, kappa: float = 1.0) -> Tensor:
    """|q - 1{e < 0}| * huber(e) / kappa."""
    e = as_tensor(e)
    a = e.data
    weight = np.abs(np.asarray(q) - (a < 0))
    small = np.abs(a) <= kappa
    hub = np.where(small, 0.5 * a * a, kappa * (np.abs(a) - 0.5 * kappa))
    dhub = np.clip(a, -kappa, kappa)
    return Tensor._make(weight * hub / kappa, (e,), lambda g: (g * weight * dhub / kappa,))


def qr_loss(theta, target, levels=None, kappa: float = 1.0) -> Tensor:
    """Pairwise quantile Huber loss.

    theta: [..., N] predicted quantiles; target: [..., M] target samples.
    Per row: (1/M) * sum_i sum_j rho_{tau_i}(target_j - theta_i), averaged over
    leading dimensions. With M == N this is the usual QR-DQN objective.
    """
    theta, target = as_tensor(theta), as_tensor(target)
    if theta.ndim == 0 or target.ndim == 0 or theta.shape[:-1] != target.shape[:-1]:
        raise ShapeError(f"incompatible shapes {theta.shape} and {target.shape}")
    n, m = theta.shape[-1], target.shape[-1]
    if levels is None:
        levels = midpoint_levels(n) if n > 1 else np.array([0.5])
    levels = np.asarray(levels, dtype=np.float64)
    if levels.shape != (n,):
        raise ShapeError(f"{len(levels)} levels for {n} quantiles")
    # u[..., j, i] = target_j - theta_i
    u = target.data[..., :, None] - theta.data[..., None, :]
    weight = np.abs(levels - (u < 0))
    absu = np.abs(u)
    hub = np.where(absu <= kappa, 0.5 * u * u, kappa * (absu - 0.5 * kappa))
    rows = int(np.prod(theta.shape[:-1]))
    scale = 1.0 / (kappa * m * rows)
    value = np.sum(weight * hub) * scale

    def backward(g):
        gu = (g * scale) * weight * np.clip(u, -kappa, kappa)
        return -gu.sum(axis=-2), gu.sum(axis=-1)

    return Tensor._make(value, (theta, target), backward)


# -- evidential ---------------------------------------------------------------

def tilted_loss(y, yhat, q) -> Tensor:
    """q (y - yhat) if y >= yhat else (1 - q)(yhat - y)."""
    d = as_tensor(y) - as_tensor(yhat)
    over = d.data >= 0
    return where(over, np.asarray(q) * d, (1.0 - np.asarray(q)) * (-d))


def evidential_nll(y, G) -> Tensor:
    """Student-t negative log marginal likelihood of y under NIG parameters G."""
    gamma, v, alpha, beta = (as_tensor(t) for t in _nig(G))
    y = as_tensor(y)
    omega = 2.0 * beta * (1.0 + v)
    return (
        0.5 * (np.pi / v).log()
        - alpha * omega.log()
        + (alpha + 0.5) * ((y - gamma) ** 2 * v + omega).log()
        + alpha.lgamma() - (alpha + 0.5).lgamma()
    )


def total_evidence(G) -> Tensor:
    _, v, alpha, beta = (as_tensor(t) for t in _nig(G))
    return 2.0 * v + alpha + 1.0 / beta


def evidential_reg(y, yhat, q, G) -> Tensor:
    """Evidence-scaled tilted loss."""
    return total_evidence(G) * tilted_loss(y, yhat, q)


def evidential_loss(y, q, G, lambda_reg: float = 0.5) -> Tensor:
    """NLL + lambda_reg * evidence-weighted tilted loss; prediction is gamma."""
    gamma = _nig(G)[0]
    return evidential_nll(y, G) + lambda_reg * evidential_reg(y, gamma, q, G)


# -- calibration ----------------------------------------------------------------

def _as_batch(yhat: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
    """Bring predictions to [B, N] and targets to [B, M].

    A single prediction row [N] is shared by every target given.
    """
    if yhat.ndim == 1:
        return yhat.reshape(1, -1), y.reshape(1, -1)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if yhat.ndim != 2 or y.ndim != 2 or yhat.shape[0] != y.shape[0]:
        raise ShapeError(f"cannot align predictions {yhat.shape} with targets {y.shape}")
    return yhat, y


def empirical_coverage(yhat, y) -> np.ndarray:
    """Per-quantile fraction of targets at or below the predicted quantile.

    yhat: [B, N]; y: [B, M] (each row's targets are compared with each of that row's
    predicted quantiles). Returns [N].
    """
    yhat, y = _as_batch(as_tensor(yhat), as_tensor(y))
    if y.shape[0] == 0:
        raise DomainError("empty batch")
    below = y.data[:, :, None] <= yhat.data[:, None, :]
    return below.mean(axis=(0, 1))


def band_coverage(lower, upper, y) -> float:
    """Fraction of targets inside [lower, upper] (elementwise, broadcasting)."""
    lo, hi, y = (np.asarray(getattr(t, "data", t), dtype=np.float64) for t in (lower, upper, y))
    lo, hi, y = np.broadcast_arrays(lo, hi, y)
    if y.size == 0:
        raise DomainError("empty batch")
    return float(np.mean((y >= lo) & (y <= hi)))


def _complement_index(levels: np.ndarray) -> np.ndarray:
    idx = np.array([int(np.argmin(np.abs(levels - (1.0 - q)))) for q in levels])
    if not np.allclose(levels[idx], 1.0 - levels, atol=1e-9):
        raise DomainError("sharpness needs levels symmetric about 0.5")
    return idx


def coverage_objective(yhat, y, levels) -> Tensor:
    yhat, y = _as_batch(as_tensor(yhat), as_tensor(y))
    levels = np.asarray(levels, dtype=np.float64)
    p_cov = empirical_coverage(yhat, y)
    d = y.data[:, :, None] - yhat.data[:, None, :]  # [B, M, N]
    # +1 where the exceedance y - q is penalized, -1 where the shortfall q - y is
    sign = ((p_cov < levels)[None, None, :] & (d > 0)).astype(np.float64)
    sign -= (p_cov > levels)[None, None, :] & (d < 0)
    scale = 1.0 / d.size
    value = np.sum(sign * d) * scale

    def backward(g):
        gd = g * scale * sign
        return -gd.sum(axis=1), gd.sum(axis=2)

    return Tensor._make(value, (yhat, y), backward)


def sharpness_objective(yhat, levels) -> Tensor:
    yhat = as_tensor(yhat)
    if yhat.ndim == 1:
        yhat = yhat.reshape(1, -1)
    levels = np.asarray(levels, dtype=np.float64)
    comp = yhat[:, _complement_index(levels)]
    sign = np.where(levels <= 0.5, -1.0, 1.0)
    return (sign * (yhat - comp)).mean()


def cal_loss(yhat, y, levels, lambda_cal: float = 0.5) -> Tensor:
    """(1 - lambda_cal) * coverage objective + lambda_cal * sharpness objective.

    Coverage of quantile i is the batch fraction of targets at or below it; when it
    is under the level the exceedances above the quantile are penalized (pushing it
    up), when over the level the shortfalls below it are. Sharpness is the width
    between each quantile and the one at the complementary level.
    """
    return ((1.0 - lambda_cal) * coverage_objective(yhat, y, levels)
            + lambda_cal * sharpness_objective(yhat, levels))


def band_cal_loss(lower, upper, y, coverage_p: float = 0.9, lambda_cal: float = 0.5) -> Tensor:
    """Calibration of a [lower, upper] band to marginal coverage ``coverage_p``.

    Under-covered bands have both edges pushed outward toward escaping targets;
    over-covered bands have both edges pulled inward toward the targets they enclose.
    """
    lo, hi, y = as_tensor(lower), as_tensor(upper), as_tensor(y)
    if y.data.size == 0:
        raise DomainError("empty batch")
    p_cov = band_coverage(lo, hi, y)
    up = y - hi
    down = lo - y
    if p_cov < coverage_p:
        cov = where(up.data > 0, up, 0.0) + where(down.data > 0, down, 0.0)
    elif p_cov > coverage_p:
        cov = where(up.data < 0, -up, 0.0) + where(down.data < 0, -down, 0.0)
    else:
        cov = 0.0 * up
    cov = 0.5 * cov.mean()
    sharp = (hi - lo).mean()
    return (1.0 - lambda_cal) * cov + lambda_cal * sharp


def interval_loss(q5, q95, y, interval_q: float = 0.1) -> Tensor:
    """Interval score: width plus (2/q)-scaled violations, averaged over entries."""
    lo, hi, y = as_tensor(q5), as_tensor(q95), as_tensor(y)
    if lo.shape != hi.shape:
        raise ShapeError(f"band edges differ in shape: {lo.shape} vs {hi.shape}")
    scale = 2.0 / interval_q
    below = lo - y
    above = y - hi
    score = (hi - lo) + scale * where(below.data > 0, below, 0.0) + scale * where(above.data > 0, above, 0.0)
    return score.mean()


# -- totals -----------------------------------------------------------------------

def total_Z_loss(l_qr, l_cal) -> Tensor:
    return as_tensor(l_qr) + as_tensor(l_cal)


def total_EL_loss(l_evi, l_cal, l_interval) -> Tensor:
    return as_tensor(l_evi) + as_tensor(l_cal) + as_tensor(l_interval)


def z_loss_components(theta, target, weights: LossWeights, levels=None) -> dict[str, Tensor]:
    """Quantile-value losses for a batch: theta [B, N] against targets [B, M]."""
    theta = as_tensor(theta)
    if levels is None:
        levels = midpoint_levels(theta.shape[-1])
    return {
        "L_qr": qr_loss(theta, target, levels, weights.kappa),
        "L_cal_Z": cal_loss(theta, target, levels, weights.lambda_cal),
    }


def el_loss_components(nig, target, weights: LossWeights, level_axis: int = -2) -> dict[str, Tensor]:
    """Evidential losses for NIG parameters with a (5th, 95th) percentile axis.

    Each of gamma, v, alpha, beta is [..., 2, N] (``level_axis`` selects the
    percentile axis); ``target`` broadcasts against [..., N].
    """
    gamma, v, alpha, beta = (as_tensor(t) for t in _nig(nig))
    y = as_tensor(target)

    def level(t, k):
        idx = [slice(None)] * t.ndim
        idx[level_axis] = k
        return t[tuple(idx)]

    nll, reg = [], []
    for k, q in enumerate(PERCENTILE_LEVELS):
        G = (level(gamma, k), level(v, k), level(alpha, k), level(beta, k))
        nll.append(evidential_nll(y, G).mean())
        reg.append(evidential_reg(y, G[0], q, G).mean())
    l_nll = 0.5 * (nll[0] + nll[1])
    l_reg = 0.5 * (reg[0] + reg[1])
    lo, hi = level(gamma, 0), level(gamma, 1)
    return {
        "L_nll": l_nll,
        "L_reg": l_reg,
        "L_cal_EL": band_cal_loss(lo, hi, y, weights.coverage_p, weights.lambda_cal),
        "L_interval": interval_loss(lo, hi, y, weights.interval_q),
    }


def combine_z(parts: dict[str, Tensor]) -> Tensor:
    return total_Z_loss(parts["L_qr"], parts["L_cal_Z"])


def combine_el(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    return total_EL_loss(parts["L_nll"] + weights.lambda_reg * parts["L_reg"],
                         parts["L_cal_EL"], parts["L_interval"])
