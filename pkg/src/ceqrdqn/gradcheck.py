"""Finite-difference audit of every loss.

Each case draws random valid inputs, rejecting draws that sit within ``MARGIN`` of
a kink (Huber threshold, indicator switch), where the derivative is undefined.
Two modes: gradients w.r.t. the loss inputs directly, and w.r.t. the parameters
of a small two-layer network whose outputs feed the loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from .nnet import MLP, Tensor, numeric_grad, softplus_np

H = 1e-5
TOLERANCE = 1e-4
# Denominator floor for the relative error so that near-zero gradients are
# compared on an absolute scale instead of amplifying round-off.
REL_FLOOR = 1e-3
MARGIN = 1e-3


@dataclass
class LossCase:
    name: str
    term: str
    make: Callable[[np.random.Generator], dict]
    fn: Callable[..., Tensor]
    margin_ok: Callable[[dict], bool]
    positive: tuple = ()  # names that need v/beta > 0
    above_one: tuple = ()  # names that need alpha > 1


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _far(x, points, margin=MARGIN) -> bool:
    x = np.asarray(x)
    return all(np.all(np.abs(x - p) > margin) for p in points)


def _nig(rng, shape=()):
    return dict(
        gamma=rng.normal(size=shape),
        v=rng.uniform(0.2, 5.0, size=shape),
        alpha=rng.uniform(1.2, 5.0, size=shape),
        beta=rng.uniform(0.2, 5.0, size=shape),
    )


KAPPA = 1.0
Q = 0.95


def _cases(B: int, N: int) -> list[LossCase]:
    E = 2 * B  # size of the elementwise cases
    levels = L.midpoint_levels(N)

    def qr_margin(d):
        u = d["target"][..., :, None] - d["theta"][..., None, :]
        return _far(u, [0.0, KAPPA, -KAPPA])

    def cal_margin(d):
        u = d["y"][..., :, None] - d["yhat"][..., None, :]
        return _far(u, [0.0])

    def band_margin(d):
        return _far(d["y"] - d["lo"], [0.0]) and _far(d["y"] - d["hi"], [0.0])

    def el_parts(y, gamma, v, alpha, beta):
        parts = L.el_loss_components((gamma, v, alpha, beta), y, L.LossWeights())
        return parts

    def el_margin(d):
        return _far(d["y"] - d["gamma"][..., 0, :], [0.0]) and _far(d["y"] - d["gamma"][..., 1, :], [0.0])

    def el_make(rng):
        d = _nig(rng, (B, 2, N))
        d["gamma"] = np.sort(d["gamma"], axis=1)
        d["y"] = rng.normal(size=(B, N))
        return d

    return [
        LossCase("huber", "Huber",
                 lambda r: dict(e=r.normal(scale=2.0, size=E)),
                 lambda e: L.huber(e, KAPPA).sum(),
                 lambda d: _far(d["e"], [KAPPA, -KAPPA])),
        LossCase("quantile_huber", "quantile Huber",
                 lambda r: dict(e=r.normal(scale=2.0, size=E)),
                 lambda e: L.quantile_huber(e, np.linspace(0.1, 0.9, E), KAPPA).sum(),
                 lambda d: _far(d["e"], [0.0, KAPPA, -KAPPA])),
        LossCase("qr_loss", "pairwise QR",
                 lambda r: dict(theta=r.normal(size=(B, N)), target=r.normal(size=(B, N))),
                 lambda theta, target: L.qr_loss(theta, target, levels, KAPPA),
                 qr_margin),
        LossCase("tilted_loss", "pinball",
                 lambda r: dict(y=r.normal(size=E), yhat=r.normal(size=E)),
                 lambda y, yhat: L.tilted_loss(y, yhat, Q).sum(),
                 lambda d: _far(d["y"] - d["yhat"], [0.0])),
        LossCase("evidential_reg", "evidence x tilted",
                 lambda r: dict(y=r.normal(size=E), yhat=r.normal(size=E), **_nig(r, E)),
                 lambda y, yhat, gamma, v, alpha, beta: L.evidential_reg(y, yhat, Q, (gamma, v, alpha, beta)).sum(),
                 lambda d: _far(d["y"] - d["yhat"], [0.0]),
                 positive=("v", "beta"), above_one=("alpha",)),
        LossCase("evidential_nll", "Student-t NLL",
                 lambda r: dict(y=r.normal(size=E), **_nig(r, E)),
                 lambda y, gamma, v, alpha, beta: L.evidential_nll(y, (gamma, v, alpha, beta)).sum(),
                 lambda d: True,
                 positive=("v", "beta"), above_one=("alpha",)),
        LossCase("evidential_loss", "NLL + reg",
                 lambda r: dict(y=r.normal(size=E), **_nig(r, E)),
                 lambda y, gamma, v, alpha, beta: L.evidential_loss(y, Q, (gamma, v, alpha, beta), 0.5).sum(),
                 lambda d: _far(d["y"] - d["gamma"], [0.0]),
                 positive=("v", "beta"), above_one=("alpha",)),
        LossCase("coverage_objective", "coverage",
                 lambda r: dict(yhat=np.sort(r.normal(size=(B, N)), axis=1), y=r.normal(size=(B, N))),
                 lambda yhat, y: L.coverage_objective(yhat, y, levels),
                 cal_margin),
        LossCase("sharpness_objective", "sharpness",
                 lambda r: dict(yhat=np.sort(r.normal(size=(B, N)), axis=1)),
                 lambda yhat: L.sharpness_objective(yhat, levels),
                 lambda d: True),
        LossCase("cal_loss", "calibration",
                 lambda r: dict(yhat=np.sort(r.normal(size=(B, N)), axis=1), y=r.normal(size=(B, N))),
                 lambda yhat, y: L.cal_loss(yhat, y, levels, 0.5),
                 cal_margin),
        LossCase("band_cal_loss", "band calibration",
                 lambda r: dict(lo=r.normal(size=(B, N)) - 1.0, hi=r.normal(size=(B, N)) + 1.0,
                                y=r.normal(scale=1.5, size=(B, N))),
                 lambda lo, hi, y: L.band_cal_loss(lo, hi, y, 0.9, 0.5),
                 band_margin),
        LossCase("interval_loss", "interval score",
                 lambda r: dict(lo=r.normal(size=(B, N)) - 1.0, hi=r.normal(size=(B, N)) + 1.0,
                                y=r.normal(scale=1.5, size=(B, N))),
                 lambda lo, hi, y: L.interval_loss(lo, hi, y, 0.1),
                 band_margin),
        LossCase("total_Z_loss", "L_Z total",
                 lambda r: dict(theta=np.sort(r.normal(size=(B, N)), axis=1), target=r.normal(size=(B, N))),
                 lambda theta, target: L.combine_z(L.z_loss_components(theta, target, L.LossWeights())),
                 qr_margin),
        LossCase("total_EL_loss", "L_EL total",
                 el_make,
                 lambda y, gamma, v, alpha, beta: L.combine_el(el_parts(y, gamma, v, alpha, beta), L.LossWeights()),
                 el_margin,
                 positive=("v", "beta"), above_one=("alpha",)),
    ]


CASES = _cases(4, 5)
# Narrow shapes so the composed network stays within 100 parameters.
SMALL_CASES = {c.name: c for c in _cases(1, 2)}


def _draw(case: LossCase, rng: np.random.Generator, max_tries: int = 1000) -> dict:
    for _ in range(max_tries):
        d = case.make(rng)
        if case.margin_ok(d):
            return d
    raise RuntimeError(f"{case.name}: could not draw an input away from kinks")


def check_direct(case: LossCase, rng: np.random.Generator, corrupt: bool = False) -> float:
    """Max relative error of d(loss)/d(inputs) for one random draw."""
    d = _draw(case, rng)
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in d.items()}
    out = case.fn(**tensors)
    out.backward()
    arrays = {k: v.copy() for k, v in d.items()}
    worst = 0.0
    for k, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if corrupt:
            analytic = analytic * 1.01 + 1e-2
        numeric = numeric_grad(lambda: float(case.fn(**arrays)), arrays[k], H)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _composed_builder(case: LossCase, d: dict):
    """Map network outputs onto the loss inputs; positive entries go through softplus.

    Inputs that are not fed by the network (targets) stay fixed. Returns a
    function of the network output and the target arrays.
    """
    fed = [k for k in d if k not in ("y", "target")]
    sizes = [d[k].size for k in fed]
    offsets = np.cumsum([0] + sizes)

    def build(out):
        kwargs = {}
        for k, a, b in zip(fed, offsets[:-1], offsets[1:]):
            t = out[:, a:b].reshape(d[k].shape)
            if k in case.positive:
                t = t.softplus() if isinstance(t, Tensor) else softplus_np(t)
            elif k in case.above_one:
                t = t.softplus() + 1.0 if isinstance(t, Tensor) else softplus_np(t) + 1.0
            kwargs[k] = t
        for k in d:
            if k not in kwargs:
                kwargs[k] = d[k]
        return kwargs

    return build, int(offsets[-1])


def check_composed(case: LossCase, rng: np.random.Generator, max_tries: int = 200) -> float:
    """Max relative error of d(loss)/d(network params) through a 2-layer MLP (<= 100 params)."""
    template = case.make(rng)
    _, width = _composed_builder(case, template)
    # One input row, two hidden units per output block is too many parameters for
    # wide losses, so keep the hidden layer small and the input 2-d.
    hidden = max(2, min(6, (100 - width) // (3 + width)))
    for _ in range(max_tries):
        d = case.make(rng)
        net = MLP([2, hidden, width], seed=rng)
        for p in net.params.values():
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
        x = rng.normal(size=(1, 2))
        build, _ = _composed_builder(case, d)
        values = build(net(x).data)
        if case.margin_ok({k: np.asarray(getattr(v, "data", v)) for k, v in values.items()}):
            break
    else:
        raise RuntimeError(f"{case.name}: no composed draw away from kinks")
    assert net.num_parameters() <= 100, net.num_parameters()
    net.zero_grad()
    case.fn(**build(net(x))).backward()
    worst = 0.0
    for name, p in net.params.items():
        f = lambda: float(case.fn(**build(net(x).data)))  # noqa: E731
        numeric = numeric_grad(f, p.data, H)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def run_suite(trials: int = 50, composed_trials: int = 10, seed: int = 0,
              corrupt: str | None = None) -> list[dict]:
    """Runs every case; returns one row per loss with the worst relative error seen."""
    rng = np.random.default_rng(seed)
    rows = []
    for case in CASES:
        direct = max(check_direct(case, rng, corrupt=(case.name == corrupt)) for _ in range(trials))
        small = SMALL_CASES[case.name]
        composed = max((check_composed(small, rng) for _ in range(composed_trials)), default=0.0)
        worst = max(direct, composed)
        rows.append(dict(loss=case.name, term=case.term, trials=trials,
                         composed_trials=composed_trials, direct=direct, composed=composed,
                         max_rel_error=worst, passed=worst <= TOLERANCE))
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'loss':<22}{'term':<20}{'direct':>12}{'composed':>12}  status"]
    for r in rows:
        lines.append(f"{r['loss']:<22}{r['term']:<20}{r['direct']:>12.2e}{r['composed']:>12.2e}  "
                     f"{'PASS' if r['passed'] else 'FAIL'}")
    return "\n".join(lines)
