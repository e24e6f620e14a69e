"""Supervised 1-D harness: calibrated evidential quantile regression on a noisy
function, trained on [-3, 3] and probed on a wider interval.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .evidential import DomainError
from .losses import LossWeights
from .nnet import MLP, AdamState, adam_step, evidential_transform, no_grad


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at training step {step}")
        self.step = step


def target_function(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sin(3 * x) * np.cos(2 * x) + 0.5 * np.exp(-x ** 2) + x ** 2 - 0.1 * x


def noise_variance(x):
    return 1.5 * np.exp(-0.4 * np.abs(np.asarray(x, dtype=np.float64)))


def noise_sd(x):
    return np.sqrt(noise_variance(x))


@dataclass
class SyntheticDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    train_range: tuple[float, float] = (-3.0, 3.0)
    test_range: tuple[float, float] = (-5.0, 5.0)

    def in_distribution(self, x) -> np.ndarray:
        lo, hi = self.train_range
        return (x >= lo) & (x <= hi)


def generate(n_train: int = 2000, n_test: int = 1000, seed: int = 0,
             train_range=(-3.0, 3.0), test_range=(-5.0, 5.0), noise_scale: float = 1.0) -> SyntheticDataset:
    """Draw x uniformly on each range and y = f(x) + N(0, noise_scale * 1.5 exp(-0.4|x|))."""
    if n_train <= 0 or n_test <= 0:
        raise DomainError("sample counts must be positive")
    if test_range[0] > train_range[0] or test_range[1] < train_range[1]:
        raise DomainError("test range must contain the train range")
    rng = np.random.default_rng(seed)
    x_train = rng.uniform(*train_range, size=n_train)
    x_test = rng.uniform(*test_range, size=n_test)
    sd = math.sqrt(noise_scale)
    y_train = target_function(x_train) + sd * noise_sd(x_train) * rng.standard_normal(n_train)
    y_test = target_function(x_test) + sd * noise_sd(x_test) * rng.standard_normal(n_test)
    return SyntheticDataset(x_train, y_train, x_test, y_test, tuple(train_range), tuple(test_range))


@dataclass(frozen=True)
class SyntheticConfig:
    hidden: int = 64
    steps: int = 3000
    batch_size: int = 128
    learning_rate: float = 3e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)


class EvidentialRegressor:
    """Dense net emitting (gamma, v, alpha, beta) at the 5th and 95th percentile levels.

    Inputs and targets are standardized with training statistics; predictions are
    mapped back to data units (variances scale with the target SD squared).
    """

    def __init__(self, cfg: SyntheticConfig):
        self.cfg = cfg
        self.net = MLP([1, cfg.hidden, cfg.hidden, 8], seed=cfg.seed)
        self.adam = AdamState(learning_rate=cfg.learning_rate)
        self.x_mu = 0.0
        self.x_sd = 1.0
        self.y_mu = 0.0
        self.y_sd = 1.0

    def _outputs(self, x):
        xs = ((np.asarray(x, dtype=np.float64) - self.x_mu) / self.x_sd).reshape(-1, 1)
        raw = self.net(xs).reshape(-1, 4, 2, 1)
        return evidential_transform(raw, axis=1)  # each [B, 2, 1]

    def loss_parts(self, x, y) -> dict:
        ys = ((np.asarray(y, dtype=np.float64) - self.y_mu) / self.y_sd).reshape(-1, 1)
        return losses.el_loss_components(self._outputs(x), ys, self.cfg.weights)

    def fit(self, x, y, rng: np.random.Generator, track=None) -> list[dict]:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.x_mu, self.x_sd = float(x.mean()), float(x.std())
        self.y_mu, self.y_sd = float(y.mean()), float(y.std()) or 1.0
        history = []
        for step in range(self.cfg.steps):
            idx = rng.integers(0, len(x), size=self.cfg.batch_size)
            parts = self.loss_parts(x[idx], y[idx])
            total = losses.combine_el(parts, self.cfg.weights)
            value = float(total)
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            self.net.zero_grad()
            total.backward()
            adam_step(self.net.params, None, self.adam)
            rec = {"step": step, "loss": value, **{k: float(v) for k, v in parts.items()}}
            if track is not None:
                rec.update(track(self))
            history.append(rec)
        return history

    def predict(self, x) -> dict[str, np.ndarray]:
        with no_grad():
            gamma, v, alpha, beta = (t.data[..., 0] for t in self._outputs(x))  # [B, 2]
        s2 = self.y_sd ** 2
        aleatoric = beta / (alpha - 1) * s2
        epistemic = beta / (v * (alpha - 1)) * s2
        gamma = gamma * self.y_sd + self.y_mu
        return {
            "q5": gamma[:, 0],
            "q95": gamma[:, 1],
            "aleatoric": aleatoric.mean(axis=1),
            "epistemic": epistemic.mean(axis=1),
        }


@dataclass
class SyntheticReport:
    seed: int
    coverage_in: float
    coverage_out: float
    epistemic_in: float
    epistemic_ood: float
    epistemic_ratio: float
    aleatoric_in: float
    aleatoric_ood: float
    final_loss: float
    curves: dict = field(repr=False, default_factory=dict)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("curves")
        return d


def fit_and_evaluate(dataset: SyntheticDataset, cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticReport:
    model = EvidentialRegressor(cfg)
    history = model.fit(dataset.x_train, dataset.y_train, np.random.default_rng(cfg.seed + 1))
    order = np.argsort(dataset.x_test)
    x, y = dataset.x_test[order], dataset.y_test[order]
    pred = model.predict(x)
    inside = dataset.in_distribution(x)
    ood = (np.abs(x) >= 4) & (np.abs(x) <= 5)
    cov_in = losses.band_coverage(pred["q5"][inside], pred["q95"][inside], y[inside])
    cov_out = losses.band_coverage(pred["q5"][~inside], pred["q95"][~inside], y[~inside]) if (~inside).any() else math.nan
    ep_in = float(pred["epistemic"][inside].mean())
    ep_ood = float(pred["epistemic"][ood].mean()) if ood.any() else math.nan
    curves = {"x": x, "y_true": y, **pred, "in_distribution": inside}
    return SyntheticReport(
        seed=cfg.seed, coverage_in=cov_in, coverage_out=cov_out, epistemic_in=ep_in,
        epistemic_ood=ep_ood, epistemic_ratio=ep_ood / ep_in,
        aleatoric_in=float(pred["aleatoric"][inside].mean()),
        aleatoric_ood=float(pred["aleatoric"][ood].mean()) if ood.any() else math.nan,
        final_loss=history[-1]["loss"], curves=curves,
    )


CURVE_FIELDS = ("x", "y_true", "q5", "q95", "aleatoric", "epistemic", "in_distribution")


def write_curves(path, report: SyntheticReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        c = report.curves
        for i in range(len(c["x"])):
            w.writerow([repr(float(c[k][i])) for k in CURVE_FIELDS[:-1]] + [int(c["in_distribution"][i])])
