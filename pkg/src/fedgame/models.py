"""Accuracy families and cost models.

Two accuracy families are provided: a closed-form quadratic bowl whose
precision grows with total contribution, and an empirical family that scores
a linear classifier on per-agent synthetic test sets.  Cost models are convex
with zero cost at zero contribution.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from math import ceil, log
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.special import logsumexp

from .core import ConfigError, ModelEvalError


@runtime_checkable
class AccuracyModel(Protocol):
    """Shared accuracy family with per-agent parameters inside."""

    @property
    def n_agents(self) -> int: ...

    @property
    def dim(self) -> int: ...

    def value(self, i: int, w: np.ndarray, s: np.ndarray) -> float: ...

    def grad_w(self, i: int, w: np.ndarray, s: np.ndarray) -> np.ndarray: ...

    def dsi(self, i: int, w: np.ndarray, s: np.ndarray) -> float: ...

    def manifest(self) -> dict: ...


@dataclass(frozen=True, eq=False)
class QuadraticAccuracy:
    """a_i(w, s) = r_i - |w - theta|^2 / (sigma0 + sum(s)).

    The bowl target theta is shared; r_i shifts agent i's ceiling.  sigma0
    regularises the denominator away from zero; instances that set it to 0
    must keep total contribution positive wherever they evaluate.
    """

    theta: np.ndarray
    r: np.ndarray
    sigma0: float = 1e-6

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float))
        if self.theta.ndim != 1 or self.r.ndim != 1:
            raise ConfigError("theta and r must be 1-d vectors")
        if self.sigma0 < 0.0:
            raise ConfigError("sigma0 must be nonnegative")

    @property
    def n_agents(self) -> int:
        return int(self.r.shape[0])

    @property
    def dim(self) -> int:
        return int(self.theta.shape[0])

    def _denom(self, s: np.ndarray) -> float:
        d = self.sigma0 + float(np.sum(s))
        if d <= 0.0:
            raise ModelEvalError("singular denominator: sigma0 + sum(s) <= 0")
        return d

    def _sq_dist(self, w: np.ndarray) -> float:
        diff = np.asarray(w, dtype=float) - self.theta
        return float(diff @ diff)

    def value(self, i: int, w: np.ndarray, s: np.ndarray) -> float:
        return float(self.r[i]) - self._sq_dist(w) / self._denom(s)

    def grad_w(self, i: int, w: np.ndarray, s: np.ndarray) -> np.ndarray:
        return 2.0 * (self.theta - np.asarray(w, dtype=float)) / self._denom(s)

    def dsi(self, i: int, w: np.ndarray, s: np.ndarray) -> float:
        return self._sq_dist(w) / self._denom(s) ** 2

    def manifest(self) -> dict:
        return {
            "family": "quadratic",
            "theta": [float(x) for x in self.theta],
            "r": [float(x) for x in self.r],
            "sigma0": float(self.sigma0),
        }


@dataclass(frozen=True, eq=False)
class CostModel:
    """Convex per-agent contribution costs with c_i(0) = 0.

    kind "linear": c_i(s) = coeff_i * s.
    kind "polynomial": c_i(s) = sum_k coeffs_i[k] * s^(k+1) with all
    coefficients nonnegative, hence convex and nondecreasing on s >= 0.
    """

    kind: str
    coeffs: tuple

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "polynomial"):
            raise ConfigError(f"unknown cost kind {self.kind!r}")
        if self.kind == "linear":
            vals = tuple(float(c) for c in self.coeffs)
            if any(c < 0.0 or not np.isfinite(c) for c in vals):
                raise ConfigError("linear cost coefficients must be finite and >= 0")
            object.__setattr__(self, "coeffs", vals)
        else:
            groups = tuple(tuple(float(c) for c in grp) for grp in self.coeffs)
            for grp in groups:
                if not grp:
                    raise ConfigError("polynomial cost needs at least one coefficient")
                if any(c < 0.0 or not np.isfinite(c) for c in grp):
                    raise ConfigError("polynomial cost coefficients must be finite and >= 0")
            object.__setattr__(self, "coeffs", groups)

    @classmethod
    def linear(cls, coeffs) -> "CostModel":
        return cls("linear", tuple(float(c) for c in np.atleast_1d(coeffs)))

    @classmethod
    def polynomial(cls, per_agent_coeffs) -> "CostModel":
        return cls("polynomial", tuple(tuple(g) for g in per_agent_coeffs))

    @property
    def n_agents(self) -> int:
        return len(self.coeffs)

    def value(self, i: int, s_i: float) -> float:
        if s_i < -1e-12:
            raise ConfigError("contribution below zero in cost evaluation")
        s_i = max(s_i, 0.0)
        if self.kind == "linear":
            return self.coeffs[i] * s_i
        return float(sum(c * s_i ** (k + 1) for k, c in enumerate(self.coeffs[i])))

    def deriv(self, i: int, s_i: float) -> float:
        if s_i < -1e-12:
            raise ConfigError("contribution below zero in cost derivative")
        s_i = max(s_i, 0.0)
        if self.kind == "linear":
            return float(self.coeffs[i])
        return float(sum((k + 1) * c * s_i ** k for k, c in enumerate(self.coeffs[i])))

    def second_deriv(self, i: int, s_i: float) -> float:
        if self.kind == "linear":
            return 0.0
        s_i = max(s_i, 0.0)
        return float(
            sum(k * (k + 1) * c * s_i ** (k - 1) for k, c in enumerate(self.coeffs[i]) if k >= 1)
        )

    def max_deriv(self, s_max: np.ndarray) -> float:
        """Largest marginal cost over the box; derivatives are nondecreasing."""
        return max(self.deriv(i, float(s_max[i])) for i in range(self.n_agents))

    def manifest(self) -> dict:
        return {"kind": self.kind, "coeffs": [list(np.atleast_1d(c)) for c in self.coeffs]}


# ---------------------------------------------------------------------------
# Synthetic datasets and the empirical accuracy family.


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    """Feature matrix plus integer labels for one agent."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=int))
        if self.features.ndim != 2:
            raise ConfigError("features must be a 2-d array")
        if self.labels.shape != (self.features.shape[0],):
            raise ConfigError("labels must match the number of rows")

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])


def synth_dataset(
    seed: int,
    n_agents: int,
    train_sizes,
    test_size: int,
    n_features: int,
    n_classes: int,
    separation: float = 3.0,
) -> tuple[list[SyntheticDataset], list[SyntheticDataset]]:
    """Draw per-agent Gaussian class blobs, identical distribution across agents.

    Class means are fixed unit directions scaled by `separation`; samples are
    unit-variance Gaussians around them.  Everything is deterministic in the
    seed: the same arguments always regenerate bit-identical arrays.
    """
    if n_classes < 2:
        raise ConfigError("need at least two classes")
    if n_features < 1 or test_size < 1:
        raise ConfigError("n_features and test_size must be positive")
    sizes = [int(t) for t in np.atleast_1d(train_sizes)]
    if len(sizes) == 1:
        sizes = sizes * n_agents
    if len(sizes) != n_agents or any(t < 1 for t in sizes):
        raise ConfigError("bad per-agent train sizes")

    children = np.random.SeedSequence(seed).spawn(1 + n_agents)
    mean_rng = np.random.default_rng(children[0])
    directions = mean_rng.normal(size=(n_classes, n_features))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions

    def draw(rng: np.random.Generator, count: int) -> SyntheticDataset:
        labels = rng.integers(0, n_classes, size=count)
        feats = means[labels] + rng.normal(size=(count, n_features))
        return SyntheticDataset(feats, labels)

    train, test = [], []
    for i in range(n_agents):
        child = np.random.default_rng(children[1 + i])
        train.append(draw(child, sizes[i]))
        test.append(draw(child, test_size))
    return train, test


def dataset_to_csv(ds: SyntheticDataset) -> str:
    """Render a dataset as CSV: feature columns f0..f{d-1}, then `label`."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"f{j}" for j in range(ds.n_features)] + ["label"])
    for row, lab in zip(ds.features, ds.labels):
        writer.writerow([repr(float(x)) for x in row] + [int(lab)])
    return buf.getvalue()


def dataset_from_csv(text: str) -> SyntheticDataset:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if not header or header[-1] != "label":
        raise ConfigError("dataset CSV must end with a `label` column")
    feats, labels = [], []
    for row in reader:
        if not row:
            continue
        feats.append([float(x) for x in row[:-1]])
        labels.append(int(row[-1]))
    return SyntheticDataset(np.array(feats, dtype=float), np.array(labels, dtype=int))


def _as_weight_matrix(w: np.ndarray, n_classes: int, n_features: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (n_classes * n_features,):
        raise ConfigError("parameter vector length must be classes * features")
    return w.reshape(n_classes, n_features)


def cross_entropy(w: np.ndarray, ds: SyntheticDataset, n_classes: int) -> float:
    """Mean cross-entropy of the linear classifier logits = W x on `ds`."""
    wm = _as_weight_matrix(w, n_classes, ds.n_features)
    logits = ds.features @ wm.T
    lse = logsumexp(logits, axis=1)
    picked = logits[np.arange(ds.size), ds.labels]
    return float(np.mean(lse - picked))


def cross_entropy_grad(w: np.ndarray, ds: SyntheticDataset, n_classes: int) -> np.ndarray:
    wm = _as_weight_matrix(w, n_classes, ds.n_features)
    logits = ds.features @ wm.T
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(ds.size), ds.labels] -= 1.0
    grad = probs.T @ ds.features / ds.size
    return grad.reshape(-1)


@dataclass(frozen=True)
class LocalStep:
    """Outcome of one local training step; degenerate means nothing was used."""

    w: np.ndarray
    n_used: int
    degenerate: bool


@dataclass(frozen=True, eq=False)
class EmpiricalAccuracy:
    """a_i(w, s) = r_i - test cross-entropy of a linear classifier.

    The test loss does not depend on s, so the own-contribution derivative of
    this family is defined as zero; contribution sensitivity comes from the
    numerical difference-quotient updater in the dynamics module instead.
    Agent i trains on the first ceil(s_i) rows of its train set.
    """

    train_sets: tuple[SyntheticDataset, ...]
    test_sets: tuple[SyntheticDataset, ...]
    r: np.ndarray
    n_classes: int
    data_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "train_sets", tuple(self.train_sets))
        object.__setattr__(self, "test_sets", tuple(self.test_sets))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float))
        if len(self.train_sets) != len(self.test_sets):
            raise ConfigError("need one test set per train set")
        if self.r.shape != (len(self.train_sets),):
            raise ConfigError("r must have one entry per agent")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")

    @classmethod
    def default_offset(cls, n_classes: int) -> float:
        """Offset that zeroes the accuracy of uniform logits: ln(classes)."""
        return log(n_classes)

    @property
    def n_agents(self) -> int:
        return len(self.train_sets)

    @property
    def n_features(self) -> int:
        return self.train_sets[0].n_features

    @property
    def dim(self) -> int:
        return self.n_classes * self.n_features

    def value(self, i: int, w: np.ndarray, s: np.ndarray) -> float:
        return float(self.r[i]) - cross_entropy(w, self.test_sets[i], self.n_classes)

    def grad_w(self, i: int, w: np.ndarray, s: np.ndarray) -> np.ndarray:
        return -cross_entropy_grad(w, self.test_sets[i], self.n_classes)

    def dsi(self, i: int, w: np.ndarray, s: np.ndarray) -> float:
        return 0.0

    def test_loss(self, i: int, w: np.ndarray) -> float:
        return cross_entropy(w, self.test_sets[i], self.n_classes)

    def local_training_step(
        self, i: int, w: np.ndarray, s_i: float, learn_rate: float
    ) -> LocalStep:
        """One gradient-descent step on the first ceil(s_i) train rows."""
        count = int(ceil(max(s_i, 0.0)))
        if count == 0:
            return LocalStep(np.array(w, dtype=float), 0, True)
        full = self.train_sets[i]
        count = min(count, full.size)
        prefix = SyntheticDataset(full.features[:count], full.labels[:count])
        grad = cross_entropy_grad(w, prefix, self.n_classes)
        return LocalStep(np.asarray(w, dtype=float) - learn_rate * grad, count, False)

    def manifest(self) -> dict:
        return {
            "family": "empirical",
            "classes": int(self.n_classes),
            "features": int(self.n_features),
            "data_seed": int(self.data_seed),
            "train_sizes": [ds.size for ds in self.train_sets],
            "test_sizes": [ds.size for ds in self.test_sets],
            "r": [float(x) for x in self.r],
        }
