"""Invertible LeakyReLU mixing ``x = g(z)`` with an exact inverse."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .sim import NEGATIVE_SLOPE, _orthogonal

MAX_CONDITION = 1e4


@dataclass(frozen=True)
class MixingFunction:
    weights: tuple  # square [n, n] matrices
    biases: tuple  # [n] vectors
    slope: float = NEGATIVE_SLOPE

    def __post_init__(self):
        if not self.slope > 0:
            raise ConfigError(f"mixing slope must be positive, got {self.slope}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigError("mixing needs one bias per weight matrix and at least one layer")
        for w in self.weights:
            if np.linalg.cond(w) > MAX_CONDITION:
                raise ConfigError(f"mixing layer condition number {np.linalg.cond(w):.3g} exceeds {MAX_CONDITION:g}")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def n(self) -> int:
        return self.weights[0].shape[0]

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixingFunction":
        return cls(
            tuple(np.asarray(w, dtype=float) for w in d["weights"]),
            tuple(np.asarray(b, dtype=float) for b in d["biases"]),
            float(d["slope"]),
        )


def make_random_mixing(n: int, depth: int = 3, seed=0, slope: float = NEGATIVE_SLOPE) -> MixingFunction:
    """Layers ``W = Q diag(d)`` with ``Q`` orthogonal and ``d`` uniform on [0.5, 2].

    The singular values of each layer are exactly ``d``, so the condition
    number is at most 4.
    """
    if n < 1 or depth < 1:
        raise ConfigError(f"mixing needs n >= 1 and depth >= 1, got n={n}, depth={depth}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for _ in range(depth):
        weights.append(_orthogonal(rng, n, n) * rng.uniform(0.5, 2.0, n))
        biases.append(rng.uniform(-0.1, 0.1, n))
    return MixingFunction(tuple(weights), tuple(biases), slope)


def _check_columns(g: MixingFunction, a: np.ndarray):
    if a.shape[-1] != g.n:
        raise ConfigError(f"mixing expects {g.n} columns, got array of shape {a.shape}")


def apply_mixing(g: MixingFunction, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    _check_columns(g, z)
    x = z
    for w, b in zip(g.weights, g.biases):
        x = x @ w.T + b
        x = np.where(x > 0, x, g.slope * x)
    return x


def invert_mixing(g: MixingFunction, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _check_columns(g, x)
    z = x
    for w, b in zip(reversed(g.weights), reversed(g.biases)):
        z = np.where(z > 0, z, z / g.slope)
        flat = (z - b).reshape(-1, g.n)
        try:
            z = np.linalg.solve(w, flat.T).T.reshape(z.shape)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular mixing layer: {exc}") from exc
    return z
