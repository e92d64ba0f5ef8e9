"""Observed datasets: simulated latents pushed through a mixing function."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .mixing import MixingFunction, apply_mixing, make_random_mixing
from .sim import GeneratorSpec, simulate


@dataclass
class ObservedDataset:
    x: np.ndarray  # [S, T, obs_dim]
    domain: np.ndarray  # [S] int
    z: Optional[np.ndarray] = None  # [S, T, n] ground truth, when known
    adjacency: Optional[np.ndarray] = None  # [n, n, L]
    spec: Optional[GeneratorSpec] = None
    mixing: Optional[MixingFunction] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 3:
            raise ConfigError(f"observations must be [num_seqs, T, dim], got shape {self.x.shape}")
        self.domain = np.asarray(self.domain, dtype=np.int64).reshape(-1)
        if self.domain.shape[0] != self.x.shape[0]:
            raise ConfigError(f"{self.domain.shape[0]} domain labels for {self.x.shape[0]} sequences")
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=float)
            if self.z.shape[:2] != self.x.shape[:2]:
                raise ConfigError(f"latents {self.z.shape} and observations {self.x.shape} disagree")

    @property
    def num_seqs(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return int(self.domain.max()) + 1 if self.domain.size else 0

    def subset(self, idx) -> "ObservedDataset":
        z = None if self.z is None else self.z[idx]
        return ObservedDataset(self.x[idx], self.domain[idx], z, self.adjacency, self.spec, self.mixing)


def make_dataset(spec: GeneratorSpec, mixing_seed: Optional[int] = None, depth: int = 3,
                 mixing: Optional[MixingFunction] = None) -> ObservedDataset:
    """Simulate ``spec`` and mix the latents; domains are concatenated in order."""
    trajs = simulate(spec)
    if mixing is None:
        mixing = make_random_mixing(spec.n, depth, spec.seed + 1 if mixing_seed is None else mixing_seed)
    z = np.concatenate([t.z for t in trajs])
    domain = np.concatenate([np.full(t.z.shape[0], t.domain) for t in trajs])
    return ObservedDataset(apply_mixing(mixing, z), domain, z, trajs[0].adjacency, spec, mixing)


def split_indices(num_seqs: int, val_fraction: float, seed: int):
    """Seeded split by sequence into (train, validation) index arrays."""
    if not 0 < val_fraction < 1:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    perm = np.random.default_rng(seed).permutation(num_seqs)
    n_val = max(1, int(round(val_fraction * num_seqs)))
    if n_val >= num_seqs:
        raise ConfigError(f"cannot split {num_seqs} sequences with val_fraction={val_fraction}")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])
