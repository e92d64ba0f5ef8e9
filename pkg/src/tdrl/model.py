"""TDRL network: per-step encoder/decoder, change factors and the modular flow prior.

The transition prior inverts each latent component with a conditional
affine map ``eps_k = exp(a_k(c)) * z_k + b_k(c)``. The fixed block
conditions on the flattened history, the changing block on history plus
``theta_dyn`` and the observation block on ``theta_obs`` only. The Jacobian
of ``z_t -> eps_t`` is triangular (diagonal here), so the log-determinant is
``sum_k a_k``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .errors import ConfigError

DTYPE = torch.float64
PRIORS = ("flow", "normal")
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
LOG_VAR_CLAMP = 10.0


@dataclass
class ModelConfig:
    n: int
    L: int = 2
    partition: tuple = (None, 0, 0)  # None for n_fix means "everything not chg/obs"
    m: int = 1
    obs_dim: Optional[int] = None  # defaults to n
    theta_dyn_dim: int = 2
    theta_obs_dim: int = 2
    enc_dec_width: int = 128
    flow_width: int = 64
    beta: float = 0.002
    slope: float = 0.2
    prior: str = "flow"
    seed: int = 0

    def __post_init__(self):
        p = list(self.partition)
        if len(p) != 3:
            raise ConfigError(f"partition must have three entries, got {self.partition}")
        if p[0] is None:
            p[0] = self.n - (p[1] or 0) - (p[2] or 0)
        self.partition = tuple(int(v) for v in p)
        if self.obs_dim is None:
            self.obs_dim = self.n
        self.validate()

    def validate(self) -> "ModelConfig":
        if self.n < 1 or self.L < 1 or self.m < 1 or self.obs_dim < 1:
            raise ConfigError("n, L, m and obs_dim must be positive")
        if any(v < 0 for v in self.partition) or sum(self.partition) != self.n:
            raise ConfigError(f"partition {self.partition} must be non-negative and sum to n={self.n}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.partition[1] > 0 and self.theta_dyn_dim < 1:
            raise ConfigError("a changing block needs theta_dyn_dim >= 1")
        if self.partition[2] > 0 and self.theta_obs_dim < 1:
            raise ConfigError("an observation block needs theta_obs_dim >= 1")
        if self.prior not in PRIORS:
            raise ConfigError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["partition"] = list(self.partition)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        d = dict(d)
        if "partition" in d:
            d["partition"] = tuple(d["partition"])
        return cls(**d)


@dataclass
class PosteriorStats:
    mu: torch.Tensor  # [..., T, n]
    log_var: torch.Tensor


@dataclass
class PriorOutput:
    eps_hat: torch.Tensor  # [..., T - L, n]
    log_jac: torch.Tensor  # [..., T - L, n]
    log_prior: torch.Tensor  # [..., T - L]
    head_log_prior: torch.Tensor = field(default=None)  # [..., L, n], standard normal on the first L steps

    def elementwise(self) -> torch.Tensor:
        """Per-step, per-component log prior over all ``T`` steps."""
        tail = log_normal(self.eps_hat) + self.log_jac
        return torch.cat([self.head_log_prior, tail], dim=-2)


def log_normal(x: torch.Tensor) -> torch.Tensor:
    return -_HALF_LOG_2PI - 0.5 * x**2


def _mlp(sizes: Sequence[int], slope: float) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b, dtype=DTYPE))
        if i < len(sizes) - 2:
            layers.append(nn.LeakyReLU(slope))
    return nn.Sequential(*layers)


class ChangeFactors(nn.Module):
    """Per-domain embeddings ``theta_dyn [m, d_dyn]`` and ``theta_obs [m, d_obs]``."""

    def __init__(self, m: int, dyn_dim: int, obs_dim: int, generator=None):
        super().__init__()
        self.theta_dyn = nn.Parameter(0.1 * torch.randn(m, dyn_dim, generator=generator, dtype=DTYPE))
        self.theta_obs = nn.Parameter(0.1 * torch.randn(m, obs_dim, generator=generator, dtype=DTYPE))

    @property
    def m(self) -> int:
        return self.theta_dyn.shape[0]


class ComponentConditioner(nn.Module):
    """``K`` independent two-hidden-layer networks sharing an input, each emitting ``(a_k, b_k)``.

    The last layer starts at zero so every component flow starts as the identity.
    """

    def __init__(self, K: int, d_in: int, width: int, slope: float, generator=None):
        super().__init__()
        self.slope = slope

        def init(*shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return nn.Parameter((torch.rand(*shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound)

        self.w1 = init(K, width, d_in, fan_in=max(d_in, 1))
        self.b1 = init(K, width, fan_in=max(d_in, 1))
        self.w2 = init(K, width, width, fan_in=width)
        self.b2 = init(K, width, fan_in=width)
        self.w3 = nn.Parameter(torch.zeros(K, 2, width, dtype=DTYPE))
        self.b3 = nn.Parameter(torch.zeros(K, 2, dtype=DTYPE))

    def forward(self, c: torch.Tensor):
        K, H, d = self.w1.shape
        act = nn.functional.leaky_relu
        h = act((c @ self.w1.reshape(K * H, d).T).unflatten(-1, (K, H)) + self.b1, self.slope)
        h = act(torch.einsum("...kh,kgh->...kg", h, self.w2) + self.b2, self.slope)
        out = torch.einsum("...kh,koh->...ko", h, self.w3) + self.b3
        return out[..., 0], out[..., 1]


class TDRLModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        c = config
        gen = torch.Generator().manual_seed(c.seed)
        w = c.enc_dec_width
        # nn.Linear draws from the global generator; seed it without leaking state
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(c.seed)
            self.encoder = _mlp([c.obs_dim, w, w, w, 2 * c.n], c.slope)
            self.decoder = _mlp([c.n, w, w, c.obs_dim], c.slope)
        self.change_factors = ChangeFactors(c.m, c.theta_dyn_dim, c.theta_obs_dim, gen)
        n_fix, n_chg, n_obs = c.partition
        hist = c.n * c.L
        self.fix_flow = ComponentConditioner(n_fix, hist, c.flow_width, c.slope, gen) if n_fix else None
        self.chg_flow = ComponentConditioner(n_chg, hist + c.theta_dyn_dim, c.flow_width, c.slope, gen) if n_chg else None
        self.obs_flow = ComponentConditioner(n_obs, c.theta_obs_dim, c.flow_width, c.slope, gen) if n_obs else None

    # inference and generation --------------------------------------------------

    def encode(self, x: torch.Tensor) -> PosteriorStats:
        if x.shape[-1] != self.config.obs_dim:
            raise ConfigError(f"encoder expects {self.config.obs_dim} observed features, got {x.shape[-1]}")
        out = self.encoder(x)
        mu, log_var = out.chunk(2, dim=-1)
        return PosteriorStats(mu, torch.clamp(log_var, -LOG_VAR_CLAMP, LOG_VAR_CLAMP))

    def decode(self, z_hat: torch.Tensor) -> torch.Tensor:
        if z_hat.shape[-1] != self.config.n:
            raise ConfigError(f"decoder expects {self.config.n} latents, got {z_hat.shape[-1]}")
        return self.decoder(z_hat)

    # prior -------------------------------------------------------------------

    def history(self, z_hat: torch.Tensor) -> torch.Tensor:
        """``[..., T - L, n * L]`` with lag 1 first, matching the generator's ordering."""
        L, T = self.config.L, z_hat.shape[-2]
        return torch.cat([z_hat[..., L - tau : T - tau, :] for tau in range(1, L + 1)], dim=-1)

    def prior_log_density(self, z_hat: torch.Tensor, domain, cf: Optional[ChangeFactors] = None) -> PriorOutput:
        c = self.config
        cf = self.change_factors if cf is None else cf
        T = z_hat.shape[-2]
        if T <= c.L:
            raise ConfigError(f"prior needs sequences longer than L={c.L}, got T={T}")
        domain = torch.as_tensor(domain, dtype=torch.long)
        if torch.any(domain < 0) or torch.any(domain >= cf.m):
            raise IndexError(f"domain index out of range [0, {cf.m}): {domain.tolist()}")
        head = log_normal(z_hat[..., : c.L, :])
        cur = z_hat[..., c.L :, :]
        if c.prior == "normal":
            zeros = torch.zeros_like(cur)
            return PriorOutput(cur, zeros, log_normal(cur).sum(-1), head)

        hist = self.history(z_hat)
        lead = cur.shape[:-1]

        def theta(rows):
            # [..., d] -> broadcast over time steps
            t = rows[domain]
            if t.dim() == 1:
                t = t.expand(*lead, -1)
            else:
                t = t.unsqueeze(-2).expand(*lead, -1)
            return t

        n_fix, n_chg, n_obs = c.partition
        scales, shifts = [], []
        if n_fix:
            a, b = self.fix_flow(hist)
            scales.append(a)
            shifts.append(b)
        if n_chg:
            a, b = self.chg_flow(torch.cat([hist, theta(cf.theta_dyn)], dim=-1))
            scales.append(a)
            shifts.append(b)
        if n_obs:
            a, b = self.obs_flow(theta(cf.theta_obs))
            scales.append(a)
            shifts.append(b)
        a = torch.cat(scales, dim=-1)
        b = torch.cat(shifts, dim=-1)
        eps = torch.exp(a) * cur + b
        return PriorOutput(eps, a, (log_normal(eps) + a).sum(-1), head)

    def inverse_transition(self, z_hat: torch.Tensor, domain, cf: Optional[ChangeFactors] = None) -> torch.Tensor:
        """``eps_hat`` only; a plain function of ``z_hat`` for autograd checks of the Jacobian."""
        return self.prior_log_density(z_hat, domain, cf).eps_hat


def reparameterized_sample(stats: PosteriorStats, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != stats.mu.shape:
        raise ConfigError(f"noise shape {tuple(noise.shape)} does not match posterior {tuple(stats.mu.shape)}")
    return stats.mu + torch.exp(0.5 * stats.log_var) * noise


def log_posterior(stats: PosteriorStats, z_hat: torch.Tensor) -> torch.Tensor:
    """Elementwise diagonal-Gaussian ``log q(z_hat | x)``."""
    return -_HALF_LOG_2PI - 0.5 * stats.log_var - 0.5 * (z_hat - stats.mu) ** 2 * torch.exp(-stats.log_var)


def as_tensor(a: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a.to(DTYPE)
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))
