"""Synthetic latent causal processes.

Every generator produces a batch of sequences ``z`` with shape
``[num_seqs, T, n]``. Lagged histories are flattened most-recent first,
``h_t = (z_{t-1}, z_{t-2}, ..., z_{t-L})``, so feature ``(tau - 1) * n + j``
is ``z_{j, t - tau}``. The same convention is used by the model and the
skeleton regression.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError

FAMILIES = (
    "heteronoise_fixed",
    "gaussian_additive",
    "linear_nongaussian",
    "changing_dynamics",
    "modular",
)

NEGATIVE_SLOPE = 0.2

_NOISE_DEFAULTS = {
    "heteronoise_fixed": {"sigma": 0.1, "s_floor": 0.05},
    "gaussian_additive": {"sigma": 0.1},
    "linear_nongaussian": {"beta": 4.0, "lam": 1.0},
    "changing_dynamics": {"sigma": 0.1},
    "modular": {"sigma": 0.1, "s_floor": 0.05},
}


@dataclass
class GeneratorSpec:
    n: int = 8
    L: int = 2
    T: int = 4
    num_seqs: int = 25_000  # per domain for multi-domain families
    m: int = 1
    partition: Optional[tuple] = None  # (n_fix, n_chg, n_obs); defaults to (n, 0, 0)
    family: str = "heteronoise_fixed"
    noise_params: dict = field(default_factory=dict)
    seed: int = 0
    hidden: int = 16
    burn_in: int = 50
    edge_density: float = 0.35
    transition_gain: Optional[float] = None  # rescale transition outputs to this std under N(0, I) history

    def __post_init__(self):
        self.partition = (self.n, 0, 0) if self.partition is None else tuple(int(p) for p in self.partition)
        merged = dict(_NOISE_DEFAULTS.get(self.family, {}))
        merged.update(self.noise_params or {})
        self.noise_params = merged

    def validate(self) -> "GeneratorSpec":
        if self.family not in FAMILIES:
            raise ConfigError(f"family: unknown value {self.family!r}; expected one of {FAMILIES}")
        for name in ("n", "L", "T", "num_seqs", "m", "hidden"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {value!r}")
        if self.burn_in < 0:
            raise ConfigError("burn_in: must be >= 0")
        if len(self.partition) != 3 or min(self.partition) < 0:
            raise ConfigError(f"partition: need three non-negative counts, got {self.partition}")
        if sum(self.partition) != self.n:
            raise ConfigError(f"partition: {self.partition} does not sum to n={self.n}")
        n_fix, n_chg, n_obs = self.partition
        if (n_chg > 0 or n_obs > 0) and self.m < 2:
            raise ConfigError("m: changing or observation blocks require m >= 2")
        if self.transition_gain is not None and not self.transition_gain > 0:
            raise ConfigError("transition_gain: must be positive when given")
        if not 0.0 < self.edge_density <= 1.0:
            raise ConfigError("edge_density: must lie in (0, 1]")
        expected = {
            "heteronoise_fixed": (self.n, 0, 0),
            "gaussian_additive": (self.n, 0, 0),
            "linear_nongaussian": (self.n, 0, 0),
            "changing_dynamics": (0, self.n, 0),
        }.get(self.family)
        if expected is not None and self.partition != expected:
            raise ConfigError(f"partition: family {self.family} requires {expected}, got {self.partition}")
        if self.family == "modular" and (n_obs == 0 and n_chg == 0):
            raise ConfigError("partition: modular family needs a changing or observation block")
        if self.family in ("changing_dynamics", "modular") and self.m < 2:
            raise ConfigError(f"m: family {self.family} requires m >= 2")
        if self.family == "linear_nongaussian":
            beta = self.noise_params["beta"]
            if beta <= 2 or beta == 3:
                raise ConfigError("noise_params.beta: linear_nongaussian needs beta > 2 and beta != 3")
            if self.noise_params["lam"] <= 0:
                raise ConfigError("noise_params.lam: must be positive")
        sigma = self.noise_params.get("sigma")
        if sigma is not None and np.any(np.asarray(sigma) < 0):
            raise ConfigError("noise_params.sigma: must be non-negative")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["partition"] = list(self.partition)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


def default_spec(family: str, **overrides) -> GeneratorSpec:
    """Benchmark-sized spec for ``family``.

    Each data point is one short sequence (``T = L + 2``) started from
    i.i.d. standard-normal history with no burn-in. Transition outputs are
    calibrated to unit standard deviation so every step lives on the same
    scale. Sizes follow the synthetic benchmarks: 100k stationary points,
    or 7,500 points per domain across 20 domains.
    """
    base = dict(n=8, L=2, T=4, burn_in=0, family=family, m=1, transition_gain=1.0)
    if family in ("heteronoise_fixed", "gaussian_additive", "linear_nongaussian"):
        base["num_seqs"] = 100_000
    elif family == "changing_dynamics":
        base.update(m=20, partition=(0, 8, 0), num_seqs=7_500)
    elif family == "modular":
        base.update(n=9, m=20, partition=(6, 2, 1), num_seqs=7_500)
    else:
        raise ConfigError(f"family: unknown value {family!r}")
    base.update(overrides)
    return GeneratorSpec(**base).validate()


@dataclass
class LatentTrajectory:
    z: np.ndarray  # [num_seqs, T, n]
    domain: int
    adjacency: np.ndarray  # [n, n, L] bool; adjacency[i, j, tau-1]: z_{j,t-tau} -> z_{i,t}
    transition_params: dict = field(default_factory=dict)


def leaky_relu(x, slope=NEGATIVE_SLOPE):
    return np.where(x > 0, x, slope * x)


def lagged_history(z: np.ndarray, t: int, L: int) -> np.ndarray:
    """Flattened history ``(z_{t-1}, ..., z_{t-L})`` for every sequence."""
    return np.concatenate([z[:, t - tau] for tau in range(1, L + 1)], axis=-1)


def adjacency_to_mask(adj: np.ndarray) -> np.ndarray:
    """``[n, n, L]`` adjacency -> ``[n, L*n]`` input mask in history order."""
    n, _, L = adj.shape
    return np.transpose(adj, (0, 2, 1)).reshape(n, L * n)


def _orthogonal(rng, rows, cols):
    size = max(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((size, size)))
    q = q * np.sign(np.diag(r))
    return q[:rows, :cols]


@dataclass
class MLPTransition:
    """Per-component 2-hidden-layer LeakyReLU network ``q_k(h)``.

    ``w1`` has shape ``[n_out, H, d_in]`` and is stored already masked,
    so component ``k`` only reads its parents.
    """

    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    mask: np.ndarray
    slope: float = NEGATIVE_SLOPE

    def __call__(self, h: np.ndarray) -> np.ndarray:
        a = leaky_relu(np.einsum("khd,sd->skh", self.w1, h), self.slope)
        a = leaky_relu(np.einsum("kgh,skh->skg", self.w2, a), self.slope)
        return np.einsum("kh,skh->sk", self.w3, a)

    def with_first_layer(self, w1: np.ndarray) -> "MLPTransition":
        return dataclasses.replace(self, w1=w1 * self.mask[:, None, :])

    def arrays(self) -> dict:
        return {"w1": self.w1, "w2": self.w2, "w3": self.w3, "mask": self.mask}


def random_transition(rng, mask: np.ndarray, hidden: int, scale: float = 0.8) -> MLPTransition:
    n_out, d_in = mask.shape
    w1 = np.stack([_orthogonal(rng, hidden, d_in) for _ in range(n_out)]) * scale
    w2 = np.stack([_orthogonal(rng, hidden, hidden) for _ in range(n_out)]) * scale
    w3 = np.stack([_orthogonal(rng, 1, hidden)[0] for _ in range(n_out)]) * scale
    return MLPTransition(w1 * mask[:, None, :], w2, w3, mask.astype(bool))


_GAIN_PROBES = 4096


def calibrate_gain(q: MLPTransition, gain: Optional[float]) -> MLPTransition:
    """Rescale each output of ``q`` to standard deviation ``gain`` under N(0, I) histories.

    Uses a fixed probe set so the calibration never consumes the caller's
    random streams. ``gain=None`` returns ``q`` unchanged.
    """
    if gain is None:
        return q
    probes = np.random.default_rng(0).standard_normal((_GAIN_PROBES, q.w1.shape[2]))
    sd = q(probes).std(axis=0)
    sd[sd == 0] = 1.0
    return dataclasses.replace(q, w3=q.w3 * (gain / sd)[:, None])


def sample_adjacency(rng, n_rows: int, n: int, L: int, density: float) -> np.ndarray:
    """Random lagged parent sets; every row keeps at least one lag-1 parent."""
    adj = rng.random((n_rows, n, L)) < density
    for i in range(n_rows):
        if not adj[i, :, 0].any():
            adj[i, rng.integers(n), 0] = True
    return adj


def heteronoise_coupling(mask: np.ndarray, floor: float) -> Callable[[np.ndarray], np.ndarray]:
    """Mean of each component's lagged parent values, kept away from zero."""
    weights = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1)

    def coupling(h):
        s = h @ weights.T
        return np.where(s >= 0, 1.0, -1.0) * np.maximum(np.abs(s), floor)

    return coupling


def sample_generalized_normal(beta: float, lam: float, count, seed=None) -> np.ndarray:
    """Draw from ``p(e) ∝ exp(-lam |e|^beta)``.

    Uses ``|e| = (G / lam)^(1/beta)`` with ``G ~ Gamma(1/beta, 1)`` and a
    uniform random sign.
    """
    if not beta > 0 or not lam > 0:
        raise ConfigError(f"generalized normal needs beta > 0 and lam > 0, got beta={beta}, lam={lam}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g = rng.gamma(1.0 / beta, 1.0, size=count)
    sign = rng.choice(np.array([-1.0, 1.0]), size=count)
    return sign * (g / lam) ** (1.0 / beta)


def _streams(seed, k: int):
    """``k`` independent generators from an int seed or a SeedSequence."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(k)]


def _domain_seeds(seed, m: int):
    """Per-domain (weights, run) seed sequences, stable in ``m``."""
    ss_w, ss_run = np.random.SeedSequence(seed).spawn(3)[1:]
    return list(zip(ss_w.spawn(m), ss_run.spawn(m)))


def _check_length(spec: GeneratorSpec):
    if spec.T <= spec.L:
        raise ConfigError(f"T: sequence length {spec.T} must exceed the lag L={spec.L}")


def _run(spec, rng_init, step, init=None):
    """Roll ``z_t = step(h_t, t)`` forward and drop the burn-in."""
    total = spec.burn_in + spec.T
    z = np.empty((spec.num_seqs, total, spec.n))
    shape = (spec.num_seqs, spec.L, spec.n)
    z[:, : spec.L] = rng_init.standard_normal(shape) if init is None else init(rng_init, shape)
    for t in range(spec.L, total):
        z[:, t] = step(lagged_history(z, t, spec.L), t)
    return z[:, spec.burn_in :]


def _sigma_vector(sigma, n):
    return np.broadcast_to(np.asarray(sigma, dtype=float), (n,)).copy()


def simulate_fixed_heteronoise(spec: GeneratorSpec, seed: Optional[int] = None, *,
                               transition=None, coupling=None) -> LatentTrajectory:
    """``z_{k,t} = q_k(h_t) + s_k(h_t) * eps_{k,t}`` with ``eps ~ N(0, sigma^2)``.

    ``s_k`` is the mean of component ``k``'s lagged parent values. Passing
    ``transition`` or ``coupling`` (callables of the flattened history)
    replaces the random network or the coupling.
    """
    spec.validate()
    if spec.family != "heteronoise_fixed" or spec.m != 1:
        raise ConfigError("simulate_fixed_heteronoise needs family=heteronoise_fixed and m=1")
    _check_length(spec)
    seed = spec.seed if seed is None else seed
    rng_struct, rng_init, rng_noise = _streams(seed, 3)
    adj = sample_adjacency(rng_struct, spec.n, spec.n, spec.L, spec.edge_density)
    mask = adjacency_to_mask(adj)
    q = transition or calibrate_gain(random_transition(rng_struct, mask, spec.hidden), spec.transition_gain)
    s = coupling or heteronoise_coupling(mask, spec.noise_params["s_floor"])
    sigma = _sigma_vector(spec.noise_params["sigma"], spec.n)

    def step(h, t):
        return q(h) + s(h) * sigma * rng_noise.standard_normal(h.shape[:1] + (spec.n,))

    z = _run(spec, rng_init, step)
    params = {"family": spec.family, "transition": q, "coupling": s, "sigma": sigma,
              "s_floor": spec.noise_params["s_floor"], "seed": seed}
    return LatentTrajectory(z, 0, adj, params)


def simulate_gaussian_additive(spec: GeneratorSpec, seed: Optional[int] = None, *,
                               transition=None) -> LatentTrajectory:
    """``z_t = q(h_t) + eps_t`` with independent Gaussian noise."""
    spec.validate()
    if spec.family != "gaussian_additive":
        raise ConfigError("simulate_gaussian_additive needs family=gaussian_additive")
    _check_length(spec)
    seed = spec.seed if seed is None else seed
    rng_struct, rng_init, rng_noise = _streams(seed, 3)
    adj = sample_adjacency(rng_struct, spec.n, spec.n, spec.L, spec.edge_density)
    q = transition or calibrate_gain(random_transition(rng_struct, adjacency_to_mask(adj), spec.hidden),
                                     spec.transition_gain)
    sigma = _sigma_vector(spec.noise_params["sigma"], spec.n)

    def step(h, t):
        return q(h) + sigma * rng_noise.standard_normal(h.shape[:1] + (spec.n,))

    z = _run(spec, rng_init, step)
    params = {"family": spec.family, "transition": q, "sigma": sigma, "noise_vars": sigma**2, "seed": seed}
    return LatentTrajectory(z, 0, adj, params)


def random_stable_matrix(rng, n: int, min_entry=0.1, max_radius=0.95, attempts=100) -> np.ndarray:
    for _ in range(attempts):
        c = rng.uniform(-1.0, 1.0, (n, n)) / np.sqrt(n)
        if np.all(np.max(np.abs(c), axis=1) >= min_entry) and np.max(np.abs(np.linalg.eigvals(c))) <= max_radius:
            return c
    raise ConfigError(f"could not draw a stable transition matrix in {attempts} attempts")


def simulate_linear_nongaussian(spec: GeneratorSpec, seed: Optional[int] = None, *,
                                matrix=None, noise_scale: float = 1.0) -> LatentTrajectory:
    """``z_t = C z_{t-1} + eps_t`` with generalized-normal noise."""
    spec.validate()
    if spec.family != "linear_nongaussian":
        raise ConfigError("simulate_linear_nongaussian needs family=linear_nongaussian")
    _check_length(spec)
    seed = spec.seed if seed is None else seed
    rng_struct, rng_init, rng_noise = _streams(seed, 3)
    c = random_stable_matrix(rng_struct, spec.n) if matrix is None else np.asarray(matrix, float)
    beta, lam = spec.noise_params["beta"], spec.noise_params["lam"]

    def step(h, t):
        eps = sample_generalized_normal(beta, lam, (h.shape[0], spec.n), rng_noise)
        return h[:, : spec.n] @ c.T + noise_scale * eps

    z = _run(spec, rng_init, step)
    adj = np.zeros((spec.n, spec.n, spec.L), bool)
    adj[:, :, 0] = c != 0
    return LatentTrajectory(z, 0, adj, {"family": spec.family, "matrix": c, "beta": beta, "lam": lam,
                                          "noise_scale": noise_scale, "seed": seed})


def simulate_changing_dynamics(spec: GeneratorSpec, seed: Optional[int] = None) -> list:
    """Gaussian additive transitions whose first layer is redrawn per domain."""
    spec.validate()
    if spec.family != "changing_dynamics":
        raise ConfigError("simulate_changing_dynamics needs family=changing_dynamics")
    _check_length(spec)
    seed = spec.seed if seed is None else seed
    rng_struct = _streams(seed, 3)[0]
    adj = sample_adjacency(rng_struct, spec.n, spec.n, spec.L, spec.edge_density)
    base = random_transition(rng_struct, adjacency_to_mask(adj), spec.hidden)
    sigma = _sigma_vector(spec.noise_params["sigma"], spec.n)
    out = []
    for r, (ss_w, ss_run) in enumerate(_domain_seeds(seed, spec.m)):
        rng_init, rng_noise = _streams(ss_run, 2)
        q = base.with_first_layer(np.random.default_rng(ss_w).uniform(-1.0, 1.0, base.w1.shape))
        q = calibrate_gain(q, spec.transition_gain)

        def step(h, t, q=q, rng_noise=rng_noise):
            return q(h) + sigma * rng_noise.standard_normal(h.shape[:1] + (spec.n,))

        z = _run(spec, rng_init, step)
        out.append(LatentTrajectory(z, r, adj, {"family": spec.family, "transition": q, "sigma": sigma,
                                                "noise_vars": sigma**2, "seed": seed}))
    return out


def simulate_modular(spec: GeneratorSpec, seed: Optional[int] = None, *, ablate_fix_inputs=False) -> list:
    """Fixed, changing and observation-change blocks stacked in that order.

    With ``ablate_fix_inputs`` the fixed block only reads its own lags, so
    its law is the same in every domain.
    """
    spec.validate()
    if spec.family != "modular":
        raise ConfigError("simulate_modular needs family=modular")
    _check_length(spec)
    seed = spec.seed if seed is None else seed
    n, L = spec.n, spec.L
    n_fix, n_chg, n_obs = spec.partition
    rng_struct = _streams(seed, 3)[0]

    adj = np.zeros((n, n, L), bool)
    adj[:n_fix] = sample_adjacency(rng_struct, n_fix, n, L, spec.edge_density)
    if ablate_fix_inputs:
        adj[:n_fix, n_fix:] = False
        adj[:n_fix, :n_fix] = sample_adjacency(rng_struct, n_fix, n_fix, L, spec.edge_density)
    adj[n_fix : n_fix + n_chg] = sample_adjacency(rng_struct, n_chg, n, L, spec.edge_density)
    mask = adjacency_to_mask(adj)
    fix_q = calibrate_gain(random_transition(rng_struct, mask[:n_fix], spec.hidden), spec.transition_gain)
    fix_s = heteronoise_coupling(mask[:n_fix], spec.noise_params["s_floor"])
    chg_base = random_transition(rng_struct, mask[n_fix : n_fix + n_chg], spec.hidden)
    sigma = spec.noise_params["sigma"]
    obs_mean = rng_struct.uniform(-1.0, 1.0, (spec.m, n_obs))
    obs_var = rng_struct.uniform(0.01, 1.0, (spec.m, n_obs))

    k0 = n_fix + n_chg
    out = []
    for r, (ss_w, ss_run) in enumerate(_domain_seeds(seed, spec.m)):
        rng_init, rng_noise = _streams(ss_run, 2)
        chg_q = chg_base.with_first_layer(np.random.default_rng(ss_w).uniform(-1.0, 1.0, chg_base.w1.shape))
        chg_q = calibrate_gain(chg_q, spec.transition_gain)
        obs_sd = np.sqrt(obs_var[r])

        def init(rng, shape, r=r, obs_sd=obs_sd):
            z0 = rng.standard_normal(shape)
            z0[..., k0:] = obs_mean[r] + obs_sd * z0[..., k0:]
            return z0

        def step(h, t, chg_q=chg_q, obs_sd=obs_sd, r=r, rng_noise=rng_noise):
            eps = rng_noise.standard_normal((h.shape[0], n))
            z_fix = fix_q(h) + fix_s(h) * sigma * eps[:, :n_fix]
            z_chg = chg_q(h) + sigma * eps[:, n_fix:k0]
            z_obs = obs_mean[r] + obs_sd * eps[:, k0:]
            return np.concatenate([z_fix, z_chg, z_obs], axis=1)

        z = _run(spec, rng_init, step, init)
        params = {
            "family": spec.family,
            "partition": spec.partition,
            "fix_transition": fix_q,
            "fix_coupling": fix_s,
            "chg_transition": chg_q,
            "sigma": sigma,
            "s_floor": spec.noise_params["s_floor"],
            "obs_mean": obs_mean[r],
            "obs_var": obs_var[r],
            "seed": seed,
        }
        out.append(LatentTrajectory(z, r, adj, params))
    return out


def simulate(spec: GeneratorSpec, seed: Optional[int] = None) -> list:
    """Dispatch on ``spec.family``; always returns a list of trajectories."""
    fn = {
        "heteronoise_fixed": simulate_fixed_heteronoise,
        "gaussian_additive": simulate_gaussian_additive,
        "linear_nongaussian": simulate_linear_nongaussian,
        "changing_dynamics": simulate_changing_dynamics,
        "modular": simulate_modular,
    }[spec.validate().family]
    out = fn(spec, seed)
    return out if isinstance(out, list) else [out]
