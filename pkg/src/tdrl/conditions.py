"""Numerical checks of the identifiability conditions on conditional log-densities.

For a conditional log-density ``eta(z_t | z_prev, u)`` the condition vectors
are mixed partial derivatives taken by central finite differences. Each of
the ``2n`` condition functions of ``z_prev`` is sampled at a set of probe
histories and the resulting rows are tested for linear independence by
their singular values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigError, NumericalError
from .sim import _orthogonal

VERDICTS = ("independent", "dependent", "inconclusive")
DEFAULT_THRESHOLD = 1e-6
INCONCLUSIVE_BAND = 10.0
# entries whose magnitude is within this factor of the estimated rounding
# error of their difference quotient are set to exactly zero
ROUNDOFF_SAFETY = 64.0


@dataclass
class DensityModel:
    """``log_density(z_t, z_prev, domain) -> float``.

    ``z_prev`` may hold several stacked lags; its length is inferred from
    the probes.
    """

    log_density: Callable[[np.ndarray, np.ndarray, int], float]
    n: int
    m: int = 1

    def __call__(self, z_t, z_prev, domain=0) -> float:
        return float(self.log_density(z_t, z_prev, domain))


@dataclass
class ConditionReport:
    matrix: np.ndarray  # [2n, samples]; rows are v_1, ..., v_n, then the ring rows
    singular_values: np.ndarray
    ratio: float
    verdict: str
    threshold: float
    probe_ratios: list = field(default_factory=list)  # one per z_t probe when several were checked
    zero_rows: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "verdict": self.verdict,
            "ratio": self.ratio,
            "threshold": self.threshold,
            "rows": int(self.matrix.shape[0]),
            "columns": int(self.matrix.shape[1]),
            "zero_rows": list(self.zero_rows),
            "probe_ratios": list(self.probe_ratios),
            "singular_values": self.singular_values.tolist(),
        }


def fd_step(x) -> np.ndarray:
    return 1e-3 * (1.0 + np.abs(np.asarray(x, dtype=float)))


def _evaluate(dm, z_t, z_prev, domain, where):
    val = dm(z_t, z_prev, domain)
    if not np.isfinite(val):
        raise NumericalError(f"log density is not finite at probe {where} (domain {domain})")
    return val


def _partials(dm: DensityModel, z_t, z_prev, domain, step_scale=1.0):
    """Finite-difference partials at one ``(z_t, z_prev)`` point.

    Returns ``d1 [n]``, ``d2 [n]`` (first and second derivative in ``z_k``),
    ``mixed [n, d]`` (second mixed with ``z_prev``) and ``ring [n, d]``
    (third derivative, twice in ``z_k`` and once in ``z_prev``).
    """
    z_t = np.asarray(z_t, dtype=float)
    z_prev = np.asarray(z_prev, dtype=float)
    n, d = z_t.size, z_prev.size
    hk = fd_step(z_t) * step_scale
    hl = fd_step(z_prev) * step_scale
    eps = np.finfo(float).eps
    where = (z_t.tolist(), z_prev.tolist())
    f0 = _evaluate(dm, z_t, z_prev, domain, where)
    d1, d2 = np.zeros(n), np.zeros(n)
    mixed, ring = np.zeros((n, d)), np.zeros((n, d))

    def shifted(k, a, l, b):
        zt, zp = z_t.copy(), z_prev.copy()
        zt[k] += a * hk[k]
        if l is not None:
            zp[l] += b * hl[l]
        return _evaluate(dm, zt, zp, domain, where)

    for k in range(n):
        fp, fm = shifted(k, 1, None, 0), shifted(k, -1, None, 0)
        d1[k] = (fp - fm) / (2 * hk[k])
        d2[k] = (fp - 2 * f0 + fm) / hk[k] ** 2
        for l in range(d):
            g = np.array([[shifted(k, a, l, b) for b in (1, -1)] for a in (1, 0, -1)])
            scale = eps * np.abs(g).sum()
            mix = (g[0, 0] - g[0, 1] - g[2, 0] + g[2, 1]) / (4 * hk[k] * hl[l])
            third = ((g[0, 0] - 2 * g[1, 0] + g[2, 0]) - (g[0, 1] - 2 * g[1, 1] + g[2, 1])) / (2 * hk[k] ** 2 * hl[l])
            mixed[k, l] = 0.0 if abs(mix) <= ROUNDOFF_SAFETY * scale / (4 * hk[k] * hl[l]) else mix
            ring[k, l] = 0.0 if abs(third) <= ROUNDOFF_SAFETY * scale / (2 * hk[k] ** 2 * hl[l]) else third
    return d1, d2, mixed, ring


def _check_probes(probe_prev):
    probes = [np.asarray(p, dtype=float).ravel() for p in probe_prev]
    if not probes:
        raise ConfigError("probe_prev must contain at least one history vector")
    return probes


def stationary_condition_rows(dm: DensityModel, z_t, probe_prev: Sequence, step: float = 1.0) -> np.ndarray:
    """Rows ``v_k`` and ``v_ring_k`` sampled at every probe history.

    Output is ``[2n, P * d]`` with ``d`` the history length; column block
    ``p`` holds the derivatives at probe ``p``. ``step`` rescales the
    default finite-difference step ``1e-3 * (1 + |x|)``.
    """
    if not step > 0:
        raise ConfigError(f"step must be positive, got {step}")
    probes = _check_probes(probe_prev)
    v, ring = [], []
    for p in probes:
        _, _, mix, r = _partials(dm, z_t, p, 0, step)
        v.append(mix)
        ring.append(r)
    return np.vstack([np.hstack(v), np.hstack(ring)])


def nonstationary_condition_rows(dm: DensityModel, z_t, probe_prev: Sequence, step: float = 1.0) -> np.ndarray:
    """Rows ``s_k`` and ``s_ring_k`` sampled at every probe history.

    Per probe the ``s_k`` block is ``v_k(u_1), ..., v_k(u_m)`` followed by
    the ``m - 1`` consecutive-domain differences of the second derivative
    in ``z_k``; the ring block uses ``v_ring`` and differences of the first
    derivative. Output is ``[2n, P * (m * d + m - 1)]``.
    """
    if dm.m < 2:
        raise ConfigError(f"nonstationary condition rows need m >= 2 domains, got m={dm.m}")
    if not step > 0:
        raise ConfigError(f"step must be positive, got {step}")
    probes = _check_probes(probe_prev)
    s_blocks, ring_blocks = [], []
    for p in probes:
        parts = [_partials(dm, z_t, p, r, step) for r in range(dm.m)]
        d1 = np.stack([q[0] for q in parts], axis=1)  # [n, m]
        d2 = np.stack([q[1] for q in parts], axis=1)
        s_blocks.append(np.hstack([q[2] for q in parts] + [np.diff(d2, axis=1)]))
        ring_blocks.append(np.hstack([q[3] for q in parts] + [np.diff(d1, axis=1)]))
    return np.vstack([np.hstack(s_blocks), np.hstack(ring_blocks)])


def linear_independence_verdict(rows, threshold: float = DEFAULT_THRESHOLD) -> ConditionReport:
    """Singular-value test: ``sigma_min / sigma_max`` against ``threshold``.

    Below the threshold the rows are dependent; within a factor 10 above it
    the verdict is inconclusive. An all-zero matrix has ratio 0. Fewer
    sample columns than rows cannot certify independence, so the missing
    singular values count as zero.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size == 0:
        raise ConfigError("condition rows are empty")
    if not np.all(np.isfinite(rows)):
        raise NumericalError("condition rows contain non-finite entries")
    sv = np.linalg.svd(rows, compute_uv=False)
    sv = np.concatenate([sv, np.zeros(rows.shape[0] - sv.size)])
    ratio = 0.0 if sv[0] == 0 else float(sv[-1] / sv[0])
    if ratio < threshold:
        verdict = "dependent"
    elif ratio < INCONCLUSIVE_BAND * threshold:
        verdict = "inconclusive"
    else:
        verdict = "independent"
    zero = [int(i) for i in np.flatnonzero(~np.any(rows != 0, axis=1))]
    return ConditionReport(rows, sv, ratio, verdict, threshold, zero_rows=zero)


def check_conditions(dm: DensityModel, z_t_probes: Sequence, probe_prev: Sequence,
                     threshold: float = DEFAULT_THRESHOLD, step: float = 1.0,
                     nonstationary: Optional[bool] = None) -> ConditionReport:
    """Run the verdict at every ``z_t`` probe and report the worst one."""
    nonstationary = dm.m >= 2 if nonstationary is None else nonstationary
    build = nonstationary_condition_rows if nonstationary else stationary_condition_rows
    worst = None
    ratios = []
    for z_t in z_t_probes:
        rep = linear_independence_verdict(build(dm, z_t, probe_prev, step), threshold)
        ratios.append(rep.ratio)
        if worst is None or rep.ratio < worst.ratio:
            worst = rep
    if worst is None:
        raise ConfigError("z_t_probes must contain at least one point")
    worst.probe_ratios = ratios
    return worst


def gaussian_counterexample(z, noise_vars, seed=0, *, U=None, D1=None) -> np.ndarray:
    """Alternative solution ``z_hat = D1 U D2 z`` of the Gaussian additive model.

    ``D2 = diag(Var(eps_k) ** -1/2)``; ``U`` is a seeded random orthogonal
    matrix and ``D1`` a seeded diagonal with entries of random sign and
    magnitude in [0.5, 2], unless given.
    """
    z = np.asarray(z, dtype=float)
    noise_vars = np.asarray(noise_vars, dtype=float)
    n = z.shape[-1]
    if noise_vars.shape != (n,):
        raise ConfigError(f"noise_vars must have shape ({n},), got {noise_vars.shape}")
    if np.any(noise_vars <= 0):
        raise ConfigError("noise variances must be positive")
    rng = np.random.default_rng(seed)
    U = _orthogonal(rng, n, n) if U is None else np.asarray(U, dtype=float)
    if D1 is None:
        D1 = rng.uniform(0.5, 2.0, n) * rng.choice([-1.0, 1.0], n)
    D1 = np.asarray(D1, dtype=float)
    if D1.ndim == 2:
        D1 = np.diag(D1)
    if np.any(D1 == 0):
        raise ConfigError("D1 must be non-singular")
    A = (D1[:, None] * U) / np.sqrt(noise_vars)[None, :]
    return z @ A.T


def _spline_basis(x: np.ndarray, n_knots: int = 5, degree: int = 3) -> np.ndarray:
    """Cubic B-spline basis on quantile knots, one block per column of ``x``."""
    blocks = []
    for col in x.T:
        inner = np.quantile(col, np.linspace(0, 1, n_knots + 2)[1:-1])
        lo, hi = col.min(), col.max()
        knots = np.concatenate([[lo] * (degree + 1), inner, [hi] * (degree + 1)])
        basis = BSpline.design_matrix(np.clip(col, lo, hi), knots, degree).toarray()
        blocks.append(basis[:, 1:])  # drop one column per input, the intercept is added once
    return np.hstack(blocks)


def conditional_independence_score(traj, lags: int = 1, n_knots: int = 5) -> np.ndarray:
    """Absolute residual cross-correlations after nonparametric regression on the lags.

    Every component of ``z_t`` is regressed on an additive cubic-spline
    basis of all lagged values plus their pairwise products; the returned
    ``[n, n]`` matrix holds ``|corr|`` of the residuals with a zero
    diagonal. ``traj`` is ``[T, n]`` or ``[num_seqs, T, n]``.
    """
    from .lassonet import lagged_design

    z = np.asarray(traj, dtype=float)
    if z.ndim == 2:
        z = z[None]
    n = z.shape[-1]
    X, Y = lagged_design(z, lags)
    if X.shape[0] < 10 * n * lags:
        raise ConfigError(f"conditional independence score needs T >= 10*n*lags = {10 * n * lags}, got {X.shape[0]}")
    iu = np.triu_indices(X.shape[1], 1)
    Xs = (X - X.mean(0)) / np.where(X.std(0) > 0, X.std(0), 1.0)
    design = np.hstack([np.ones((X.shape[0], 1)), _spline_basis(X, n_knots), (Xs[:, :, None] * Xs[:, None, :])[:, iu[0], iu[1]]])
    coef, *_ = np.linalg.lstsq(design, Y, rcond=None)
    resid = Y - design @ coef
    sd = resid.std(0)
    r = (resid - resid.mean(0)) / np.where(sd > 0, sd, 1.0)
    corr = np.abs(r.T @ r / r.shape[0])
    np.fill_diagonal(corr, 0.0)
    return corr


# closed-form densities ------------------------------------------------------

_LOG_2PI = np.log(2 * np.pi)


def iid_normal_density(n: int, sigma: float = 1.0) -> DensityModel:
    """No temporal dependence: every ``z_k`` is ``N(0, sigma^2)``."""

    def log_density(z_t, z_prev, domain):
        return float(np.sum(-0.5 * _LOG_2PI - np.log(sigma) - 0.5 * (np.asarray(z_t) / sigma) ** 2))

    return DensityModel(log_density, n)


def gaussian_additive_density(q: Callable, sigma, n: int) -> DensityModel:
    """``z_t = q(z_prev) + eps`` with independent ``eps_k ~ N(0, sigma_k^2)``."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))

    def log_density(z_t, z_prev, domain):
        r = (np.asarray(z_t) - np.asarray(q(np.asarray(z_prev)[None]))[0]) / sigma
        return float(np.sum(-0.5 * _LOG_2PI - np.log(sigma) - 0.5 * r**2))

    return DensityModel(log_density, n)


def heteronoise_density(q: Callable, b: Callable, n: int) -> DensityModel:
    """``z_k = q_k(z_prev) + eps_k / b_k(z_prev)`` with standard normal ``eps``.

    ``eta_k = -log(2 pi)/2 + log b_k - b_k^2 (z_k - q_k)^2 / 2``.
    """

    def log_density(z_t, z_prev, domain):
        h = np.asarray(z_prev)[None]
        bk = np.asarray(b(h))[0]
        r = np.asarray(z_t) - np.asarray(q(h))[0]
        return float(np.sum(-0.5 * _LOG_2PI + np.log(bk) - 0.5 * bk**2 * r**2))

    return DensityModel(log_density, n)


def tanh_precision(a: np.ndarray, amplitude: float = 0.5) -> Callable:
    """``b_k(h) = 1 + amplitude * tanh(a_k . h)``; distinct rows give distinct ``b_k``."""
    a = np.asarray(a, dtype=float)

    def b(h):
        return 1.0 + amplitude * np.tanh(h @ a.T)

    return b


def heteronoise_partials(q_grad: Callable, q: Callable, b: Callable, b_grad: Callable, z_t, z_prev):
    """Hand-derived ``v`` and ``v_ring`` rows of the heterogeneous-noise model.

    ``d2 eta_k / dz_k dz_l = -2 b_k db_k/dz_l (z_k - q_k) + b_k^2 dq_k/dz_l`` and
    ``d3 eta_k / dz_k^2 dz_l = -2 b_k db_k/dz_l``. The gradients are
    ``[n, d]`` Jacobians at ``z_prev``.
    """
    h = np.asarray(z_prev, dtype=float)[None]
    bk = np.asarray(b(h))[0]
    r = np.asarray(z_t, dtype=float) - np.asarray(q(h))[0]
    db, dq = b_grad(z_prev), q_grad(z_prev)
    v = -2 * (bk * r)[:, None] * db + (bk**2)[:, None] * dq
    ring = -2 * bk[:, None] * db
    return v, ring


def domain_gaussian_density(means, sigmas) -> DensityModel:
    """Observation-change model: ``z_k | u_r ~ N(mean[r, k], sigma[r, k]^2)``, no lagged parents."""
    means = np.asarray(means, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    m, n = means.shape

    def log_density(z_t, z_prev, domain):
        r = (np.asarray(z_t) - means[domain]) / sigmas[domain]
        return float(np.sum(-0.5 * _LOG_2PI - np.log(sigmas[domain]) - 0.5 * r**2))

    return DensityModel(log_density, n, m)


def density_from_trajectory(traj) -> DensityModel:
    """Closed-form density for a simulated stationary trajectory.

    Supports the heteronoise, Gaussian-additive and linear non-Gaussian
    families; the recorded transition parameters are used as is.
    """
    params = traj.transition_params
    family = params.get("family")
    n = traj.z.shape[-1]
    if family == "heteronoise_fixed":
        q = params["transition"]
        sigma = np.asarray(params["sigma"], dtype=float)
        coupling = params["coupling"]

        def b(h):
            return 1.0 / (np.abs(coupling(h)) * sigma)

        return heteronoise_density(q, b, n)
    if family == "gaussian_additive":
        return gaussian_additive_density(params["transition"], np.sqrt(params["noise_vars"]), n)
    if family == "linear_nongaussian":
        C = np.asarray(params["matrix"], dtype=float)
        beta, lam = params["beta"], params["lam"]
        scale = params.get("noise_scale", 1.0)
        from scipy.special import gammaln

        log_norm = np.log(beta) + np.log(lam) / beta - np.log(2.0) - gammaln(1.0 / beta) - np.log(scale)

        def log_density(z_t, z_prev, domain):
            e = (np.asarray(z_t) - C @ np.asarray(z_prev)[: C.shape[1]]) / scale
            return float(np.sum(log_norm - lam * np.abs(e) ** beta))

        return DensityModel(log_density, n)
    raise ConfigError(f"no closed-form density for family {family!r}")


def density_from_trajectories(trajs) -> DensityModel:
    """Closed-form density for one trajectory or a list with one entry per domain.

    Multi-domain families (changing dynamics, modular) give a density with
    ``m`` domains; the domain argument selects that domain's transition.
    """
    if not isinstance(trajs, (list, tuple)):
        return density_from_trajectory(trajs)
    if len(trajs) == 1 and trajs[0].transition_params.get("family") not in ("changing_dynamics", "modular"):
        return density_from_trajectory(trajs[0])
    by_domain = sorted(trajs, key=lambda t: t.domain)
    params = [t.transition_params for t in by_domain]
    family = params[0].get("family")
    n, m = by_domain[0].z.shape[-1], len(by_domain)
    if family == "changing_dynamics":
        dms = [gaussian_additive_density(p["transition"], p["sigma"], n) for p in params]

        def log_density(z_t, z_prev, domain):
            return dms[domain](z_t, z_prev, 0)

        return DensityModel(log_density, n, m)
    if family == "modular":
        n_fix, n_chg, n_obs = params[0]["partition"]
        k0 = n_fix + n_chg
        sigma = float(params[0]["sigma"])

        def log_density(z_t, z_prev, domain):
            p = params[domain]
            z_t = np.asarray(z_t, dtype=float)
            h = np.asarray(z_prev, dtype=float)[None]
            total = 0.0
            if n_fix:
                sd = np.abs(p["fix_coupling"](h)[0]) * sigma
                r = (z_t[:n_fix] - p["fix_transition"](h)[0]) / sd
                total += np.sum(-0.5 * _LOG_2PI - np.log(sd) - 0.5 * r**2)
            if n_chg:
                r = (z_t[n_fix:k0] - p["chg_transition"](h)[0]) / sigma
                total += np.sum(-0.5 * _LOG_2PI - np.log(sigma) - 0.5 * r**2)
            if n_obs:
                sd = np.sqrt(p["obs_var"])
                r = (z_t[k0:] - p["obs_mean"]) / sd
                total += np.sum(-0.5 * _LOG_2PI - np.log(sd) - 0.5 * r**2)
            return float(total)

        return DensityModel(log_density, n, m)
    raise ConfigError(f"no closed-form multi-domain density for family {family!r}")


def sample_probes(z, L: int, num_prev: int = 64, num_t: int = 8, seed: int = 0):
    """Probe histories and probe ``z_t`` values drawn from a trajectory's empirical distribution."""
    from .lassonet import lagged_design

    z = np.asarray(z, dtype=float)
    if z.ndim == 2:
        z = z[None]
    X, Y = lagged_design(z, L)
    rng = np.random.default_rng(seed)
    prev = X[rng.choice(X.shape[0], size=min(num_prev, X.shape[0]), replace=False)]
    cur = Y[rng.choice(Y.shape[0], size=min(num_t, Y.shape[0]), replace=False)]
    return cur, prev
