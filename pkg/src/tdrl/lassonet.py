"""Sparse path regression with hierarchical input sparsity.

Each target is fit by ``y = theta^T x + w2^T relu(W1 x + b1) + b0`` and
after every gradient step the pair ``(theta_j, W1[:, j])`` goes through the
hierarchical proximal operator, which zeroes feature ``j`` in the network
whenever its skip weight is zero (``||W1[:, j]||_inf <= M |theta_j|``).
Penalties are visited in increasing order with warm starts. All targets are
fit together as a batch of independent networks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .sim import lagged_history

DEFAULT_PATH = np.geomspace(1e-2, 1e2, 30)


def lagged_design(z: np.ndarray, L: int):
    """Stack ``(h_t, z_t)`` pairs from every sequence and every ``t >= L``."""
    z = np.asarray(z, dtype=float)
    X = np.concatenate([lagged_history(z, t, L) for t in range(L, z.shape[1])])
    Y = np.concatenate([z[:, t] for t in range(L, z.shape[1])])
    return X, Y


def hier_prox(theta: torch.Tensor, w: torch.Tensor, lam: float, M: float):
    """Hierarchical proximal step, batched.

    ``theta`` is ``[K, d]`` and ``w`` is ``[K, H, d]`` (column ``j`` feeds
    feature ``j`` into the hidden layer).
    """
    H = w.shape[1]
    w_abs = w.abs().transpose(1, 2)  # [K, d, H]
    sorted_w, _ = torch.sort(w_abs, dim=-1, descending=True)
    zeros = torch.zeros_like(sorted_w[..., :1])
    csum = torch.cat([zeros, torch.cumsum(sorted_w, dim=-1)], dim=-1)  # [K, d, H+1]
    m = torch.arange(H + 1, dtype=w.dtype)
    cand = M / (1 + m * M**2) * torch.clamp(theta.abs().unsqueeze(-1) + M * csum - lam, min=0.0)
    upper = torch.cat([torch.full_like(zeros, float("inf")), sorted_w], dim=-1)
    lower = torch.cat([sorted_w, zeros], dim=-1)
    ok = (lower <= cand) & (cand <= upper)
    first = torch.argmax(ok.to(torch.int8), dim=-1, keepdim=True)
    w_sel = torch.gather(cand, -1, first).squeeze(-1)  # [K, d]
    new_theta = torch.sign(theta) * w_sel / M
    new_w = torch.sign(w) * torch.minimum(w.abs(), w_sel.unsqueeze(1))
    return new_theta, new_w


def knee_index(path: np.ndarray, error: np.ndarray) -> int:
    """Kneedle point of an error curve over log penalties.

    Both axes are rescaled to [0, 1]; the knee is the point furthest below
    the chord, where the error starts climbing. A flat curve has its knee
    at the largest penalty.
    """
    x = np.log(np.asarray(path, dtype=float))
    y = np.asarray(error, dtype=float)
    if len(x) < 2 or np.ptp(y) == 0:
        return len(x) - 1
    xn = (x - x[0]) / (x[-1] - x[0])
    yn = (y - y.min()) / np.ptp(y)
    return int(np.argmax(xn - yn))


@dataclass
class PathFit:
    path: np.ndarray
    scores: np.ndarray  # [K, d] largest penalty at which each feature is active
    threshold: np.ndarray  # [K]
    val_error: np.ndarray  # [K, len(path)] validation MSE, standardized units
    active: np.ndarray  # [len(path), K, d]


class _Batched(torch.nn.Module):
    def __init__(self, K, d, hidden, gen):
        super().__init__()
        scale = 1.0 / np.sqrt(d)
        self.theta = torch.nn.Parameter(torch.zeros(K, d, dtype=torch.float64))
        self.w1 = torch.nn.Parameter((torch.rand(K, hidden, d, generator=gen, dtype=torch.float64) * 2 - 1) * scale)
        self.b1 = torch.nn.Parameter(torch.zeros(K, hidden, dtype=torch.float64))
        self.w2 = torch.nn.Parameter((torch.rand(K, hidden, generator=gen, dtype=torch.float64) * 2 - 1) / np.sqrt(hidden))
        self.b0 = torch.nn.Parameter(torch.zeros(K, dtype=torch.float64))

    def forward(self, x):
        K, H, d = self.w1.shape
        hid = torch.relu((x @ self.w1.reshape(K * H, d).T).view(-1, K, H) + self.b1)
        return x @ self.theta.T + (hid * self.w2).sum(-1) + self.b0


def fit_path(X, Y, path=DEFAULT_PATH, *, hidden=32, M=10.0, lr=0.05, dense_steps=1000, dense_lr=0.01,
             steps_per_penalty=60, momentum=0.9, val_fraction=0.2, max_samples=10_000, seed=0) -> PathFit:
    """Fit the regularization path for every column of ``Y`` on ``X``.

    The threshold of target ``k`` sits just below the knee of its
    validation-error curve, see :func:`knee_index`. Features still active
    at the knee penalty are reported as parents.
    """
    path = np.sort(np.asarray(path, dtype=float))
    rng = np.random.default_rng(seed)
    idx = rng.permutation(X.shape[0])[:max_samples]
    X, Y = np.asarray(X, float)[idx], np.asarray(Y, float)[idx]
    n_val = max(1, int(round(val_fraction * X.shape[0])))
    tr, va = slice(n_val, None), slice(0, n_val)
    mu_x, sd_x = X[tr].mean(0), X[tr].std(0)
    mu_y, sd_y = Y[tr].mean(0), Y[tr].std(0)
    sd_x[sd_x == 0] = 1.0
    sd_y[sd_y == 0] = 1.0
    Xs = torch.from_numpy((X - mu_x) / sd_x)
    Ys = torch.from_numpy((Y - mu_y) / sd_y)

    gen = torch.Generator().manual_seed(seed)
    K, d = Y.shape[1], X.shape[1]
    net = _Batched(K, d, hidden, gen)
    # the unpenalized warm start uses Adam; the path uses momentum SGD
    opt = torch.optim.Adam(net.parameters(), lr=dense_lr)

    def run(steps, lam):
        for _ in range(steps):
            opt.zero_grad()
            loss = 0.5 * ((net(Xs[tr]) - Ys[tr]) ** 2).mean(0).sum()
            loss.backward()
            opt.step()
            if lam > 0:
                with torch.no_grad():
                    # at steady state momentum steps by lr * g / (1 - momentum); matching the
                    # prox threshold keeps the fixed point at the penalized optimum
                    theta, w1 = hier_prox(net.theta, net.w1, lam * lr / (1 - momentum), M)
                    net.theta.copy_(theta)
                    net.w1.copy_(w1)

    run(dense_steps, 0.0)
    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=momentum)
    active = np.zeros((len(path), K, d), bool)
    val_error = np.zeros((K, len(path)))
    for i, lam in enumerate(path):
        run(steps_per_penalty, lam)
        with torch.no_grad():
            val_error[:, i] = ((net(Xs[va]) - Ys[va]) ** 2).mean(0).numpy()
            active[i] = (net.theta != 0).numpy()

    scores = np.where(active, path[:, None, None], 0.0).max(axis=0)
    knee = np.array([knee_index(path, row) for row in val_error])
    ratio = path[1] / path[0] if len(path) > 1 else 2.0
    lower = np.where(knee > 0, path[np.maximum(knee - 1, 0)], path[0] / ratio)
    threshold = np.sqrt(lower * path[knee])
    return PathFit(path, scores, threshold, val_error, active)
