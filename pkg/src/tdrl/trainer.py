"""ELBO optimization with a sampled KL term, early stopping and beta selection."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .data import ObservedDataset, split_indices
from .errors import ConfigError, NumericalError
from .model import ChangeFactors, ModelConfig, PosteriorStats, PriorOutput, TDRLModel, as_tensor, log_posterior, \
    reparameterized_sample

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.002
    batch: int = 64
    max_epochs: int = 50
    patience: int = 5
    beta_grid: tuple = (0.002,)
    mc_samples: int = 1
    seed: int = 0
    val_fraction: float = 0.1
    weight_decay: float = 1e-4

    def __post_init__(self):
        self.beta_grid = tuple(float(b) for b in self.beta_grid)
        self.validate()

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.patience < 1 or self.mc_samples < 1 or self.batch < 1 or self.max_epochs < 1:
            raise ConfigError("patience, mc_samples, batch and max_epochs must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta_grid"] = list(self.beta_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_recon: float
    train_kld: float
    train_total: float
    val_recon: float
    val_kld: float
    val_total: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""
    wall_time: float = 0.0

    @property
    def best_val(self) -> float:
        return self.records[self.best_epoch].val_total

    def rows(self):
        return [asdict(r) for r in self.records]


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state: dict
    best_epoch: int
    train_config: Optional[TrainConfig] = None

    def build(self) -> TDRLModel:
        model = TDRLModel(self.model_config)
        model.load_state_dict(self.state)
        model.eval()
        return model


def mc_kld(stats: PosteriorStats, prior: PriorOutput, z_hat: torch.Tensor) -> torch.Tensor:
    """Mean over steps and components of ``log q(z_hat | x) - log p(z_hat | history, u)``.

    ``z_hat`` may carry a leading sample axis; the estimate then averages
    over it as well.
    """
    log_p = prior.elementwise()
    if log_p.shape != z_hat.shape:
        raise ConfigError(f"prior {tuple(log_p.shape)} and sample {tuple(z_hat.shape)} shapes differ")
    return (log_posterior(stats, z_hat) - log_p).mean()


def elbo_step(model: TDRLModel, x: torch.Tensor, domain, beta: float, cf: Optional[ChangeFactors] = None,
              mc_samples: int = 1, generator: Optional[torch.Generator] = None) -> dict:
    """Losses ``{recon, kld, total}`` on one batch, ``total = recon + beta * kld``."""
    if x.shape[-2] < model.config.L + 2:
        raise ConfigError(f"sequences need at least L+2 = {model.config.L + 2} steps, got {x.shape[-2]}")
    stats = model.encode(x)
    shape = (mc_samples,) + tuple(stats.mu.shape)
    noise = torch.randn(shape, generator=generator, dtype=stats.mu.dtype)
    z_hat = reparameterized_sample(PosteriorStats(stats.mu.expand(shape), stats.log_var.expand(shape)), noise)
    recon = ((model.decode(z_hat) - x) ** 2).mean()
    prior = model.prior_log_density(z_hat, domain, cf)
    kld = mc_kld(stats, prior, z_hat)
    total = recon + beta * kld
    for name, value in (("recon", recon), ("kld", kld), ("total", total)):
        if not torch.isfinite(value):
            raise NumericalError(f"non-finite {name} loss ({value.item()})")
    return {"recon": recon, "kld": kld, "total": total}


def _batches(idx: np.ndarray, size: int):
    for start in range(0, len(idx), size):
        yield idx[start : start + size]


def _evaluate(model, x, u, idx, beta, batch, seed):
    gen = torch.Generator().manual_seed(seed)
    sums = np.zeros(3)
    with torch.no_grad():
        for b in _batches(idx, max(batch, 256)):
            losses = elbo_step(model, x[b], u[b], beta, generator=gen)
            sums += len(b) * np.array([losses[k].item() for k in ("recon", "kld", "total")])
    return sums / len(idx)


def check_compatible(dataset: ObservedDataset, config: ModelConfig):
    if dataset.x.shape[-1] != config.obs_dim:
        raise ConfigError(f"dataset has {dataset.x.shape[-1]} observed features, model expects {config.obs_dim}")
    if dataset.domain.size and dataset.domain.max() >= config.m:
        raise ConfigError(f"dataset has domain {dataset.domain.max()} but the model was built for m={config.m}")
    if (config.partition[1] or config.partition[2]) and dataset.m < 2:
        raise ConfigError("changing or observation blocks need domain labels from at least two domains")


def train(dataset: ObservedDataset, model_config: ModelConfig, train_config: TrainConfig,
          progress: Optional[Callable[[str], None]] = None, callback: Optional[Callable] = None):
    """Fit a fresh model; returns the best-validation checkpoint and the history.

    ``progress`` receives one ``epoch,recon,kld,total`` CSV line per epoch
    (validation losses); ``callback(epoch, model)`` runs after each epoch.
    """
    train_config.validate()
    check_compatible(dataset, model_config)
    start = time.perf_counter()
    tr, va = split_indices(dataset.num_seqs, train_config.val_fraction, train_config.seed)
    x, u = as_tensor(dataset.x), torch.as_tensor(dataset.domain)
    model = TDRLModel(model_config)
    opt = torch.optim.AdamW(model.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay)
    rng = np.random.default_rng(train_config.seed)
    gen = torch.Generator().manual_seed(train_config.seed)
    beta = model_config.beta
    history = TrainHistory()
    best_state, best_val, stale = None, np.inf, 0
    if progress:
        progress("epoch,recon,kld,total")
    for epoch in range(train_config.max_epochs):
        model.train()
        sums = np.zeros(3)
        order = rng.permutation(tr)
        for b in _batches(order, train_config.batch):
            losses = elbo_step(model, x[b], u[b], beta, mc_samples=train_config.mc_samples, generator=gen)
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            sums += len(b) * np.array([losses[k].item() for k in ("recon", "kld", "total")])
        model.eval()
        val = _evaluate(model, x, u, va, beta, train_config.batch, train_config.seed + 1)
        history.records.append(EpochRecord(epoch, *(sums / len(tr)), *val))
        if progress:
            progress(f"{epoch},{val[0]:.6g},{val[1]:.6g},{val[2]:.6g}")
        if callback is not None:
            callback(epoch, model)
        if val[2] < best_val:
            best_val, stale = val[2], 0
            history.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= train_config.patience:
                history.stop_reason = f"early stop: no validation improvement for {stale} epochs"
                break
    if not history.stop_reason:
        history.stop_reason = f"reached max_epochs={train_config.max_epochs}"
    history.wall_time = time.perf_counter() - start
    return Checkpoint(model_config, best_state, history.best_epoch, train_config), history


def select_beta(dataset: ObservedDataset, model_config: ModelConfig, train_config: TrainConfig,
                progress: Optional[Callable[[str], None]] = None):
    """Train one model per ``beta_grid`` entry; returns ``(best_beta, results)``.

    ``results`` holds one dict per grid point with ``beta`` and either
    ``checkpoint``/``history`` or ``error``. Ties keep the first grid entry.
    """
    if not train_config.beta_grid:
        raise ConfigError("beta_grid is empty")
    results, best, best_val = [], None, np.inf
    for beta in train_config.beta_grid:
        cfg = ModelConfig.from_dict({**model_config.to_dict(), "beta": beta})
        try:
            ckpt, hist = train(dataset, cfg, train_config, progress)
        except (NumericalError, RuntimeError) as exc:
            logger.warning("beta=%g failed: %s", beta, exc)
            results.append({"beta": beta, "error": str(exc)})
            continue
        results.append({"beta": beta, "checkpoint": ckpt, "history": hist})
        if hist.best_val < best_val:
            best, best_val = beta, hist.best_val
    if best is None:
        raise NumericalError("training failed for every beta in the grid")
    return best, results


def encode_means(model: TDRLModel, x: np.ndarray, batch: int = 1024) -> np.ndarray:
    """Posterior means for every step of ``x`` (``[..., T, obs_dim]``)."""
    xt = as_tensor(x)
    out = []
    with torch.no_grad():
        for start in range(0, xt.shape[0], batch):
            out.append(model.encode(xt[start : start + batch]).mu.numpy())
    return np.concatenate(out) if out else np.zeros(x.shape[:-1] + (model.config.n,))
