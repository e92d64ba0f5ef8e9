"""Acceptance criteria at desk scale.

Each test records one ``PASS``/``FAIL`` line (printed in the terminal
summary and written to ``acceptance_results.txt``) and then asserts the
criterion with the pinned tolerance below. Training runs are shared
between criteria and take roughly twenty minutes on one core.
"""
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from tdrl.conditions import (
    check_conditions, conditional_independence_score, density_from_trajectories, gaussian_counterexample,
    heteronoise_density, iid_normal_density, sample_probes, tanh_precision,
)
from tdrl.data import make_dataset, split_indices
from tdrl.evaluation import brute_force_mcc, compare_skeleton, mcc, recover_skeleton
from tdrl.model import DTYPE, ModelConfig, PosteriorStats, TDRLModel
from tdrl.sim import default_spec, simulate, simulate_gaussian_additive
from tdrl.trainer import TrainConfig, elbo_step, encode_means, mc_kld, train

pytestmark = pytest.mark.slow

# pinned tolerances
MCC_HETERONOISE = 0.90
MCC_CHANGING = 0.85
MCC_MODULAR = 0.90
ABLATION_GAP = 0.20
CI_MAX = 0.10
COUNTEREXAMPLE_MCC = 0.99
PRIOR_TOL = 1e-6
KL_SE = 3.0
GRAD_RTOL = 1e-4
F1_TRUTH = 0.80
F1_MODEL = 0.60
EDGE_DENSITY_MAX = 0.40

RESULTS = []
RESULTS_FILE = Path(__file__).resolve().parent.parent / "acceptance_results.txt"


def record(key, label, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  [{key}] {label}: {detail}"
    RESULTS[:] = [r for r in RESULTS if f"[{key}]" not in r] + [line]
    RESULTS.sort(key=lambda r: r.split("]")[0].split("[")[1])
    RESULTS_FILE.write_text("\n".join(RESULTS) + "\n")
    print(line)
    assert ok, line


# shared training runs ----------------------------------------------------------

DATASETS = {
    "heteronoise": lambda: default_spec("heteronoise_fixed", num_seqs=50_000),
    "changing": lambda: default_spec("changing_dynamics", m=5),
    "modular": lambda: default_spec("modular", m=5),
}


@lru_cache(maxsize=None)
def dataset(name):
    return make_dataset(DATASETS[name]())


@lru_cache(maxsize=None)
def fitted(name, prior="flow"):
    ds = dataset(name)
    spec = ds.spec
    mc = ModelConfig(n=spec.n, L=spec.L, partition=spec.partition, m=spec.m, prior=prior)
    tc = TrainConfig()
    ckpt, hist = train(ds, mc, tc)
    _, va = split_indices(ds.num_seqs, tc.val_fraction, tc.seed)
    z_est = encode_means(ckpt.build(), ds.x[va])
    return ds.z[va], z_est, mcc(ds.z[va], z_est), hist


def _mcc_criterion(key, name, target):
    z_true, _, rep, hist = fitted(name)
    record(key, f"{name} MCC (spearman)", rep.mcc >= target,
           f"{rep.mcc:.3f} (target >= {target}, {len(hist.records)} epochs, {hist.stop_reason})")


def test_1_heteronoise_mcc():
    _mcc_criterion("1", "heteronoise", MCC_HETERONOISE)


def test_2_changing_dynamics_mcc():
    _mcc_criterion("2", "changing", MCC_CHANGING)


def test_3_modular_mcc():
    _mcc_criterion("3", "modular", MCC_MODULAR)


def test_4_normal_prior_ablation_gap():
    full = fitted("heteronoise")[2].mcc
    ablated = fitted("heteronoise", "normal")[2].mcc
    gap = full - ablated
    record("4", "normal-prior ablation gap", gap >= ABLATION_GAP,
           f"full {full:.3f} - normal {ablated:.3f} = {gap:.3f} (target >= {ABLATION_GAP})")


# analytic and property criteria ----------------------------------------------

def test_5_gaussian_counterexample():
    # unit innovations keep the spline regression error small next to the noise
    spec = default_spec("gaussian_additive", num_seqs=20_000, noise_params={"sigma": 1.0})
    traj = simulate_gaussian_additive(spec)
    z = traj.z
    worst_ci, worst_mcc = 0.0, 0.0
    for seed in range(10):
        z_hat = gaussian_counterexample(z, traj.transition_params["noise_vars"], seed=seed)
        worst_ci = max(worst_ci, conditional_independence_score(z_hat, lags=spec.L).max())
        worst_mcc = max(worst_mcc, mcc(z.reshape(-1, spec.n), z_hat.reshape(-1, spec.n), "pearson").mcc)
    ok = worst_ci < CI_MAX and worst_mcc < COUNTEREXAMPLE_MCC
    record("5", "Gaussian counterexample over 10 rotations", ok,
           f"max CI score {worst_ci:.3f} (< {CI_MAX}), max MCC {worst_mcc:.3f} (< {COUNTEREXAMPLE_MCC})")


def test_6_condition_checker_verdicts():
    verdicts = {}
    spec = default_spec("gaussian_additive", n=4, num_seqs=200)
    trajs = simulate(spec)
    cur, prev = sample_probes(trajs[0].z, spec.L)
    verdicts["gaussian_additive"] = check_conditions(density_from_trajectories(trajs), cur, prev).verdict
    rng = np.random.default_rng(0)
    verdicts["iid"] = check_conditions(iid_normal_density(4), rng.normal(size=(8, 4)), rng.normal(size=(64, 8))).verdict
    A, W = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    dm = heteronoise_density(lambda h: np.tanh(h @ W.T), tanh_precision(A), 4)
    verdicts["heteronoise"] = check_conditions(dm, rng.normal(size=(8, 4)), rng.normal(size=(64, 8))).verdict
    expected = {"gaussian_additive": "dependent", "iid": "dependent", "heteronoise": "independent"}
    record("6", "condition-checker verdicts", verdicts == expected, str(verdicts))


def _prior_closed_form_error():
    # constant conditioner heads: eps = e^a z + b, so z ~ N(-b e^-a, e^-2a) exactly
    cfg = ModelConfig(n=4, L=2, partition=(None, 1, 1), m=2, seed=1)
    model = TDRLModel(cfg)
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-0.5, 0.5, 4), rng.normal(size=4)
    with torch.no_grad():
        for flow, sl in ((model.fix_flow, slice(0, 2)), (model.chg_flow, slice(2, 3)), (model.obs_flow, slice(3, 4))):
            flow.w3.zero_()
            flow.b3.copy_(torch.tensor(np.stack([a[sl], b[sl]], 1)))
    z = rng.normal(size=(16, 5, 4))
    out = model.prior_log_density(torch.tensor(z), torch.tensor(rng.integers(0, 2, 16)))
    ref = stats.norm.logpdf(z[:, 2:], loc=-b * np.exp(-a), scale=np.exp(-a)).sum(-1)
    return np.abs(out.log_prior.detach().numpy() - ref).max()


def _kl_z_score():
    model = TDRLModel(ModelConfig(n=1, L=1, prior="normal"))
    N = 100_000
    z = 1 + torch.randn(N, 2, 1, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    st = PosteriorStats(torch.ones_like(z), torch.zeros_like(z))
    est = mc_kld(st, model.prior_log_density(z, 0), z).item()
    return est, abs(est - 0.5) / (1 / np.sqrt(2 * N))


def _gradient_error():
    torch.manual_seed(0)
    model = TDRLModel(ModelConfig(n=3, L=1, partition=(None, 1, 1), m=2, enc_dec_width=8, flow_width=6))
    with torch.no_grad():
        for flow in (model.fix_flow, model.chg_flow, model.obs_flow):
            flow.w3.normal_(0, 0.3)
    x = torch.randn(5, 3, 3, dtype=DTYPE)
    u = torch.tensor([0, 1, 1, 0, 1])

    def loss():
        return elbo_step(model, x, u, 0.5, generator=torch.Generator().manual_seed(7))["total"]

    model.zero_grad()
    loss().backward()
    worst = 0.0
    rng = np.random.default_rng(0)
    for p in model.parameters():
        flat = p.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
            old = flat[i].item()
            h = 1e-6 * max(1.0, abs(old))
            with torch.no_grad():
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
            fd, an = (up - down) / (2 * h), p.grad.view(-1)[i].item()
            worst = max(worst, abs(fd - an) / max(abs(an), abs(fd), 1e-3))
    return worst


def _assignment_mismatch():
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(100):
        n = 1 + i % 6
        z = rng.normal(size=(60, n))
        est = z @ rng.normal(size=(n, n)) + 0.5 * rng.normal(size=(60, n))
        worst = max(worst, abs(mcc(z, est).mcc - brute_force_mcc(z, est)))
    return worst


def test_7_analytic_checks():
    prior_err = _prior_closed_form_error()
    kl, kl_z = _kl_z_score()
    grad_err = _gradient_error()
    assign_err = _assignment_mismatch()
    ok = prior_err < PRIOR_TOL and kl_z < KL_SE and grad_err < GRAD_RTOL and assign_err < 1e-12
    record("7", "analytic checks", ok,
           f"prior err {prior_err:.1e} (< {PRIOR_TOL:g}); MC-KL {kl:.4f} vs 0.5 at {kl_z:.2f} SE (< {KL_SE:g}); "
           f"grad rel err {grad_err:.1e} (< {GRAD_RTOL:g}); assignment vs brute force {assign_err:.1e} over 100")


def test_8_skeleton_f1():
    ds = dataset("heteronoise")
    density = ds.adjacency.mean()
    L = ds.spec.L
    f1_truth = compare_skeleton(recover_skeleton(ds.z, L), ds.adjacency, np.arange(ds.spec.n))
    z_true, z_est, rep, _ = fitted("heteronoise")
    f1_model = compare_skeleton(recover_skeleton(z_est, L), ds.adjacency, rep)
    ok = density <= EDGE_DENSITY_MAX and f1_truth >= F1_TRUTH and f1_model >= F1_MODEL
    record("8", "skeleton F1", ok,
           f"edge density {density:.3f} (<= {EDGE_DENSITY_MAX}); ground truth {f1_truth:.3f} (>= {F1_TRUTH}); "
           f"model latents {f1_model:.3f} (>= {F1_MODEL})")
