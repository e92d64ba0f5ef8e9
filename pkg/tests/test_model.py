import numpy as np
import pytest
import torch
from scipy import integrate, stats

from tdrl.errors import ConfigError
from tdrl.model import (
    DTYPE, ModelConfig, PosteriorStats, TDRLModel, log_posterior, reparameterized_sample,
)


def _randomize_heads(model, seed=0, scale=0.3):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for flow in (model.fix_flow, model.chg_flow, model.obs_flow):
            if flow is not None:
                flow.w3.copy_(scale * torch.randn(flow.w3.shape, generator=gen, dtype=DTYPE))
                flow.b3.copy_(scale * torch.randn(flow.b3.shape, generator=gen, dtype=DTYPE))
    return model


def _conditioner_numpy(flow, c, slope):
    """Independent loop-per-component evaluation of a conditioner."""
    w1, b1, w2, b2, w3, b3 = (p.detach().numpy() for p in (flow.w1, flow.b1, flow.w2, flow.b2, flow.w3, flow.b3))
    act = lambda v: np.where(v > 0, v, slope * v)
    out = []
    for k in range(w1.shape[0]):
        h = act(c @ w1[k].T + b1[k])
        h = act(h @ w2[k].T + b2[k])
        out.append(h @ w3[k].T + b3[k])
    out = np.stack(out, axis=-2)
    return out[..., 0], out[..., 1]


def test_flow_prior_matches_conditional_gaussian_closed_form():
    cfg = ModelConfig(n=5, L=2, partition=(None, 2, 1), m=3, seed=1)
    model = _randomize_heads(TDRLModel(cfg), 1)
    z = torch.randn(4, 6, 5, dtype=DTYPE, generator=torch.Generator().manual_seed(2))
    domain = torch.tensor([0, 2, 1, 2])
    out = model.prior_log_density(z, domain)
    zn, L = z.numpy(), cfg.L
    hist = np.concatenate([zn[:, L - tau : 6 - tau] for tau in (1, 2)], axis=-1)
    cf = model.change_factors
    th_dyn = cf.theta_dyn.detach().numpy()[domain.numpy()][:, None].repeat(4, 1)
    th_obs = cf.theta_obs.detach().numpy()[domain.numpy()][:, None].repeat(4, 1)
    parts = [
        _conditioner_numpy(model.fix_flow, hist, cfg.slope),
        _conditioner_numpy(model.chg_flow, np.concatenate([hist, th_dyn], -1), cfg.slope),
        _conditioner_numpy(model.obs_flow, th_obs, cfg.slope),
    ]
    a = np.concatenate([p[0] for p in parts], -1)
    b = np.concatenate([p[1] for p in parts], -1)
    # eps = e^a z + b with eps ~ N(0, 1)  <=>  z ~ N(-b e^{-a}, e^{-2a})
    ref = stats.norm.logpdf(zn[:, L:], loc=-b * np.exp(-a), scale=np.exp(-a)).sum(-1)
    assert np.abs(out.log_prior.detach().numpy() - ref).max() < 1e-6
    head = stats.norm.logpdf(zn[:, :L])
    assert np.abs(out.elementwise().detach().numpy()[:, :L] - head).max() < 1e-12


def test_prior_normalizes_by_quadrature():
    cfg = ModelConfig(n=1, L=1, flow_width=8, seed=3)
    model = _randomize_heads(TDRLModel(cfg), 3, scale=0.5)
    for prev in (-1.3, 0.2, 2.0):
        def density(v):
            z = torch.tensor([[[prev], [v]]], dtype=DTYPE)
            return float(torch.exp(model.prior_log_density(z, 0).log_prior).detach())
        total, err = integrate.quad(density, -50, 50, limit=200, points=[0.0])
        assert abs(total - 1) < 1e-6


def test_log_jacobian_matches_autograd():
    cfg = ModelConfig(n=3, L=1, partition=(None, 1, 1), m=2, flow_width=16, seed=4)
    model = _randomize_heads(TDRLModel(cfg), 4)
    z = torch.randn(2, 3, dtype=DTYPE)
    cur = torch.randn(3, dtype=DTYPE, requires_grad=True)

    def eps(c):
        return model.inverse_transition(torch.stack([z[0], c]), 1)[0]

    J = torch.autograd.functional.jacobian(eps, cur)
    log_jac = model.prior_log_density(torch.stack([z[0], cur]), 1).log_jac[0]
    assert torch.allclose(J, torch.diag(torch.diag(J)), atol=1e-12)
    assert torch.allclose(torch.log(torch.abs(torch.diag(J))), log_jac, atol=1e-12)


def test_block_conditioning_structure():
    cfg = ModelConfig(n=4, L=1, partition=(2, 1, 1), m=2, flow_width=16, seed=5)
    model = _randomize_heads(TDRLModel(cfg), 5)
    z = torch.randn(1, 2, 4, dtype=DTYPE, requires_grad=True)
    e0 = model.inverse_transition(z, 0)[0, 0]
    e1 = model.inverse_transition(z, 1)[0, 0]
    assert torch.allclose(e0[:2], e1[:2])  # fixed block ignores the domain
    assert not torch.allclose(e0[2:], e1[2:])
    (g,) = torch.autograd.grad(e0[3], z)
    assert torch.all(g[0, 0] == 0)  # observation block ignores history
    (g,) = torch.autograd.grad(model.inverse_transition(z, 0)[0, 0, 2], z)
    assert torch.any(g[0, 0] != 0)


def test_fresh_flow_is_identity_and_normal_prior():
    z = torch.randn(3, 5, 2, dtype=DTYPE)
    flow = TDRLModel(ModelConfig(n=2, L=2)).prior_log_density(z, 0)
    normal = TDRLModel(ModelConfig(n=2, L=2, prior="normal")).prior_log_density(z, 0)
    ref = torch.from_numpy(stats.norm.logpdf(z[:, 2:].numpy()).sum(-1))
    for out in (flow, normal):
        assert torch.allclose(out.log_prior, ref, atol=1e-12)
        assert torch.allclose(out.eps_hat, z[:, 2:])


def test_encoder_is_per_step():
    model = TDRLModel(ModelConfig(n=3, seed=6))
    x = torch.randn(2, 7, 3, dtype=DTYPE)
    perm = torch.randperm(7)
    a, b = model.encode(x), model.encode(x[:, perm])
    assert torch.allclose(a.mu[:, perm], b.mu) and torch.allclose(a.log_var[:, perm], b.log_var)


def test_decoder_shape_and_obs_dim():
    model = TDRLModel(ModelConfig(n=3, obs_dim=5))
    assert model.decode(torch.zeros(4, 3, dtype=DTYPE)).shape == (4, 5)
    with pytest.raises(ConfigError):
        model.encode(torch.zeros(4, 3, dtype=DTYPE))
    with pytest.raises(ConfigError):
        model.decode(torch.zeros(4, 5, dtype=DTYPE))


def test_bad_domain_raises_index_error():
    model = TDRLModel(ModelConfig(n=3, partition=(None, 1, 0), m=2))
    z = torch.zeros(1, 4, 3, dtype=DTYPE)
    for bad in (2, -1):
        with pytest.raises(IndexError):
            model.prior_log_density(z, bad)
    with pytest.raises(ConfigError):
        model.prior_log_density(z[:, :2], 0)


def test_posterior_density_and_sampling():
    mu = torch.tensor([0.5, -1.0], dtype=DTYPE)
    log_var = torch.tensor([0.0, np.log(4.0)], dtype=DTYPE)
    st = PosteriorStats(mu, log_var)
    z = torch.tensor([1.0, 2.0], dtype=DTYPE)
    ref = stats.norm.logpdf([1.0, 2.0], loc=[0.5, -1.0], scale=[1.0, 2.0])
    assert np.allclose(log_posterior(st, z).numpy(), ref, atol=1e-12)
    assert torch.allclose(reparameterized_sample(st, torch.ones(2, dtype=DTYPE)), torch.tensor([1.5, 1.0], dtype=DTYPE))
    with pytest.raises(ConfigError):
        reparameterized_sample(st, torch.ones(3, dtype=DTYPE))


def test_seeded_construction_is_deterministic():
    a, b = TDRLModel(ModelConfig(n=3, seed=9)), TDRLModel(ModelConfig(n=3, seed=9))
    c = TDRLModel(ModelConfig(n=3, seed=10))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not torch.equal(sa["encoder.0.weight"], sc["encoder.0.weight"])


def test_config_validation_and_round_trip():
    cfg = ModelConfig(n=9, partition=(None, 2, 1), m=5)
    assert cfg.partition == (6, 2, 1)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(n=3, partition=(1, 1, 0)), dict(n=3, beta=0.0), dict(n=3, prior="laplace"),
                dict(n=3, partition=(None, 1, 0), theta_dyn_dim=0)):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"n": 3, "width": 4})
