import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdrl.errors import ConfigError
from tdrl.mixing import MixingFunction, apply_mixing, invert_mixing, make_random_mixing


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 10), depth=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_round_trip(n, depth, seed):
    g = make_random_mixing(n, depth, seed)
    z = np.random.default_rng(seed).normal(size=(200, n)) * 3
    assert np.abs(invert_mixing(g, apply_mixing(g, z)) - z).max() <= 1e-8


def test_round_trip_keeps_leading_axes(rng):
    g = make_random_mixing(4, 3, 1)
    z = rng.normal(size=(5, 7, 4))
    x = apply_mixing(g, z)
    assert x.shape == z.shape
    assert np.allclose(invert_mixing(g, x), z, atol=1e-10)


def test_singular_values_in_range():
    g = make_random_mixing(8, 3, 2)
    for w in g.weights:
        s = np.linalg.svd(w, compute_uv=False)
        assert s.min() >= 0.5 - 1e-12 and s.max() <= 2 + 1e-12
        assert np.linalg.cond(w) <= 4 + 1e-9


def test_identity_layer_is_leaky_relu():
    g = MixingFunction((np.eye(3),), (np.zeros(3),), 0.2)
    z = np.array([[1.0, -1.0, 0.0]])
    assert np.allclose(apply_mixing(g, z), [[1.0, -0.2, 0.0]])


def test_slope_one_is_affine(rng):
    g = make_random_mixing(5, 3, 3, slope=1.0)
    z = rng.normal(size=(50, 5))
    # slope 1 makes the whole map affine: recover A and c by least squares
    x = apply_mixing(g, z)
    design = np.hstack([z, np.ones((50, 1))])
    coef, *_ = np.linalg.lstsq(design, x, rcond=None)
    assert np.abs(design @ coef - x).max() < 1e-10
    a = g.weights[2] @ g.weights[1] @ g.weights[0]
    assert np.allclose(coef[:5].T, a)


def test_deterministic_and_seed_sensitive():
    a, b, c = make_random_mixing(6, 3, 7), make_random_mixing(6, 3, 7), make_random_mixing(6, 3, 8)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert not np.allclose(a.weights[0], c.weights[0])


def test_injective_on_random_pairs(rng):
    g = make_random_mixing(4, 3, 5)
    z1, z2 = rng.normal(size=(1000, 4)), rng.normal(size=(1000, 4))
    dx = np.linalg.norm(apply_mixing(g, z1) - apply_mixing(g, z2), axis=1)
    dz = np.linalg.norm(z1 - z2, axis=1)
    # each layer contracts by at most 0.5 * slope, so the map is bi-Lipschitz
    assert np.all(dx >= (0.5 * 0.2) ** 3 * dz - 1e-12)


def test_dict_round_trip():
    g = make_random_mixing(3, 2, 0)
    h = MixingFunction.from_dict(g.to_dict())
    assert all(np.array_equal(x, y) for x, y in zip(g.weights, h.weights))
    assert h.slope == g.slope


def test_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        MixingFunction((np.diag([1.0, 1e-6]),), (np.zeros(2),))
    with pytest.raises(ConfigError):
        make_random_mixing(0)
    with pytest.raises(ConfigError):
        apply_mixing(make_random_mixing(3), np.zeros((2, 4)))
    with pytest.raises(ConfigError):
        MixingFunction((np.eye(2),), (np.zeros(2),), slope=0.0)
