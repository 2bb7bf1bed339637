import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import detector_params
from explainseg.attribution import (DEFAULT_REFERENCES, AttributionConfig, Reference, attribute,
                                    completeness_error, integrated_gradients, midpoint_alphas,
                                    multi_reference_ig, reference_ig, smoothgrad_ig)
from explainseg.classifier import ClassifierParams, forward_logits, input_gradient_array
from explainseg.errors import ConfigError, PreconditionError, ShapeError
from explainseg.volume import MiniVolume, Volume


def _x(rng, h=8, w=8):
    return rng.uniform(0, 1, (7, h, w)).astype(np.float32)


def test_midpoint_alphas():
    np.testing.assert_array_equal(midpoint_alphas(4), [0.125, 0.375, 0.625, 0.875])


def test_identical_input_and_baseline(small_params, rng):
    x = _x(rng)
    assert not integrated_gradients(small_params, x, x.copy(), steps=8).data.any()


@pytest.mark.parametrize("steps", [1, 3, 32])
def test_linear_path_identity(steps):
    # with a unique brightest voxel and a zero baseline the logit is linear on the path
    p = detector_params(threshold=-2.0, gain=1.5)
    x = np.zeros((7, 8, 8), np.float32)
    x[3, 4, 4] = 0.75
    x[2, 1, 6] = 0.25
    ig = integrated_gradients(p, x, np.zeros_like(x), steps=steps).data
    expected = np.zeros_like(ig)
    expected[3, 4, 4] = 1.5 * 0.75
    np.testing.assert_array_equal(ig, expected)


def test_antisymmetry_on_linear_path():
    p = detector_params(threshold=-2.0, gain=1.5)
    x = np.zeros((7, 8, 8), np.float32)
    x[3, 4, 4] = 0.5
    base = np.zeros_like(x)
    fwd = integrated_gradients(p, x, base, steps=5).data
    back = integrated_gradients(p, base, x, steps=5).data
    np.testing.assert_array_equal(fwd, -back)


def test_ig_sum_matches_pointwise_riemann_sum(small_params, rng):
    x, b = _x(rng), np.full((7, 8, 8), 0.25, np.float32)
    steps = 6
    ig = integrated_gradients(small_params, x, b, steps=steps).data.astype(np.float64)
    pts = np.stack([b + a * (x - b) for a in midpoint_alphas(steps).astype(np.float32)])
    g = input_gradient_array(small_params, pts)
    oracle = (x - b).astype(np.float64) * g.astype(np.float64).mean(axis=0)
    np.testing.assert_allclose(ig, oracle, rtol=1e-4, atol=1e-6)


def test_completeness_converges(small_params, rng):
    x = _x(rng)
    errs = [completeness_error(small_params, x, np.zeros_like(x), s, dtype=np.float64)[0]
            for s in (4, 4096)]
    assert errs[1] < 1e-2
    assert errs[1] < errs[0] or errs[0] < 1e-6


def test_completeness_zero_delta(small_params, rng):
    x = _x(rng)
    err, delta = completeness_error(small_params, x, x, 4)
    assert delta == 0 and err == 0.0


def test_shape_mismatch(small_params, rng):
    with pytest.raises(ShapeError):
        integrated_gradients(small_params, _x(rng), np.zeros((7, 4, 8), np.float32))


def test_one_baseline_equals_ig(small_params, rng):
    x, b = _x(rng), _x(rng)
    assert multi_reference_ig(small_params, x, [b], 8) == integrated_gradients(small_params, x, b, 8)


def test_identical_baselines_equal_single(small_params, rng):
    x, b = _x(rng), _x(rng)
    single = integrated_gradients(small_params, x, b, 8)
    assert multi_reference_ig(small_params, x, [b, b.copy(), b.copy()], 8) == single


def test_mean_of_completeness_sums(small_params, rng):
    x = _x(rng)
    bases = [np.zeros_like(x), np.full_like(x, 0.5), _x(rng)]
    sums = [integrated_gradients(small_params, x, b, 8).data.astype(np.float64).sum() for b in bases]
    avg = multi_reference_ig(small_params, x, bases, 8).data.astype(np.float64).sum()
    assert avg == pytest.approx(np.mean(sums), rel=1e-5, abs=1e-6)


def test_empty_baselines(small_params, rng):
    with pytest.raises(PreconditionError):
        multi_reference_ig(small_params, _x(rng), [], 8)


def test_references():
    x = np.random.default_rng(0).uniform(0, 1, (7, 8, 8)).astype(np.float32)
    assert not Reference("zero").make(x).any()
    assert (Reference("constant", 0.25).make(x) == 0.25).all()
    flat = np.full_like(x, 0.3)
    np.testing.assert_allclose(Reference("blur", 4.0).make(flat), flat, rtol=1e-6)
    blurred = Reference("blur", 2.0).make(x)
    # blur is in-plane only: slices stay independent
    np.testing.assert_allclose(blurred[2], Reference("blur", 2.0).make(np.repeat(x[2:3], 7, 0))[0], rtol=1e-6)
    with pytest.raises(ConfigError):
        Reference("noise")
    with pytest.raises(ConfigError):
        Reference("blur", 0.0)


def test_default_references():
    kinds = [(r.kind, r.value) for r in DEFAULT_REFERENCES]
    assert kinds == [("zero", 0.0), ("constant", 0.25), ("constant", 0.5), ("constant", 0.75), ("blur", 4.0)]
    cfg = AttributionConfig()
    assert cfg.n_references == 5 and cfg.smoothgrad_n == 0


def test_config_validation_and_roundtrip():
    for bad in ({"ig_steps": 0}, {"n_references": 0}, {"n_references": 6},
                {"smoothgrad_sigma": -1.0}, {"smoothgrad_n": -1}):
        with pytest.raises(ConfigError):
            AttributionConfig(**bad)
    cfg = AttributionConfig(ig_steps=12, n_references=2, smoothgrad_n=3, seed=9)
    d = cfg.to_dict()
    assert d["target"] == "logit"
    assert AttributionConfig.from_dict(d) == cfg


def test_reference_ig_uses_first_n(small_params, rng):
    x = _x(rng)
    cfg = AttributionConfig(ig_steps=4, n_references=2)
    manual = multi_reference_ig(small_params, x, [np.zeros_like(x), np.full_like(x, 0.25)], 4)
    assert reference_ig(small_params, x, cfg) == manual


def test_smoothgrad_sigma_zero_equals_reference_ig(small_params, rng):
    x = _x(rng)
    cfg = AttributionConfig(ig_steps=4, n_references=3, smoothgrad_n=3, smoothgrad_sigma=0.0)
    assert smoothgrad_ig(small_params, x, cfg) == reference_ig(small_params, x, cfg)


def test_smoothgrad_deterministic(small_params, rng):
    x = _x(rng)
    cfg = AttributionConfig(ig_steps=4, n_references=1, smoothgrad_n=2, seed=4)
    assert smoothgrad_ig(small_params, x, cfg) == smoothgrad_ig(small_params, x, cfg)
    assert attribute(small_params, x, cfg) == smoothgrad_ig(small_params, x, cfg)


def test_smoothgrad_requires_samples(small_params, rng):
    with pytest.raises(PreconditionError):
        smoothgrad_ig(small_params, _x(rng), AttributionConfig(smoothgrad_n=0))


def test_smoothgrad_variance_shrinks(small_params):
    x = np.random.default_rng(5).uniform(0, 1, (7, 8, 8)).astype(np.float32)

    def spread(n):
        runs = [smoothgrad_ig(small_params, x, AttributionConfig(ig_steps=2, n_references=1, smoothgrad_n=n,
                                                                 smoothgrad_sigma=0.2, seed=s)).data
                for s in range(10)]
        return np.var(np.stack(runs), axis=0).mean()

    assert spread(16) < spread(1)


def test_minivolume_spacing_kept(small_params, rng):
    mv = MiniVolume(Volume(_x(rng), (0.5, 0.5, 2.0)), 3)
    out = integrated_gradients(small_params, mv, np.zeros((7, 8, 8), np.float32), 2)
    assert out.spacing == (0.5, 0.5, 2.0)


@settings(max_examples=20)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 5), st.integers(0, 1000))
def test_heatmap_dims_equal_input(hq, wq, steps, seed):
    rng = np.random.default_rng(seed)
    p = ClassifierParams.random(2, 3, seed=seed)
    x = rng.uniform(0, 1, (7, 4 * hq, 4 * wq)).astype(np.float32)
    out = attribute(p, x, AttributionConfig(ig_steps=steps, n_references=2))
    assert out.data.shape == x.shape


@settings(max_examples=20)
@given(st.integers(0, 1000))
def test_completeness_on_linear_paths(seed):
    # detector network, zero baseline, positive input: F is exactly linear along the path
    rng = np.random.default_rng(seed)
    p = detector_params(threshold=-1.0, gain=2.0)
    x = rng.uniform(0.1, 1.0, (7, 8, 8)).astype(np.float32)
    ig = integrated_gradients(p, x, np.zeros_like(x), steps=3).data.astype(np.float64)
    f = forward_logits(p, np.stack([x, np.zeros_like(x)]), dtype=np.float64)
    assert ig.sum() == pytest.approx(f[0] - f[1], rel=1e-6)
