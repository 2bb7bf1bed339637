import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import detector_params
from explainseg.attribution import AttributionConfig
from explainseg.classifier import forward, sigmoid
from explainseg.clustering import ClusterSet, make_cluster
from explainseg.errors import ConfigError, PreconditionError, ShapeError
from explainseg.phantom import PhantomConfig, generate_dataset
from explainseg.pipeline import (STOP_LIMIT, STOP_PROB, STOP_REASONS, STOP_VOLUME, PipelineConfig, aggregate_study,
                                 assemble, filter_clusters, finalize_mask, generate_pseudolabels, iexplain_minivolume,
                                 iteration_histogram, run_traces, slice_weights, sweep_high_threshold)
from explainseg.volume import Volume

DET = detector_params(threshold=0.5, gain=10.0, offset=1.0)
CFG = PipelineConfig(t_high=0.8)


def identity_heat(v):
    return np.asarray(v, np.float32)


def brightest_heat(v):
    """Heat only on the brightest voxels, so each iteration takes one blob."""
    v = np.asarray(v, np.float32)
    return np.where(v >= v.max(), v, 0).astype(np.float32)


def _mini(blobs, bg=0.2, shape=(7, 32, 32)):
    x = np.full(shape, bg, np.float32)
    for (z, y, x0, size, value) in blobs:
        x[z:z + size, y:y + size, x0:x0 + size] = value
    return x


def test_negative_entry_gives_empty_trace():
    x = _mini([])
    seg, tr = iexplain_minivolume(DET, None, x, CFG, heatmap_fn=identity_heat)
    assert len(tr) == 0 and tr.stop_reason == STOP_PROB
    assert not seg.data.any()
    assert tr.final_prob == pytest.approx(float(sigmoid(-1.0)))


def test_single_lesion_one_iteration():
    x = _mini([(2, 10, 10, 4, 1.0)])
    seg, tr = iexplain_minivolume(DET, None, x, CFG, heatmap_fn=identity_heat)
    assert len(tr) == 1 and tr.stop_reason == STOP_PROB
    np.testing.assert_array_equal(seg.data, tr.steps[0].seg)
    np.testing.assert_array_equal(seg.data.astype(bool), x == 1.0)
    assert tr.steps[0].masked == 64


def test_two_lesions_two_iterations():
    x = _mini([(1, 2, 2, 4, 1.0), (2, 22, 22, 4, 0.9)])
    seg, tr = iexplain_minivolume(DET, None, x, CFG, heatmap_fn=brightest_heat)
    assert len(tr) == 2 and tr.stop_reason == STOP_PROB
    assert tr.masked_counts == [64, 64]
    assert seg.data.sum() == 128
    # probability is recomputed on the masked input at each step
    masked = np.where(tr.steps[0].seg.astype(bool), 0, x).astype(np.float32)
    assert tr.steps[1].prob == pytest.approx(forward(DET, masked)[0])


def test_iteration_limit():
    x = _mini([(1, 2, 2, 4, 1.0), (2, 22, 22, 4, 0.9)])
    _, tr = iexplain_minivolume(DET, None, x, replace(CFG, iter_limit=1), heatmap_fn=brightest_heat)
    assert len(tr) == 1 and tr.stop_reason == STOP_LIMIT


def test_small_seg_stops_on_volume():
    x = _mini([(1, 2, 2, 3, 1.0), (2, 22, 22, 4, 0.9)])
    _, tr = iexplain_minivolume(DET, None, x, CFG, heatmap_fn=brightest_heat)
    assert len(tr) == 1 and tr.stop_reason == STOP_VOLUME
    assert tr.masked_counts == [27]


def test_entry_prob_override_and_checks():
    x = _mini([(2, 10, 10, 4, 1.0)])
    _, tr = iexplain_minivolume(DET, None, x, CFG, entry_prob=0.1, heatmap_fn=identity_heat)
    assert len(tr) == 0
    with pytest.raises(ConfigError):
        iexplain_minivolume(DET, None, x, PipelineConfig(), heatmap_fn=identity_heat)
    with pytest.raises(ShapeError):
        iexplain_minivolume(DET, None, x[:5], CFG, heatmap_fn=identity_heat)


def test_default_heatmap_path_runs(small_params):
    x = np.random.default_rng(0).uniform(0, 1, (7, 16, 16)).astype(np.float32)
    cfg = PipelineConfig(t_high=1e-3, clf_thresh=1e-6, iter_limit=3)
    _, tr = iexplain_minivolume(small_params, AttributionConfig(ig_steps=2, n_references=1), x, cfg)
    assert 1 <= len(tr) <= 3 and tr.stop_reason in STOP_REASONS


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 28), st.integers(0, 28),
                          st.integers(2, 5), st.floats(0.55, 1.0)), max_size=6),
       st.integers(1, 10), st.integers(0, 10_000))
def test_loop_invariants(blobs, limit, seed):
    x = _mini([(z, y, x0, s, v) for z, y, x0, s, v in blobs])
    weights = np.random.default_rng(seed).uniform(0.5, 1.0, x.shape).astype(np.float32)
    cfg = PipelineConfig(t_high=0.6, iter_limit=limit, min_cluster_voxels_stop=5)
    seg, tr = iexplain_minivolume(DET, None, x, cfg, heatmap_fn=lambda v: brightest_heat(v) * weights)
    assert len(tr) <= limit and tr.stop_reason in STOP_REASONS
    union = np.zeros(x.shape, bool)
    for step in tr.steps:
        s = step.seg.astype(bool)
        assert not (s & union).any()
        grown = union | s
        assert (grown >= union).all()
        union = grown
    np.testing.assert_array_equal(seg.data.astype(bool), union)


def test_slice_weight_ratio():
    w = slice_weights(0.8)
    assert w[4] / w[3] == pytest.approx(math.exp(-1 / (2 * 0.64)), rel=1e-12)
    assert w[4] / w[3] == pytest.approx(0.4578, abs=5e-5)
    assert len(w) == 7 and w[3] == 1.0


def test_aggregate_single_seg_normalizes():
    soft = aggregate_study({20: np.ones((7, 4, 4), np.uint8)}, (4, 4, 40)).data
    assert (soft[17:24] == 1.0).all()
    assert not soft[:17].any() and not soft[24:].any()


def test_aggregate_no_segs():
    assert not aggregate_study({}, (4, 4, 10)).data.any()
    assert not aggregate_study({3: None}, (4, 4, 10)).data.any()


def test_aggregate_errors():
    with pytest.raises(IndexError):
        aggregate_study({10: None}, (4, 4, 10))
    with pytest.raises(ShapeError):
        aggregate_study({2: np.ones((7, 3, 4))}, (4, 4, 10))


def test_aggregate_drops_out_of_range_slices():
    soft = aggregate_study({0: np.ones((7, 2, 2), np.uint8)}, (2, 2, 5)).data
    assert (soft[:4] == 1.0).all() and not soft[4].any()


def test_finalize_half_threshold_hand_case():
    # slice 10 processed with an all-ones seg, slice 11 processed with an empty one
    w = slice_weights(0.8)
    soft = aggregate_study({10: np.ones((7, 2, 2), np.uint8), 11: None}, (2, 2, 20))
    assert soft.data[10, 0, 0] == pytest.approx(w[3] / (w[3] + w[2]), rel=1e-6)
    assert soft.data[11, 0, 0] == pytest.approx(w[4] / (w[4] + w[3]), rel=1e-6)
    kept = finalize_mask(soft, 0.5).data[:, 0, 0]
    assert np.flatnonzero(kept).tolist() == [7, 8, 9, 10]


def test_finalize_extremes():
    soft = Volume(np.array([0.0, 0.2, 1.0], np.float32).reshape(1, 1, 3))
    assert finalize_mask(soft, 0.0).data.ravel().tolist() == [0, 1, 1]
    assert not finalize_mask(soft, 1.0 + 1e-6).data.any()


@settings(max_examples=40)
@given(st.lists(st.floats(0, 1, width=32), min_size=4, max_size=4), st.floats(0, 1), st.floats(0, 1))
def test_finalize_antitone(vals, a, b):
    soft = Volume(np.array(vals, np.float32).reshape(1, 2, 2))
    lo, hi = sorted((a, b))
    assert (finalize_mask(soft, hi).data <= finalize_mask(soft, lo).data).all()


def _block_cluster(cid, x0, y0, n, w=16):
    vox = [(x0 + i % w, y0 + (i // w) % w, i // (w * w)) for i in range(n)]
    return make_cluster(cid, vox)


def test_filter_size_boundary():
    cs = ClusterSet((_block_cluster(0, 56, 56, 99), _block_cluster(1, 56, 56, 100)), (128, 128, 40))
    kept = filter_clusters(cs, (128, 128, 40), PipelineConfig())
    assert [c.voxel_count for c in kept] == [100]


def test_filter_distance_boundary_512():
    dims = (512, 512, 4)

    def at(cid, x):
        return make_cluster(cid, [(x, 256, 0)])

    cfg = PipelineConfig(filter_min_size=1)
    kept = filter_clusters(ClusterSet((at(0, 256 + 160), at(1, 256 + 161), at(2, 256)), dims), dims, cfg)
    assert [c.id for c in kept] == [0, 2]
    px = replace(cfg, filter_max_center_dist_px=100.0)
    assert [c.id for c in filter_clusters(ClusterSet((at(0, 356), at(1, 357)), dims), dims, px)] == [0]


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(0, 120), st.integers(0, 120), st.integers(1, 300)), max_size=6))
def test_filter_subset_and_idempotent(specs):
    dims = (128, 128, 40)
    cs = ClusterSet(tuple(_block_cluster(i, x, y, n, w=8) for i, (x, y, n) in enumerate(specs)), dims)
    cfg = PipelineConfig()
    once = filter_clusters(cs, dims, cfg)
    assert {c.id for c in once} <= {c.id for c in cs}
    assert filter_clusters(once, dims, cfg) == once


def test_config_validation():
    for bad in ({"iter_limit": 0}, {"clf_thresh": 1.0}, {"t_high": 0.0}, {"agg_sigma": 0.0},
                {"neighborhood": (15, 14, 5)}, {"final_heatmap_thresh": -1.0}):
        with pytest.raises(ConfigError):
            PipelineConfig(**bad)
    cfg = PipelineConfig(t_high=0.3)
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


def _hu_study(lesions, depth=12, size=32):
    """HU study whose window maps background to 0.2 and lesion blocks to 1."""
    hu = np.full((depth, size, size), -20.0, np.float32)
    for z, y, x, n in lesions:
        hu[z:z + n, y:y + n, x:x + n] = 300.0
    return Volume(hu)


def test_study_pipeline_with_injected_heatmap():
    study = _hu_study([(4, 8, 8, 5)])
    r = generate_pseudolabels(study, DET, None, replace(CFG, filter_min_size=10), study_id="s",
                              heatmap_fn=identity_heat)
    assert r.report["study_id"] == "s"
    assert len(r.clusters) == 1
    assert r.report["clusters"]["after_filter"] == 1
    gt = np.zeros(study.data.shape, bool)
    gt[4:9, 8:13, 8:13] = True
    assert (r.mask.data.astype(bool) & gt).sum() == gt.sum()
    assert set(r.report["iteration_histogram"]) <= {"0", "1"}
    assert len(r.report["per_slice"]) == 12


def test_truncation_matches_rerun():
    study = _hu_study([(4, 2, 2, 5), (5, 20, 20, 5)])
    study = Volume(np.where(np.arange(32)[None, None, :] > 16, study.data - 10.0, study.data))
    cfg = replace(CFG, filter_min_size=1, min_cluster_voxels_stop=10)
    traces = run_traces(study, DET, None, cfg, heatmap_fn=brightest_heat)
    assert max(len(t) for t in traces.values()) == 2
    for k in (1, 2):
        rerun = run_traces(study, DET, None, replace(cfg, iter_limit=k), heatmap_fn=brightest_heat)
        a = assemble(traces, study.dims, cfg, max_iter=k)[0]
        b = assemble(rerun, study.dims, cfg)[0]
        assert a == b
    hist = iteration_histogram(traces)
    assert sum(hist.values()) == 12


def test_deterministic_phantom_run(small_params):
    st_ = generate_dataset(PhantomConfig(dims=(32, 32, 16), vessel_count=3, lesion_count_range=(1, 1)), 1, 1.0)[0]
    ac = AttributionConfig(ig_steps=2, n_references=1)
    cfg = PipelineConfig(t_high=0.05, clf_thresh=0.01, filter_min_size=1, iter_limit=2)
    a = generate_pseudolabels(st_, small_params, ac, cfg)
    b = generate_pseudolabels(st_, small_params, ac, cfg)
    assert a.mask == b.mask and a.clusters == b.clusters


@pytest.fixture(scope="module")
def sweep_studies():
    return generate_dataset(PhantomConfig(dims=(32, 32, 16), vessel_count=3, lesion_count_range=(1, 2)), 3, 0.67)


def test_sweep_single_value(small_params, sweep_studies):
    best, curve = sweep_high_threshold(sweep_studies, [0.07], small_params, AttributionConfig(ig_steps=2, n_references=1),
                                       PipelineConfig(clf_thresh=0.01, iter_limit=1, filter_min_size=1))
    assert best == 0.07 and len(curve) == 1


def test_sweep_best_is_curve_max_and_coverage_monotone(small_params, sweep_studies):
    ac = AttributionConfig(ig_steps=2, n_references=1)
    cfg = PipelineConfig(clf_thresh=0.01, iter_limit=1, filter_min_size=1, final_heatmap_thresh=0.0)
    grid = [0.02, 0.05, 0.1, 0.2]
    best, curve = sweep_high_threshold(sweep_studies, grid, small_params, ac, cfg)
    f1s = [r[1] for r in curve]
    assert best == grid[f1s.index(max(f1s))]
    cover = [sum(int(generate_pseudolabels(s, small_params, ac, replace(cfg, t_high=t, apply_filter=False)).mask.data.sum())
                 for s in sweep_studies) for t in grid]
    assert all(a >= b for a, b in zip(cover, cover[1:]))


def test_sweep_empty_grid(small_params, sweep_studies):
    with pytest.raises(PreconditionError):
        sweep_high_threshold(sweep_studies, [], small_params, AttributionConfig(), PipelineConfig())
