import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsclab.analytics import (cnt_entropy, flow_density,
                              network_lane_count, pca_project, route_feature,
                              trace_features)

from oracles import reference_pca


# -- density ---------------------------------------------------------------

def test_density_jn3_reference():
    assert flow_density(8186, 144) == pytest.approx(8186 / 144)
    assert flow_density(8186, network_lane_count(3, 4)) == pytest.approx(56.847222, abs=1e-5)


def test_density_zero_vehicles():
    assert flow_density(0, 144) == 0.0


def test_density_hz1_reference():
    assert flow_density(6684, network_lane_count(4, 4)) == pytest.approx(34.8125)


def test_density_requires_lanes():
    with pytest.raises(ValueError):
        flow_density(10, 0)


# -- cumulative-normalization entropy -----------------------------------------

def manual_cnt(p):
    s = sum(p)
    acc, h = 0.0, 0.0
    for x in p:
        acc += x
        q = acc / s
        if q > 0:
            h -= q * math.log2(q)
    return h


def test_cnt_hand_values():
    assert cnt_entropy((0.2, 0.3, 0.5)) == pytest.approx(0.9644, abs=5e-4)
    assert cnt_entropy((0.3, 0.2, 0.5)) == pytest.approx(1.0211, abs=5e-4)
    # cross-check against an independent evaluation of the formula
    assert cnt_entropy((0.2, 0.3, 0.5)) == pytest.approx(manual_cnt((0.2, 0.3, 0.5)), rel=1e-12)


def test_cnt_degenerate_distribution():
    assert cnt_entropy((1.0, 0.0, 0.0)) == 0.0


def test_cnt_rejects_bad_inputs():
    with pytest.raises(ValueError):
        cnt_entropy((0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        cnt_entropy((-0.1, 0.6, 0.5))


@settings(max_examples=40, deadline=None)
@given(p1=st.floats(0.01, 1.0), p2=st.floats(0.01, 1.0), p3=st.floats(0.01, 1.0),
       c=st.floats(0.1, 10.0))
def test_cnt_scale_invariant(p1, p2, p3, c):
    p = (p1, p2, p3)
    scaled = tuple(c * x for x in p)
    assert cnt_entropy(scaled) == pytest.approx(cnt_entropy(p), rel=1e-9)


def test_cnt_discriminates_permutations():
    values = {round(cnt_entropy(perm), 9) for perm in itertools.permutations((0.2, 0.3, 0.5))}
    assert len(values) >= 2
    # permutations sharing the first element share only their first cumulative term
    assert cnt_entropy((0.2, 0.3, 0.5)) != cnt_entropy((0.3, 0.2, 0.5))


# -- route features ---------------------------------------------------------------

def test_route_feature_single_straight():
    f = route_feature("s", 0.37, t_start=12.0)
    assert np.allclose(f.v_turn, [1.0, 0.0, 0.0])
    assert f.t_start == 12.0


def test_route_feature_hand_case():
    f = route_feature("sl", 0.9, t_start=5.0)
    assert np.allclose(f.v_turn, [1.0, 0.0, 0.9])
    assert np.allclose(f.v_travel, [1.0, 0.0, 0.9, 5.0])


def test_route_feature_empty_route():
    assert np.allclose(route_feature("", 0.9, 3.0).v_turn, 0.0)


def test_route_feature_geometric_bound():
    f = route_feature("s" * 50, 0.9, 0.0)
    assert f.v_turn[0] <= 1 / (1 - 0.9) + 1e-9


def test_route_feature_unknown_symbol():
    with pytest.raises(ValueError):
        route_feature("sx", 0.9, 0.0)
    with pytest.raises(ValueError):
        route_feature("s", 1.5, 0.0)


def test_route_feature_t_start_passthrough():
    for t in (0.0, 981.0, 3599.0):
        assert route_feature("srl", 0.9, t).v_travel[-1] == t


def test_trace_features_matrix():
    rows = [(0, 10.0, "sl", 100.0), (1, 20.0, "", None)]
    ids, feats = trace_features(rows, 0.9)
    assert ids == ["0", "1"]
    assert feats.shape == (2, 4)
    assert np.allclose(feats[0], [1.0, 0.0, 0.9, 10.0])
    assert np.allclose(feats[1], [0.0, 0.0, 0.0, 20.0])


# -- PCA -------------------------------------------------------------------------

def test_pca_line_explains_everything():
    rng = np.random.default_rng(0)
    t = rng.standard_normal(200)
    direction = np.array([1.0, -2.0, 0.5, 3.0])
    points = np.outer(t, direction)
    res = pca_project(points, k=3)
    assert res.rank_deficient
    assert res.explained[0] > 0.9999


def test_pca_isotropic_shares_balanced():
    rng = np.random.default_rng(1)
    points = rng.standard_normal((10_000, 4))
    res = pca_project(points, k=3)
    total = np.concatenate([res.explained, [1.0 - res.explained.sum()]])
    assert total.max() - total.min() < 0.05


def test_pca_reconstruction_and_orthonormality():
    rng = np.random.default_rng(2)
    points = rng.standard_normal((60, 4)) @ rng.standard_normal((4, 4))
    res = pca_project(points, k=4)
    assert np.allclose(res.components @ res.components.T, np.eye(len(res.components)),
                       atol=1e-8)
    vals, _, centered = reference_pca(points)
    recon = res.coords @ res.components
    assert np.allclose(recon, centered, atol=1e-8)
    assert np.allclose(np.sort(res.eigenvalues)[::-1], res.eigenvalues)
    assert np.allclose(res.eigenvalues, vals[:len(res.eigenvalues)], rtol=1e-8)


def test_pca_matches_full_eigendecomposition():
    rng = np.random.default_rng(3)
    scales = np.array([3.0, 1.5, 0.7, 0.2])
    points = rng.standard_normal((500, 4)) * scales
    res = pca_project(points, k=3)
    vals, vecs, _ = reference_pca(points)
    for i in range(3):
        assert res.eigenvalues[i] == pytest.approx(vals[i], rel=1e-8)
        overlap = abs(res.components[i] @ vecs[i])
        assert overlap == pytest.approx(1.0, abs=1e-6)


def test_pca_needs_enough_points():
    with pytest.raises(ValueError):
        pca_project(np.zeros((3, 4)), k=3)


def test_pca_standardizes_entry_time():
    # of the raw axes, seconds dominate; standardized, the turn axis should win
    rng = np.random.default_rng(4)
    turn = rng.choice([0.0, 1.0], size=400)
    feats = np.stack([turn * 3, np.zeros(400), np.zeros(400),
                      rng.uniform(0, 3600, 400)], axis=1)
    res = pca_project(feats, k=2)
    assert abs(res.components[0][0]) > 0.9
