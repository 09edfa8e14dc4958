import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import randomize_bn, tiny_conv_net
from nexprune import bits, models
from nexprune.graph import build_coupling_groups
from nexprune.scoring import (HybridConfig, ScoreMap, capture_patterns, group_l1_importance,
                              group_scores, hybrid_score, nexp_map, nexp_score,
                              random_scores, scores_from_captures)


def brute_force_score(raw: np.ndarray) -> float:
    """Full N x N matrix of per-bit mismatch counts; upper triangle averaged."""
    n, p = raw.shape
    mat = [[sum(int(raw[i, b]) != int(raw[j, b]) for b in range(p)) for j in range(n)] for i in range(n)]
    total = sum(mat[i][j] for i in range(n) for j in range(n)) // 2
    return total / (p * (n * (n - 1) // 2))


def patterns(raw):
    return bits.PatternSet(bits.pack_bits(raw), raw.shape[1])


@given(st.integers(2, 8), st.integers(1, 64), st.floats(0.05, 0.95), st.integers(0, 2**31 - 1))
def test_mean_score_equals_full_matrix(n, p, density, seed):
    raw = np.random.default_rng(seed).random((n, p)) < density
    assert nexp_score(patterns(raw)) == brute_force_score(raw)


@given(st.integers(2, 8), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_sample_order_does_not_matter(n, p, seed):
    rng = np.random.default_rng(seed)
    raw = rng.random((n, p)) < 0.5
    assert nexp_score(patterns(raw)) == nexp_score(patterns(raw[rng.permutation(n)]))


@given(st.integers(2, 8), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_score_is_a_fraction_in_unit_interval(n, p, seed):
    raw = np.random.default_rng(seed).random((n, p)) < 0.5
    s = nexp_score(patterns(raw))
    assert 0.0 <= s <= 1.0


def test_identical_patterns_score_zero_and_complements_score_one():
    raw = np.tile(np.array([1, 0, 1, 1, 0], bool), (6, 1))
    assert nexp_score(patterns(raw)) == 0.0
    comp = np.stack([raw[0], ~raw[0]])
    assert nexp_score(patterns(comp)) == 1.0


def test_single_sample_is_rejected():
    with pytest.raises(ValueError):
        nexp_score(patterns(np.ones((1, 4), bool)))


@pytest.mark.parametrize("stat,fn", [("min", min), ("max", max), ("median", np.median)])
def test_alternative_statistics(stat, fn):
    raw = np.random.default_rng(3).random((7, 13)) < 0.4
    d = [sum(raw[i] != raw[j]) / 13 for i in range(7) for j in range(i + 1, 7)]
    assert nexp_score(patterns(raw), stat) == pytest.approx(float(fn(d)), abs=1e-15)


def test_large_batch_path_matches_pair_loop():
    from nexprune import scoring
    raw = np.random.default_rng(0).random((3, 600, 20)) < 0.3
    words = bits.pack_bits(raw)
    big = scoring._scores_from_words(words, 20)
    direct = bits.upper_triangle_total(words) / (20 * 600 * 599 // 2)
    assert np.array_equal(big, direct)


def test_zero_weight_network_gives_all_zero_map():
    net = tiny_conv_net()
    for layer in net.layers:
        for k in layer.params:
            if k == "weight" and layer.kind in ("conv2d", "linear"):
                layer.params[k][:] = 0
    batch = np.random.default_rng(0).standard_normal((10, 2, 6, 6)).astype(np.float32)
    m = nexp_map(net, batch)
    assert len(m) == 4 + 5
    assert all(v == 0.0 for v in m.values())


def test_chunked_capture_matches_single_pass():
    net = randomize_bn(models.build("resnet_small", size=8, classes=3, seed=2))
    batch = np.random.default_rng(1).standard_normal((23, 3, 8, 8)).astype(np.float32)
    whole = capture_patterns(net, batch, chunk=1000)
    parts = capture_patterns(net, batch, chunk=7)
    for k in whole:
        assert np.array_equal(whole[k][0], parts[k][0])


@given(st.floats(1e-3, 1e3))
def test_positive_rescaling_leaves_scores_unchanged(c):
    net = randomize_bn(tiny_conv_net())
    batch = np.random.default_rng(0).standard_normal((9, 2, 6, 6)).astype(np.float32)
    _, caps = net.forward(batch, capture="all")
    base = scores_from_captures(net, caps)
    scaled = scores_from_captures(net, {k: v * np.float32(c) for k, v in caps.items()})
    assert base == scaled


def test_score_map_text_round_trips_exactly(tmp_path):
    rng = np.random.default_rng(0)
    scores = {("a", i): float(rng.random()) for i in range(5)}
    scores.update({("b", i): float(rng.random()) / 3 for i in (0, 2, 7)})
    m = ScoreMap(scores, ["a", "x", "b"], provenance="kmeans", sample_count=60, meta={"seed": 1})
    for path in (tmp_path / "m.csv", tmp_path / "m.json"):
        (m.to_csv if path.suffix == ".csv" else m.to_json)(path)
        back = ScoreMap.load(path)
        assert back.scores == m.scores
        assert back.layer_order == m.layer_order
        assert back.provenance == "kmeans" and back.sample_count == 60
    assert (tmp_path / "m.csv").read_text().startswith("# schema: nexprune.scoremap/v1")


def test_ranking_breaks_ties_by_layer_then_filter():
    m = ScoreMap({("b", 0): 0.5, ("a", 3): 0.5, ("a", 1): 0.5, ("a", 0): 0.9}, ["a", "b"])
    assert m.ranking() == [("a", 1), ("a", 3), ("b", 0), ("a", 0)]


def test_unknown_layer_rejected():
    with pytest.raises(ValueError):
        ScoreMap({("z", 0): 1.0}, ["a"])


def test_group_l1_matches_hand_sum():
    net = tiny_conv_net(seed=4)
    groups = build_coupling_groups(net)
    imp = group_l1_importance(net, groups)
    w1 = net["c1"].params["weight"].astype(np.float64)
    w2 = net["c2"].params["weight"].astype(np.float64)
    wf = net["fc"].params["weight"].astype(np.float64)
    for i in range(4):
        assert imp[("c1", i)] == pytest.approx(np.abs(w1[i]).sum() + np.abs(w2[:, i]).sum(), rel=1e-12)
    for i in range(5):
        cols = slice(i * 36, (i + 1) * 36)
        assert imp[("c2", i)] == pytest.approx(np.abs(w2[i]).sum() + np.abs(wf[:, cols]).sum(), rel=1e-12)


def test_merged_residual_group_takes_mean_of_producers():
    net = randomize_bn(models.build("resnet_small", size=8, classes=3, seed=0))
    batch = np.random.default_rng(0).standard_normal((12, 3, 8, 8)).astype(np.float32)
    per_filter = nexp_map(net, batch)
    groups = build_coupling_groups(net)
    g = next(g for g in groups if len(g.producers()) > 1)
    merged = group_scores(per_filter, groups)
    expect = np.mean([per_filter[(layer, g.filter_id)] for layer, _ in g.producers()])
    assert merged[g.key] == expect


def _maps():
    net = randomize_bn(models.build("plain_cnn", size=8, classes=3, seed=0))
    groups = build_coupling_groups(net)
    batch = np.random.default_rng(0).standard_normal((12, 3, 8, 8)).astype(np.float32)
    return group_l1_importance(net, groups), group_scores(nexp_map(net, batch), groups)


def test_hybrid_endpoints_reduce_to_single_criteria():
    imp, nexp = _maps()
    assert hybrid_score(imp, nexp, 0.0).ranking() == imp.ranking()
    assert hybrid_score(imp, nexp, 1.0).ranking() == nexp.ranking()


@given(st.floats(0, 1))
def test_hybrid_stays_in_unit_interval(alpha):
    imp, nexp = _maps()
    v = hybrid_score(imp, nexp, alpha).values()
    assert v.min() >= 0.0 and v.max() <= 1.0 + 1e-12


def test_hybrid_rejects_mismatched_maps():
    imp, nexp = _maps()
    short = ScoreMap(dict(list(nexp.scores.items())[1:]), nexp.layer_order)
    with pytest.raises(KeyError):
        hybrid_score(imp, short, 0.5)
    with pytest.raises(ValueError):
        HybridConfig(alpha=1.5)


def test_constant_map_normalizes_to_zero():
    m = ScoreMap({("a", 0): 2.0, ("a", 1): 2.0}, ["a"]).minmax()
    assert m.values().tolist() == [0.0, 0.0]


def test_random_scores_follow_the_seed():
    groups = build_coupling_groups(tiny_conv_net())
    a = random_scores(groups, ["c1", "c2"], np.random.default_rng(5))
    b = random_scores(groups, ["c1", "c2"], np.random.default_rng(5))
    assert a.scores == b.scores
    assert not math.isclose(a[("c1", 0)], a[("c1", 1)])
