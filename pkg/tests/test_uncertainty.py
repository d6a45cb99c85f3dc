import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segdetect import uncertainty as U


def test_entropy_reference_value():
    assert U.entropy(np.array([0.5, 0.25, 0.25])) == pytest.approx(1.5 * math.log(2) / math.log(3), abs=1e-15)


@pytest.mark.parametrize("c", [2, 3, 5, 19])
def test_endpoints(c):
    onehot = np.eye(c)[1 % c]
    uniform = np.full(c, 1.0 / c)
    assert U.entropy(onehot) == 0.0
    assert U.variation_ratio(onehot) == 0.0
    assert U.probability_margin(onehot) == 1.0
    assert U.entropy(uniform) == pytest.approx(1.0, abs=1e-12)
    assert U.variation_ratio(uniform) == pytest.approx(1 - 1 / c, abs=1e-12)
    assert U.probability_margin(uniform) == pytest.approx(0.0, abs=1e-12)


def test_direct_reads():
    p = np.array([0.5, 0.3, 0.2])
    assert U.variation_ratio(p) == pytest.approx(0.5)
    assert U.probability_margin(p) == pytest.approx(0.2)


def test_rejects_single_class():
    with pytest.raises(ValueError):
        U.entropy(np.ones((3, 1)))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2 ** 32 - 1), st.floats(0.01, 5.0))
def test_pixel_properties(c, seed, conc):
    probs = np.random.default_rng(seed).dirichlet(np.full(c, conc), size=50)
    e, v, m = U.entropy(probs), U.variation_ratio(probs), U.probability_margin(probs)
    top = probs.max(-1)
    assert ((e >= 0) & (e <= 1)).all()
    assert ((v >= 0) & (v <= 1 - 1 / c + 1e-12)).all()
    assert ((m >= 0) & (m <= top + 1e-15)).all()
    np.testing.assert_allclose(v + top, 1.0, atol=1e-15)


def test_zero_entropy_iff_one_hot():
    probs = np.array([[1.0, 0.0, 0.0], [0.999, 0.001, 0.0]])
    e = U.entropy(probs)
    assert e[0] == 0.0 and e[1] > 0
    assert U.variation_ratio(probs)[0] == 0 and U.probability_margin(probs)[0] == 1


def test_aggregate_uniform_and_onehot():
    f = U.aggregate_features(np.full((4, 4, 5), 0.2))
    assert (f.mean_entropy, f.mean_variation_ratio, f.mean_margin) == pytest.approx((1, 0.8, 0), abs=1e-12)
    np.testing.assert_allclose(f.class_mean_probs, 0.2)
    g = U.aggregate_features(np.broadcast_to(np.eye(5)[3], (4, 4, 5)))
    assert (g.mean_entropy, g.mean_variation_ratio, g.mean_margin) == (0.0, 0.0, 1.0)
    np.testing.assert_array_equal(g.class_mean_probs, np.eye(5)[3])
    assert len(g) == 8 and g.as_vector().shape == (8,)


def test_aggregate_matches_pixel_loop(rng):
    probs = rng.dirichlet(np.ones(4), size=(4, 4))
    f = U.aggregate_features(probs)
    es, vs, ms = [], [], []
    for i in range(4):
        for j in range(4):
            p = probs[i, j]
            es.append(-sum(q * math.log(q) for q in p if q > 0) / math.log(4))
            s = sorted(p)
            vs.append(1 - s[-1])
            ms.append(s[-1] - s[-2])
    assert f.mean_entropy == pytest.approx(np.mean(es), abs=1e-12)
    assert f.mean_variation_ratio == pytest.approx(np.mean(vs), abs=1e-12)
    assert f.mean_margin == pytest.approx(np.mean(ms), abs=1e-12)
    np.testing.assert_allclose(f.class_mean_probs, probs.reshape(-1, 4).mean(0), atol=1e-12)


def test_channel_permutation(rng):
    probs = rng.dirichlet(np.ones(5), size=(3, 3))
    perm = rng.permutation(5)
    a, b = U.aggregate_features(probs), U.aggregate_features(probs[..., perm])
    np.testing.assert_allclose(b.class_mean_probs, a.class_mean_probs[perm], atol=1e-15)
    assert (a.mean_entropy, a.mean_variation_ratio, a.mean_margin) == pytest.approx(
        (b.mean_entropy, b.mean_variation_ratio, b.mean_margin), abs=1e-15)


def test_heatmap_wrappers(rng):
    probs = rng.dirichlet(np.ones(3), size=(2, 2))
    h = U.entropy_heatmap(probs)
    assert h.kind == "entropy" and h.values.shape == (2, 2)
    assert U.variation_ratio_heatmap(probs).kind == "variation_ratio"
    assert U.probability_margin_heatmap(probs).kind == "probability_margin"


def test_features_csv_roundtrip(tmp_path, rng):
    feats = U.feature_matrix([rng.dirichlet(np.ones(3), size=(2, 2)) for _ in range(4)])
    path = tmp_path / "f.csv"
    U.write_features_csv(path, [5, 6, 7, 8], "fgsm_4", feats)
    ids, attacks, back = U.read_features_csv(path)
    assert ids.tolist() == [5, 6, 7, 8] and attacks == ["fgsm_4"] * 4
    np.testing.assert_array_equal(back, feats)
    assert path.read_text().splitlines()[0].startswith("image_id,attack,mean_entropy")
