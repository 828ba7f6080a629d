import numpy as np
import pytest
import scipy.optimize
import scipy.stats

from stainkit.colorstats import (
    ColorHistogram,
    HistogramError,
    compute_histogram,
    histogram_distance,
    load_histogram,
    mean_histogram,
    od_to_rgb,
    rgb_to_od,
    save_histogram,
    select_template,
    wasserstein_1d,
)


def random_image(rng, h=24, w=24):
    return rng.integers(0, 256, (h, w, 3), dtype=np.uint8)


def random_dist(rng, n):
    p = rng.uniform(0.0, 1.0, n)
    return p / p.sum()


def transport_lp(p: np.ndarray, q: np.ndarray) -> float:
    """Earth mover distance as the explicit transportation linear program.

    Decision variable f[i, j] moves mass from bin i of p to bin j of q at
    cost |i - j|; row and column sums must match the marginals.
    """
    n = p.size
    cost = np.abs(np.subtract.outer(np.arange(n), np.arange(n))).ravel()
    a_eq = np.zeros((2 * n, n * n))
    for i in range(n):
        a_eq[i, i * n:(i + 1) * n] = 1.0          # sum_j f[i, j] == p[i]
        a_eq[n + i, i::n] = 1.0                   # sum_i f[i, j] == q[j]
    b_eq = np.concatenate([p, q])
    res = scipy.optimize.linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=(0, None),
                                 method="highs")
    assert res.success
    return float(res.fun)


# --- histogram construction -----------------------------------------------------


def test_histogram_counts_known_image():
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    img[..., 0] = [[0, 0], [255, 128]]
    h = compute_histogram(img, normalized=False)
    assert h.values[0, 0] == 2
    assert h.values[0, 255] == 1
    assert h.values[0, 128] == 1
    assert h.values[1, 0] == 4
    assert not h.normalized


def test_histogram_binning_groups_levels():
    img = np.full((1, 4, 3), 0, dtype=np.uint8)
    img[0, :, 0] = [0, 63, 64, 255]
    h = compute_histogram(img, bins=4, normalized=False)
    np.testing.assert_array_equal(h.values[0], [2, 1, 0, 1])


def test_histogram_normalization_sums_to_one():
    h = compute_histogram(random_image(np.random.default_rng(0)), bins=32)
    np.testing.assert_allclose(h.values.sum(axis=1), np.ones(3), atol=1e-12)


@pytest.mark.parametrize("bad", [
    np.zeros((4, 4, 3), dtype=np.float32),
    np.zeros((4, 4), dtype=np.uint8),
    np.zeros((0, 4, 3), dtype=np.uint8),
])
def test_histogram_rejects_bad_images(bad):
    with pytest.raises(HistogramError):
        compute_histogram(bad)


@pytest.mark.parametrize("bins", [1, 3, 100, 512])
def test_histogram_rejects_bad_bin_counts(bins):
    with pytest.raises(HistogramError):
        compute_histogram(random_image(np.random.default_rng(1)), bins=bins)


def test_mean_histogram_is_elementwise_average():
    rng = np.random.default_rng(2)
    hists = [compute_histogram(random_image(rng), bins=16) for _ in range(5)]
    mean = mean_histogram(hists)
    expected = np.mean([h.values for h in hists], axis=0)
    np.testing.assert_allclose(mean.values, expected, atol=1e-12)
    assert mean.normalized


def test_mean_histogram_validation():
    with pytest.raises(HistogramError):
        mean_histogram([])
    raw = compute_histogram(random_image(np.random.default_rng(3)), normalized=False)
    with pytest.raises(HistogramError, match="normalized"):
        mean_histogram([raw])
    a = compute_histogram(random_image(np.random.default_rng(4)), bins=16)
    b = compute_histogram(random_image(np.random.default_rng(5)), bins=32)
    with pytest.raises(HistogramError, match="mismatch"):
        mean_histogram([a, b])


# --- wasserstein ----------------------------------------------------------------


def test_wasserstein_known_values():
    p = np.array([1.0, 0.0, 0.0])
    q = np.array([0.0, 0.0, 1.0])
    assert wasserstein_1d(p, q) == pytest.approx(2.0)
    assert wasserstein_1d(p, p) == 0.0


def test_wasserstein_matches_scipy():
    rng = np.random.default_rng(6)
    support = np.arange(32)
    for _ in range(50):
        p, q = random_dist(rng, 32), random_dist(rng, 32)
        expected = scipy.stats.wasserstein_distance(support, support, p, q)
        assert wasserstein_1d(p, q) == pytest.approx(expected, abs=1e-9)


def test_wasserstein_matches_transport_lp():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(2, 17))
        p, q = random_dist(rng, n), random_dist(rng, n)
        assert wasserstein_1d(p, q) == pytest.approx(transport_lp(p, q), abs=1e-6)


def test_wasserstein_is_symmetric():
    rng = np.random.default_rng(8)
    p, q = random_dist(rng, 16), random_dist(rng, 16)
    assert wasserstein_1d(p, q) == pytest.approx(wasserstein_1d(q, p), abs=1e-12)


def test_wasserstein_validation():
    ok = np.full(4, 0.25)
    with pytest.raises(HistogramError):
        wasserstein_1d(ok, np.full(5, 0.2))
    with pytest.raises(HistogramError, match="sum 1"):
        wasserstein_1d(ok * 2, ok)
    with pytest.raises(HistogramError, match="negative"):
        wasserstein_1d(np.array([1.5, -0.5, 0.0, 0.0]), ok)


def test_histogram_distance_sums_channels():
    rng = np.random.default_rng(9)
    a = compute_histogram(random_image(rng), bins=16)
    b = compute_histogram(random_image(rng), bins=16)
    expected = sum(wasserstein_1d(a.values[c], b.values[c]) for c in range(3))
    assert histogram_distance(a, b) == pytest.approx(expected, abs=1e-12)
    assert histogram_distance(a, a) == 0.0


# --- template selection ---------------------------------------------------------


def brute_force_template(images, bins):
    hists = [compute_histogram(img, bins) for img in images]
    mean = mean_histogram(hists)
    dists = [histogram_distance(h, mean) for h in hists]
    return int(np.argmin(dists))  # argmin takes the first minimum, matching ties


def test_select_template_matches_brute_force():
    rng = np.random.default_rng(10)
    for _ in range(20):
        images = [random_image(rng, 12, 12) for _ in range(int(rng.integers(2, 9)))]
        assert select_template(images, bins=16) == brute_force_template(images, 16)


def test_select_template_tie_breaks_to_lowest_index():
    rng = np.random.default_rng(11)
    img = random_image(rng)
    other = random_image(rng)
    # identical copies at indices 1 and 3 tie exactly; index 1 must win
    images = [other, img, other, img]
    chosen = select_template(images, bins=16)
    assert chosen == brute_force_template(images, 16)
    hists = [compute_histogram(i, 16) for i in images]
    mean = mean_histogram(hists)
    d = [histogram_distance(h, mean) for h in hists]
    assert d[chosen] == min(d)
    assert chosen == min(i for i, v in enumerate(d) if v == min(d))


def test_select_template_single_image():
    assert select_template([random_image(np.random.default_rng(12))]) == 0


def test_select_template_empty():
    with pytest.raises(HistogramError):
        select_template([])


# --- persistence ----------------------------------------------------------------


def test_histogram_file_round_trip(tmp_path):
    h = compute_histogram(random_image(np.random.default_rng(13)), bins=64)
    path = tmp_path / "hist.txt"
    save_histogram(h, path)
    loaded = load_histogram(path)
    np.testing.assert_array_equal(loaded.values, h.values)
    assert loaded.normalized


def test_load_histogram_rejects_wrong_row_count(tmp_path):
    path = tmp_path / "hist.txt"
    path.write_text("0.5 0.5\n0.5 0.5\n")
    with pytest.raises(HistogramError, match="3 channel rows"):
        load_histogram(path)


# --- optical density ------------------------------------------------------------


def test_od_round_trip_covers_every_level():
    img = np.arange(256, dtype=np.uint8).reshape(16, 16)
    img = np.stack([img, img[::-1], img.T], axis=-1)
    back = od_to_rgb(rgb_to_od(img))
    np.testing.assert_array_equal(back, img)


def test_od_is_monotone_decreasing_in_intensity():
    img = np.arange(256, dtype=np.uint8).reshape(1, 256, 1).repeat(3, axis=2)
    od = rgb_to_od(img)[0, :, 0]
    assert (np.diff(od) < 0).all()
    assert od[255] == pytest.approx(-np.log10(256.0 / 256.0), abs=1e-6)
    assert od[0] == pytest.approx(-np.log10(1.0 / 256.0), abs=1e-6)


def test_od_to_rgb_rejects_negative_density():
    od = np.full((2, 2, 3), -0.01, dtype=np.float32)
    with pytest.raises(HistogramError, match="non-negative"):
        od_to_rgb(od)


def test_od_to_rgb_shape_check():
    with pytest.raises(HistogramError):
        od_to_rgb(np.zeros((2, 2), dtype=np.float32))
