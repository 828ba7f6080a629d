import numpy as np
import pytest
import scipy.optimize
import skimage.color

from stainkit.classical import (
    DegenerateStainsError,
    InsufficientTissueError,
    LabStats,
    StainMatrix,
    _lasso_nnls_2var,
    _tissue_od_pixels,
    compute_concentrations,
    compute_lab_stats,
    concentration_scale,
    lab_to_rgb,
    load_stain_matrix,
    macenko_estimate_stains,
    recombine,
    reinhard_normalize,
    rgb_to_lab,
    save_stain_matrix,
    stain_normalize,
    vahadane_estimate_stains,
)
from stainkit.colorstats import rgb_to_od

from synth import (
    planted_stain_field,
    planted_stain_matrix,
    planted_stain_tile,
    single_stain_field,
    stain_pairing_errors,
)


HE_COLS = np.array([[0.65, 0.07], [0.70, 0.99], [0.29, 0.11]])


# --- stain matrix container -------------------------------------------------


def test_stain_matrix_normalizes_and_orders():
    sm = StainMatrix(HE_COLS * 3.0)  # off-unit norms are rescaled
    np.testing.assert_allclose(np.linalg.norm(sm.columns, axis=0), [1.0, 1.0], atol=1e-12)
    assert sm.columns[2, 0] >= sm.columns[2, 1]


def test_stain_matrix_swaps_reversed_columns():
    sm = StainMatrix(HE_COLS[:, ::-1])
    ref = StainMatrix(HE_COLS)
    np.testing.assert_allclose(sm.columns, ref.columns, atol=1e-12)


def test_stain_matrix_clamps_tiny_negatives():
    cols = HE_COLS.copy()
    cols[0, 1] = -1e-9
    assert (StainMatrix(cols).columns >= 0).all()


@pytest.mark.parametrize("bad", [
    np.ones((3, 3)),
    HE_COLS - 0.5,             # solidly negative entries
    np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]),  # zero-norm column
])
def test_stain_matrix_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        StainMatrix(bad)


def test_angle_degrees_orthogonal_columns():
    sm = StainMatrix(np.array([[0.0, 1.0], [0.0, 0.0], [1.0, 0.0]]))
    assert sm.angle_degrees() == pytest.approx(90.0, abs=1e-9)


def test_stain_matrix_file_round_trip(tmp_path):
    sm = StainMatrix(HE_COLS)
    path = tmp_path / "stains.txt"
    save_stain_matrix(sm, path)
    # loading re-canonicalizes, which may renormalize by a factor within 1 ulp
    np.testing.assert_allclose(load_stain_matrix(path).columns, sm.columns,
                               rtol=0, atol=1e-15)


# --- LAB conversions ----------------------------------------------------------


def test_rgb_to_lab_matches_skimage():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    ours = rgb_to_lab(img)
    ref = skimage.color.rgb2lab(img.astype(np.float64) / 255.0)
    np.testing.assert_allclose(ours, ref, atol=0.05)


def test_lab_round_trip_within_one_level():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (20, 20, 3), dtype=np.uint8)
    back = lab_to_rgb(rgb_to_lab(img))
    assert np.abs(back.astype(int) - img.astype(int)).max() <= 1


def test_lab_white_point():
    white = np.full((1, 1, 3), 255, dtype=np.uint8)
    lab = rgb_to_lab(white)[0, 0]
    assert lab[0] == pytest.approx(100.0, abs=0.01)
    np.testing.assert_allclose(lab[1:], [0.0, 0.0], atol=0.01)


def test_reinhard_moves_stats_to_target():
    rng = np.random.default_rng(2)
    src = rng.integers(40, 200, (32, 32, 3), dtype=np.uint8)
    target = LabStats(np.array([60.0, 10.0, -12.0]), np.array([14.0, 6.0, 5.0]))
    out = reinhard_normalize(src, target)
    stats = compute_lab_stats(out)
    # uint8 rounding on the way back costs a little accuracy
    np.testing.assert_allclose(stats.mean, target.mean, atol=1.0)
    np.testing.assert_allclose(stats.std, target.std, atol=1.0)


def test_reinhard_constant_image_warns_not_crashes():
    flat = np.full((8, 8, 3), 128, dtype=np.uint8)
    target = compute_lab_stats(np.arange(192, dtype=np.uint8).reshape(8, 8, 3))
    with pytest.warns(UserWarning, match="zero-variance"):
        out = reinhard_normalize(flat, target)
    assert out.shape == flat.shape
    assert (out == out[0, 0]).all()  # still constant, recentered only


# --- tissue culling -------------------------------------------------------------


def test_tissue_culling_requires_all_channels():
    od = np.array([[[0.2, 0.2, 0.2],     # kept
                    [0.2, 0.1, 0.2],     # one transparent channel: dropped
                    [0.05, 0.05, 0.05],  # background: dropped
                    [0.15, 0.15, 0.15]]])  # exactly at threshold: kept
    kept = _tissue_od_pixels(od, 0.15)
    assert kept.shape == (2, 3)


# --- stain estimation ------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_macenko_recovers_planted_stains(seed):
    rng = np.random.default_rng(seed)
    truth = planted_stain_matrix(rng)
    est = macenko_estimate_stains(planted_stain_field(rng, truth))
    assert stain_pairing_errors(est.columns, truth) < 2.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_vahadane_recovers_planted_stains(seed):
    rng = np.random.default_rng(seed)
    truth = planted_stain_matrix(rng)
    est = vahadane_estimate_stains(planted_stain_field(rng, truth, pure_fraction=0.4))
    assert stain_pairing_errors(est.columns, truth) < 3.0


def test_macenko_single_stain_degenerates_with_warning():
    rng = np.random.default_rng(10)
    col = planted_stain_matrix(rng)[:, 0]
    # noise wider than ~0.004 spreads the percentile angles past the 1 degree
    # parallel threshold and the estimate stops looking degenerate
    with pytest.warns(UserWarning, match="parallel"):
        est = macenko_estimate_stains(single_stain_field(rng, col, noise=0.002))
    assert stain_pairing_errors(est.columns, np.stack([col, col], axis=1)) < 5.0


@pytest.mark.filterwarnings("ignore:dictionary learning still improving")
def test_vahadane_zero_sparsity_fits_exact_rank2_data():
    rng = np.random.default_rng(11)
    truth = planted_stain_matrix(rng)
    od = planted_stain_field(rng, truth, noise=0.0)
    _, objectives = vahadane_estimate_stains(od, sparsity=0.0, return_objectives=True)
    v_norm = float((od.reshape(-1, 3) ** 2).sum())
    assert objectives[-1] < 1e-3 * v_norm


def test_estimators_reject_blank_tiles():
    blank = rgb_to_od(np.full((16, 16, 3), 250, dtype=np.uint8))
    with pytest.raises(InsufficientTissueError):
        macenko_estimate_stains(blank)
    with pytest.raises(InsufficientTissueError):
        vahadane_estimate_stains(blank)


def test_vahadane_objective_never_increases():
    rng = np.random.default_rng(3)
    tile = planted_stain_tile(rng, planted_stain_matrix(rng))
    _, objectives = vahadane_estimate_stains(rgb_to_od(tile), return_objectives=True)
    assert len(objectives) >= 2
    diffs = np.diff(objectives)
    assert (diffs <= 1e-10).all()


# --- two-variable lasso solver ----------------------------------------------------


def lasso_objective(w, v, h, lam):
    return float(((v - w @ h) ** 2).sum() + lam * h.sum())


def test_nnls_branch_matches_scipy():
    rng = np.random.default_rng(4)
    w = StainMatrix(planted_stain_matrix(rng)).columns
    v = rng.uniform(-0.2, 2.0, (3, 40))
    ours = _lasso_nnls_2var(w, v, lam=0.0)
    for j in range(v.shape[1]):
        ref, _ = scipy.optimize.nnls(w, v[:, j])
        assert lasso_objective(w, v[:, j], ours[:, j], 0.0) <= (
            lasso_objective(w, v[:, j], ref, 0.0) + 1e-10)
        np.testing.assert_allclose(ours[:, j], ref, atol=1e-8)


@pytest.mark.parametrize("lam", [0.05, 0.1, 0.5])
def test_lasso_branch_beats_multistart_numeric(lam):
    rng = np.random.default_rng(5)
    w = StainMatrix(planted_stain_matrix(rng)).columns
    v = rng.uniform(-0.2, 2.0, (3, 15))
    ours = _lasso_nnls_2var(w, v, lam)
    assert (ours >= 0).all()
    for j in range(v.shape[1]):
        best = np.inf
        for start in ([0.0, 0.0], [1.0, 1.0], [2.0, 0.1], [0.1, 2.0]):
            res = scipy.optimize.minimize(
                lambda h: lasso_objective(w, v[:, j], h, lam),
                np.asarray(start), bounds=[(0, None), (0, None)])
            best = min(best, res.fun)
        assert lasso_objective(w, v[:, j], ours[:, j], lam) <= best + 1e-6


# --- concentrations ---------------------------------------------------------------


def test_concentrations_round_trip_planted_field():
    rng = np.random.default_rng(6)
    sm = StainMatrix(planted_stain_matrix(rng))
    conc = rng.uniform(0.0, 2.0, (8, 8, 2))
    od = conc @ sm.columns.T
    recovered = compute_concentrations(od, sm)
    np.testing.assert_allclose(recovered, conc, atol=1e-8)


def test_concentrations_reject_parallel_stains():
    v = np.array([0.6, 0.7, 0.3])
    v2 = v + np.array([0.0, 0.0, 1e-4])
    sm = StainMatrix(np.stack([v / np.linalg.norm(v), v2 / np.linalg.norm(v2)], axis=1))
    with pytest.raises(DegenerateStainsError):
        compute_concentrations(np.zeros((2, 2, 3)), sm)


def test_concentrations_shape_check():
    sm = StainMatrix(HE_COLS)
    with pytest.raises(ValueError):
        compute_concentrations(np.zeros((2, 3)), sm)


def test_concentration_scale_matches_percentile_ratio():
    rng = np.random.default_rng(7)
    src = rng.uniform(0.0, 1.0, (10, 10, 2))
    tgt = rng.uniform(0.0, 3.0, (10, 10, 2))
    scale = concentration_scale(src, tgt)
    for j in range(2):
        expected = np.percentile(tgt[..., j], 99) / np.percentile(src[..., j], 99)
        assert scale[j] == pytest.approx(expected, rel=1e-12)


def test_concentration_scale_zero_source_warns():
    src = np.zeros((4, 4, 2))
    tgt = np.ones((4, 4, 2))
    with pytest.warns(UserWarning, match="zero"):
        scale = concentration_scale(src, tgt)
    np.testing.assert_array_equal(scale, [1.0, 1.0])


def test_recombine_validation():
    sm = StainMatrix(HE_COLS)
    with pytest.raises(ValueError, match="non-negative"):
        recombine(np.full((2, 2, 2), -0.1), sm)
    with pytest.raises(ValueError):
        recombine(np.zeros((2, 2, 3)), sm)


def test_recombine_inverts_concentration_analysis():
    rng = np.random.default_rng(8)
    sm = StainMatrix(planted_stain_matrix(rng))
    tile = planted_stain_tile(rng, sm.columns)
    conc = compute_concentrations(rgb_to_od(tile), sm)
    back = recombine(conc, sm)
    assert np.abs(back.astype(int) - tile.astype(int)).mean() <= 2.0


# --- end-to-end normalization ------------------------------------------------------


@pytest.mark.parametrize("method", ["reinhard", "macenko", "vahadane"])
def test_self_normalization_is_near_identity(method):
    rng = np.random.default_rng(9)
    tile = planted_stain_tile(rng, planted_stain_matrix(rng))
    out = stain_normalize(tile, tile, method=method)
    assert out.dtype == np.uint8
    assert np.abs(out.astype(int) - tile.astype(int)).mean() <= 2.0


def test_stain_normalize_unknown_method():
    tile = np.full((8, 8, 3), 100, dtype=np.uint8)
    with pytest.raises(ValueError, match="unknown"):
        stain_normalize(tile, tile, method="histogram")
