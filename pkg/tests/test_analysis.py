import numpy as np
import pytest

from arcdog import analysis as A
from arcdog import data as D
from arcdog.errors import DataError


# ---------------------------------------------------------------- metrics

def test_metrics_by_hand():
    labels = [0, 0, 0, 0, 1, 1]
    preds = [0, 0, 0, 1, 1, 0]
    m = A.compute_metrics(preds, labels, 2)
    assert m.macro_accuracy == pytest.approx(0.625)
    assert m.overall_accuracy == pytest.approx(4 / 6)
    assert m.confusion.tolist() == [[3, 1], [1, 1]]


def test_perfect_predictions():
    m = A.compute_metrics([2, 0, 1], [2, 0, 1], 4)
    assert m.overall_accuracy == m.macro_accuracy == 1.0
    assert m.per_class_accuracy[3] is None


def test_random_predictions_near_chance():
    rng = np.random.default_rng(0)
    m = A.compute_metrics(rng.integers(0, 25, 1000), rng.integers(0, 25, 1000), 25)
    assert abs(m.overall_accuracy - 1 / 25) < 0.04


def test_metrics_invariants():
    rng = np.random.default_rng(1)
    labels, preds = rng.integers(0, 5, 200), rng.integers(0, 5, 200)
    m = A.compute_metrics(preds, labels, 5)
    assert m.confusion.sum(1).tolist() == np.bincount(labels, minlength=5).tolist()
    assert 0 <= m.overall_accuracy <= 1 and 0 <= m.macro_accuracy <= 1
    assert m.overall_accuracy == np.trace(m.confusion) / 200


def test_metrics_errors():
    with pytest.raises(DataError):
        A.compute_metrics([], [], 3)
    with pytest.raises(DataError):
        A.compute_metrics([0, 1], [0], 3)


# -------------------------------------------------------------------- kNN

def brute_force(train, regions, test):
    idx, dist = [], []
    for q in test:
        best, best_key, best_i = np.inf, None, -1
        for i, (p, r) in enumerate(zip(train, regions)):
            d = np.sqrt(np.sum((q - p) ** 2))
            key = (d, r, i)
            if best_key is None or key < best_key:
                best_key, best, best_i = key, d, i
        idx.append(best_i)
        dist.append(best)
    return np.array(idx), np.array(dist)


def test_three_point_example():
    res = A.knn_features(np.array([[0, 0], [1, 0], [0, 2]]), [0, 1, 2], np.array([[0.9, 0.1]]))
    assert res.nearest_region.tolist() == [1]
    assert res.nearest_distance[0] == pytest.approx(np.hypot(0.1, 0.1))


def test_query_equal_to_training_point():
    train = np.random.default_rng(0).normal(size=(10, 4))
    res = A.knn_features(train, np.arange(10) % 3, train[[7]])
    assert res.nearest_distance[0] == 0.0 and res.nearest_index[0] == 7


def test_tie_goes_to_lowest_region():
    train = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    res = A.knn_features(train, [3, 1, 2], np.array([[0.0, 0.0]]))
    assert res.nearest_region.tolist() == [1]
    res = A.knn_features(train, [3, 2, 2], np.array([[0.0, 0.0]]))
    assert res.nearest_index.tolist() == [1]


def test_brute_force_equivalence_small():
    rng = np.random.default_rng(2)
    train = rng.integers(0, 3, size=(60, 2)).astype(float)  # plenty of exact ties
    regions = rng.integers(0, 4, 60)
    test = rng.integers(0, 3, size=(40, 2)).astype(float)
    res = A.knn_features(train, regions, test)
    idx, dist = brute_force(train, regions, test)
    assert res.nearest_index.tolist() == idx.tolist()
    assert np.allclose(res.nearest_distance, dist, atol=1e-12)


def test_empty_training_set():
    with pytest.raises(DataError):
        A.knn_features(np.zeros((0, 3)), [], np.zeros((2, 3)))


def test_dimension_mismatch():
    with pytest.raises(DataError):
        A.knn_features(np.zeros((3, 3)), [0, 1, 2], np.zeros((2, 4)))


def test_climate_subset_distances():
    rng = np.random.default_rng(3)
    tr, te = rng.normal(size=(50, 19)), rng.normal(size=(10, 19))
    res = A.knn_climate(tr, rng.integers(0, 3, 50), te, columns=range(11))
    mean, std = tr.mean(0), tr.std(0)
    z_tr, z_te = ((tr - mean) / std)[:, :11], ((te - mean) / std)[:, :11]
    expected = np.sqrt(((z_te[:, None] - z_tr[None]) ** 2).sum(-1)).min(1)
    assert np.allclose(res.nearest_distance, expected, atol=1e-12)


def test_identical_climates_across_border():
    clim = np.ones((4, 19))
    res = A.knn_climate(clim[:2], [0, 1], clim[2:])
    assert not res.nearest_distance.any()


def test_climate_distance_grows_away_from_border():
    ds = D.generate_synthetic(D.SyntheticSpec(grid_size=40, seed=5))
    test = ds.regions == 3
    res = A.knn_climate(ds.climate[~test], ds.regions[~test], ds.climate[test])
    border = np.minimum(ds.lat[test] - ds.median_lat, ds.lon[test] - ds.median_lon)
    assert np.corrcoef(border, res.nearest_distance)[0, 1] > 0


# --------------------------------------------------------------- heatmaps

def test_heatmap_two_by_two(tmp_path):
    lat, lon, val = [1.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 1.0], [0.0, 1.0, 2.0, 3.0]
    A.emit_heatmap(tmp_path / "h.csv", lat, lon, val, tmp_path / "h.ppm")
    rows = (tmp_path / "h.csv").read_text().splitlines()
    assert rows[0] == "lat,lon,value" and len(rows) == 5
    img = A.read_ppm(tmp_path / "h.ppm")
    assert img.shape == (2, 2, 3)
    assert img[0, 0].tolist() == [0, 0, 255]  # north-west: minimum, blue
    assert img[1, 1].tolist() == [255, 0, 0]  # south-east: maximum, red


def test_constant_field_single_colour():
    img = A.rasterize([0, 0, 1, 1], [0, 1, 0, 1], [5.0] * 4)
    assert len({tuple(p) for p in img.reshape(-1, 3)}) == 1


def test_region_palette():
    img = A.rasterize([0, 0, 1, 1], [0, 1, 0, 1], [0, 2, 1, 3], categorical=True)
    colours = {tuple(p) for p in img.reshape(-1, 3)}
    assert colours == set(A.REGION_PALETTE.values()) and len(colours) == 4


def test_partial_grid_background():
    img = A.rasterize([0.0], [0.0], [1.0], grid_lat=[0.0, 1.0], grid_lon=[0.0, 1.0])
    assert img[0, 0].tolist() == list(A.BACKGROUND)


def test_heatmap_csv_idempotent(tmp_path):
    rng = np.random.default_rng(0)
    lat, lon, val = rng.normal(size=5), rng.normal(size=5), rng.normal(size=5)
    A.emit_heatmap(tmp_path / "a.csv", lat, lon, val)
    A.emit_heatmap(tmp_path / "b.csv", *A.read_heatmap_csv(tmp_path / "a.csv"))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        A.emit_heatmap(tmp_path / "missing" / "h.csv", [0], [0], [1])


def test_emit_knn_files(tmp_path):
    res = A.knn_features(np.eye(3), [0, 1, 2], np.eye(3) * 0.9, lat=[0, 0, 1], lon=[0, 1, 0])
    paths = A.emit_knn(res, tmp_path / "knn")
    assert sorted(p.name for p in paths) == ["knn_distance.csv", "knn_distance.ppm",
                                             "knn_region.csv", "knn_region.ppm"]
