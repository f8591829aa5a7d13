import csv

import numpy as np
import pytest

from arcdog import data as D
from arcdog.errors import ConfigError, DataError

from conftest import make_rows, write_table


# ---------------------------------------------------------------- regions

def test_region_corners():
    regions, mlat, mlon = D.assign_regions([0, 1, 0, 1], [0, 0, 1, 1])
    assert (mlat, mlon) == (0.5, 0.5)
    assert regions.tolist() == [0, 1, 2, 3]


def test_identical_points_go_north_east():
    regions, _, _ = D.assign_regions([2.0] * 5, [3.0] * 5)
    assert regions.tolist() == [3] * 5


def test_random_points_balanced():
    rng = np.random.default_rng(0)
    regions, _, _ = D.assign_regions(rng.random(1000), rng.random(1000))
    counts = np.bincount(regions, minlength=4)
    assert all(200 <= c <= 300 for c in counts)


def test_regions_brute_force(small_synthetic):
    ds = small_synthetic
    mlat, mlon = np.median(ds.lat), np.median(ds.lon)
    expected = [(1 if a >= mlat else 0) + (2 if b >= mlon else 0) for a, b in zip(ds.lat, ds.lon)]
    assert ds.regions.tolist() == expected


# --------------------------------------------------------------- curation

def test_curation_drops_classes_outside_list(csv_file):
    ds = D.ingest_csv(csv_file(["Corn", "Corn", "Water", "Corn", "Water"]))
    assert len(ds) == 3
    assert "Corn" in D.CURATED_CLASSES and "Water" not in D.CURATED_CLASSES
    assert ds.provenance["dropped_rows"] == 2


def test_curated_list_size():
    assert len(D.CURATED_CLASSES) == 25


def test_empty_allow_list(csv_file):
    with pytest.raises(DataError, match="empty allow-list"):
        D.curate_classes(D.read_csv_table(csv_file(["Corn"])), [])


def test_unknown_allow_list_name(csv_file):
    raw = D.read_csv_table(csv_file(["Corn"]))
    with pytest.raises(DataError, match="unknown class"):
        D.curate_classes(raw, ["Corn", "Unobtainium"])


def test_allow_list_of_present_classes_is_identity(csv_file):
    raw = D.read_csv_table(csv_file(["Corn", "Water", "Rice"]))
    ds = D.curate_classes(raw, ["Corn", "Water", "Rice"])
    assert len(ds) == 3 and ds.labels.tolist() == [0, 1, 2]


# ---------------------------------------------------------------- CSV I/O

def test_header_width():
    assert len(D.csv_header()) == 3 + 8 * 9 + 19


def test_well_formed_file(csv_file):
    ds = D.ingest_csv(csv_file(["Corn"] * 10))
    assert len(ds) == 10 and ds.imputed_cells == 0


def test_short_row_names_line(tmp_path):
    rows = make_rows(["Corn"] * 4)
    rows[2] = rows[2][:-1]
    path = write_table(tmp_path / "short.csv", rows)
    with pytest.raises(DataError, match=r"short\.csv:4: expected 94 columns, got 93"):
        D.ingest_csv(path)


def test_bad_float_names_line(tmp_path):
    rows = make_rows(["Corn"] * 3)
    rows[0][5] = "abc"
    with pytest.raises(DataError, match=r":2: cannot parse 'abc'"):
        D.ingest_csv(write_table(tmp_path / "bad.csv", rows))


def test_unknown_label_without_curation(tmp_path):
    path = write_table(tmp_path / "u.csv", make_rows(["Corn", "Water"]))
    with pytest.raises(DataError, match=r":3: unknown label 'Water'"):
        D.ingest_csv(path, curate=False)


def test_bad_header(tmp_path):
    header = D.csv_header()
    header[0] = "latitude"
    with pytest.raises(DataError, match=":1:"):
        D.ingest_csv(write_table(tmp_path / "h.csv", make_rows(["Corn"]), header=header))


def test_single_empty_cell_imputed(tmp_path):
    path = write_table(tmp_path / "gap.csv", make_rows(["Corn"] * 4, blanks=[(1, 10)]))
    # independent scan of the file
    with open(path, newline="") as fh:
        body = list(csv.reader(fh))[1:]
    blanks = sum(cell == "" for row in body for cell in row[3:3 + 72])
    ds = D.ingest_csv(path)
    assert len(ds) == 4
    assert ds.imputed_cells == blanks == 1
    t, c = divmod(10 - 3, 9)
    # per-channel mean over every observed timepoint
    observed = ds.timeseries[:, :, c][~ds.missing[:, :, c]]
    assert ds.missing[1, t, c] and ds.timeseries[1, t, c] == pytest.approx(observed.mean())


def test_csv_round_trip(tmp_path, csv_file):
    ds = D.ingest_csv(csv_file(["Corn", "Rice", "Corn"], blanks=[(0, 4)]))
    out = tmp_path / "again.csv"
    D.write_csv(ds, out)
    again = D.ingest_csv(out)
    for name in ("lat", "lon", "timeseries", "missing", "climate", "labels", "regions"):
        assert np.array_equal(getattr(ds, name), getattr(again, name)), name


def test_cache_round_trip(tmp_path, small_synthetic):
    path = tmp_path / "ds.bin"
    D.save_cache(small_synthetic, path)
    back = D.load_cache(path)
    for name in ("lat", "lon", "timeseries", "missing", "climate", "labels", "regions"):
        assert np.array_equal(getattr(small_synthetic, name), getattr(back, name)), name
    assert back.class_names == small_synthetic.class_names
    assert np.array_equal(back.stats.obs_mean, small_synthetic.stats.obs_mean)


def test_cache_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"garbage!" + bytes(40))
    with pytest.raises(DataError, match="bad magic"):
        D.load_cache(path)


# ----------------------------------------------------------------- inputs

def test_channel_counts_real_schema(csv_file):
    ds = D.ingest_csv(csv_file(["Corn", "Rice"] * 3))
    got = {m: D.make_model_input(ds, m).shape[2] for m in D.CLIMATE_MODES}
    assert got == {"none": 9, "all": 28, "temperature": 20, "precipitation": 17}
    assert all(ds.input_channels(m) == got[m] for m in got)


def test_climate_copied_on_every_timepoint(csv_file):
    ds = D.ingest_csv(csv_file(["Corn", "Rice"] * 3))
    x = D.make_model_input(ds, "all")
    assert (x[:, :, 9:] == x[:, :1, 9:]).all()


def test_unknown_mode(small_synthetic):
    with pytest.raises(ConfigError):
        D.make_model_input(small_synthetic, "humidity")


def test_training_split_standardized(small_synthetic):
    ds = small_synthetic
    train, val, test = D.split_indices(ds, D.SplitPlan(1, 0.1, 0))
    stats = D.compute_stats(ds, train)
    x = D.make_model_input(ds, "all", stats, train).numpy().reshape(-1, ds.input_channels("all"))
    assert np.abs(x.mean(0)).max() < 1e-8
    assert np.abs(x.std(0) - 1).max() < 1e-6


def test_split_disjoint_and_complete(small_synthetic):
    ds = small_synthetic
    train, val, test = D.split_indices(ds, D.SplitPlan(2, 0.1, 5))
    assert not set(train) & set(val) and not set(train) & set(test) and not set(val) & set(test)
    assert len(train) + len(val) + len(test) == len(ds)
    assert set(test) == set(np.flatnonzero(ds.regions == 2))
    assert len(val) == round(0.1 * (len(train) + len(val)))


# -------------------------------------------------------------- synthetic

def test_generator_deterministic():
    spec = D.SyntheticSpec(grid_size=16, seed=11)
    a, b = D.generate_synthetic(spec), D.generate_synthetic(spec)
    for name in ("lat", "lon", "timeseries", "missing", "climate", "labels"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_default_benchmark_shape():
    spec = D.SyntheticSpec()
    assert spec.grid_size**2 == 25_600
    assert (spec.domain_dim, spec.num_classes, spec.timepoints, spec.channels) == (8, 5, 8, 9)
    assert spec.noise == 0.3 and spec.cloud_probability == 0.1 and spec.drift_strength > 0


def _region_freq(ds):
    return np.array([np.bincount(ds.labels[ds.regions == r], minlength=ds.num_classes)
                     / (ds.regions == r).sum() for r in range(4)])


def test_drift_zero_uniform_prevalence():
    ds = D.generate_synthetic(D.SyntheticSpec(grid_size=200, drift_strength=0.0, seed=2))
    assert len(ds) == 40_000
    spread0 = np.ptp(_region_freq(ds), axis=0)
    assert spread0.max() < 0.03
    drift = D.generate_synthetic(D.SyntheticSpec(grid_size=200, drift_strength=1.5, seed=2))
    assert np.ptp(_region_freq(drift), axis=0).max() > spread0.max()


def test_lipschitz_bound_adjacent_points():
    spec = D.SyntheticSpec(grid_size=40, seed=4)
    field = D.domain_field_for(spec)
    bound = field.lipschitz_bound()
    xs = (np.arange(40) + 0.5) / 40
    gx, gy = np.meshgrid(xs, xs)
    v = field(gx.ravel(), gy.ravel()).reshape(40, 40, -1)
    step = 1 / 40
    dx = np.linalg.norm(np.diff(v, axis=1), axis=-1).max()
    dy = np.linalg.norm(np.diff(v, axis=0), axis=-1).max()
    assert max(dx, dy) <= bound * step
    assert max(dx, dy) > 0


def test_cloud_masking_whole_timepoints(small_synthetic):
    ds = small_synthetic
    assert (ds.missing.all(axis=2) == ds.missing.any(axis=2)).all()
    frac = ds.missing[:, :, 0].mean()
    assert 0.05 < frac < 0.15


def test_synthetic_provenance(small_synthetic):
    assert small_synthetic.provenance["source"] == "synthetic"
    assert small_synthetic.provenance["spec"]["seed"] == 3
