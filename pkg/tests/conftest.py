import csv

import numpy as np
import pytest

from arcdog import data as D


def make_rows(labels, seed=0, blanks=()):
    """Real-schema CSV rows; ``blanks`` holds (row, column) cells left empty."""
    rng = np.random.default_rng(seed)
    rows = []
    for i, label in enumerate(labels):
        obs = [repr(float(x)) for x in rng.normal(size=D.TIMEPOINTS * len(D.BANDS))]
        clim = [repr(float(x)) for x in rng.normal(10.0, 3.0, size=len(D.CLIMATE_VARS))]
        row = [repr(float(rng.uniform(25, 49))), repr(float(rng.uniform(-124, -67))), label, *obs, *clim]
        rows.append(row)
    for r, c in blanks:
        rows[r][c] = ""
    return rows


def write_table(path, rows, header=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header or D.csv_header())
        w.writerows(rows)
    return path


@pytest.fixture
def csv_file(tmp_path):
    def build(labels, name="in.csv", **kw):
        return write_table(tmp_path / name, make_rows(labels, **kw))

    return build


@pytest.fixture(scope="session")
def small_synthetic():
    return D.generate_synthetic(D.SyntheticSpec(grid_size=24, seed=3))
