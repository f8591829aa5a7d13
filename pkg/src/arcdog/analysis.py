"""Accuracy metrics, exact 1-nearest-neighbour matching across regions, and
heatmap emission (CSV + binary PPM raster).

Raster colours
--------------
Continuous fields use a linear ramp from blue (0, 0, 255) at the field
minimum to red (255, 0, 0) at the maximum; a constant field is all blue.
Categorical region fields use ``REGION_PALETTE``. Grid cells with no value
are white.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

REGION_PALETTE = {
    0: (230, 159, 0),    # orange
    1: (86, 180, 233),   # sky blue
    2: (0, 158, 115),    # green
    3: (204, 121, 167),  # pink
}
BACKGROUND = (255, 255, 255)


@dataclass
class MetricsReport:
    overall_accuracy: float
    macro_accuracy: float
    per_class_accuracy: list[float | None]  # None where a class has no samples
    confusion: np.ndarray  # K x K, rows = true class
    count: int

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "macro_accuracy": self.macro_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion.tolist(),
            "count": self.count,
        }


def compute_metrics(predictions, labels, num_classes: int) -> MetricsReport:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise DataError(f"compute_metrics: {pred.shape} predictions vs {true.shape} labels")
    if pred.size == 0:
        raise DataError("compute_metrics: empty input")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    support = conf.sum(1)
    per_class = [float(conf[k, k] / support[k]) if support[k] else None for k in range(num_classes)]
    recalls = [r for r in per_class if r is not None]
    return MetricsReport(
        overall_accuracy=float(np.trace(conf) / pred.size),
        macro_accuracy=float(np.mean(recalls)),
        per_class_accuracy=per_class,
        confusion=conf,
        count=int(pred.size),
    )


# ---------------------------------------------------------------------------
# nearest neighbours


@dataclass
class KnnResult:
    nearest_region: np.ndarray
    nearest_distance: np.ndarray
    nearest_index: np.ndarray  # index into the training set
    lat: np.ndarray | None = None
    lon: np.ndarray | None = None


def nearest_neighbours(train, train_regions, test, chunk: int | None = None):
    """Exact Euclidean 1-NN; ties go to the lowest region id, then the lowest
    training index."""
    train = np.asarray(train, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    regions = np.asarray(train_regions, dtype=np.int64)
    if train.ndim != 2 or train.shape[0] == 0:
        raise DataError("knn: empty training set")
    if test.ndim != 2 or test.shape[1] != train.shape[1]:
        raise DataError(f"knn: feature dims differ, train {train.shape} vs test {test.shape}")
    n = train.shape[0]
    if chunk is None:
        chunk = max(1, int(2**24 // max(n * train.shape[1], 1)))
    # lexicographic tie-break key: region first, then index
    key = regions * n + np.arange(n)
    idx = np.empty(len(test), dtype=np.int64)
    dist = np.empty(len(test))
    for start in range(0, len(test), chunk):
        q = test[start:start + chunk]
        d2 = ((q[:, None, :] - train[None, :, :]) ** 2).sum(-1)
        best = d2.min(1, keepdims=True)
        pick = np.where(d2 == best, key[None, :], np.iinfo(np.int64).max).argmin(1)
        idx[start:start + chunk] = pick
        dist[start:start + chunk] = np.sqrt(best[:, 0])
    return idx, dist


def knn_features(train_features, train_regions, test_features, lat=None, lon=None) -> KnnResult:
    idx, dist = nearest_neighbours(train_features, train_regions, test_features)
    regions = np.asarray(train_regions, dtype=np.int64)
    return KnnResult(regions[idx], dist, idx,
                     None if lat is None else np.asarray(lat), None if lon is None else np.asarray(lon))


def knn_climate(train_climate, train_regions, test_climate, mean=None, std=None,
                columns=None, lat=None, lon=None) -> KnnResult:
    """1-NN on z-scored climate vectors (statistics from the training set
    unless given); ``columns`` restricts to a variable subset."""
    tr = np.asarray(train_climate, dtype=np.float64)
    te = np.asarray(test_climate, dtype=np.float64)
    if len(tr) == 0:
        raise DataError("knn: empty training set")
    mean = tr.mean(0) if mean is None else np.asarray(mean)
    std = tr.std(0) if std is None else np.asarray(std)
    std = np.where(std > 0, std, 1.0)
    ztr, zte = (tr - mean) / std, (te - mean) / std
    if columns is not None:
        ztr, zte = ztr[:, list(columns)], zte[:, list(columns)]
    return knn_features(ztr, train_regions, zte, lat, lon)


# ---------------------------------------------------------------------------
# heatmaps


def write_heatmap_csv(path, lat, lon, values) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["lat", "lon", "value"])
        for a, b, v in zip(lat, lon, values):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(v))])


def read_heatmap_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["lat", "lon", "value"]:
        raise DataError(f"{path}: not a heatmap CSV")
    arr = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def ramp_color(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Linear blue -> red colours (uint8, n x 3)."""
    v = np.asarray(values, dtype=np.float64)
    lo = float(v.min()) if lo is None else lo
    hi = float(v.max()) if hi is None else hi
    s = np.zeros_like(v) if hi <= lo else np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    rgb = np.stack([255 * s, np.zeros_like(s), 255 * (1 - s)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def rasterize(lat, lon, values, categorical: bool = False,
              grid_lat=None, grid_lon=None) -> np.ndarray:
    """Place values on the grid spanned by the unique coordinates (north up).

    ``grid_lat``/``grid_lon`` give the full grid when the field covers only
    part of it (e.g. one test quadrant)."""
    lat, lon, values = np.asarray(lat), np.asarray(lon), np.asarray(values)
    ulat = np.unique(lat if grid_lat is None else grid_lat)[::-1]
    ulon = np.unique(lon if grid_lon is None else grid_lon)
    img = np.empty((len(ulat), len(ulon), 3), dtype=np.uint8)
    img[:] = BACKGROUND
    r = len(ulat) - 1 - np.searchsorted(ulat[::-1], lat)
    c = np.searchsorted(ulon, lon)
    if categorical:
        colors = np.array([REGION_PALETTE.get(int(v), (0, 0, 0)) for v in values], dtype=np.uint8)
    else:
        colors = ramp_color(values)
    img[r, c] = colors
    return img


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def emit_heatmap(path, lat, lon, values, raster_path=None, categorical: bool = False,
                 grid_lat=None, grid_lon=None) -> None:
    """Write (lat, lon, value) rows, plus an optional PPM raster."""
    path = Path(path)
    if not path.parent.exists():
        raise OSError(f"cannot write heatmap: directory {path.parent} does not exist")
    write_heatmap_csv(path, lat, lon, values)
    if raster_path is not None:
        write_ppm(raster_path, rasterize(lat, lon, values, categorical, grid_lat, grid_lon))


def emit_knn(result: KnnResult, prefix, raster: bool = True, grid_lat=None, grid_lon=None) -> list[Path]:
    """Nearest-region map and nearest-distance heatmap for a kNN result."""
    if result.lat is None or result.lon is None:
        raise DataError("emit_knn: result carries no coordinates")
    prefix = Path(prefix)
    out = []
    for name, values, cat in (("region", result.nearest_region, True),
                              ("distance", result.nearest_distance, False)):
        csv_path = prefix.with_name(f"{prefix.name}_{name}.csv")
        ppm_path = prefix.with_name(f"{prefix.name}_{name}.ppm") if raster else None
        emit_heatmap(csv_path, result.lat, result.lon, values, ppm_path, cat, grid_lat, grid_lon)
        out += [p for p in (csv_path, ppm_path) if p is not None]
    return out
