"""Datasets of gridded pixel timeseries with climate descriptors.

Covers CSV ingestion, the binary cache, synthetic continuous-domain
benchmarks, quadrant partitioning at the median latitude/longitude, class
curation, train/val/test splitting and input standardization.

Observations keep a ``missing`` mask. Missing cells are imputed with the
per-channel mean of the training-designated samples; when a split is chosen
later, :func:`make_model_input` re-imputes with that split's training mean
(a standardized value of exactly 0).
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError

BANDS = ("1", "2", "3", "4", "5", "6", "7", "10", "11")
TIMEPOINTS = 8
CLIMATE_VARS = tuple(f"bio{i:02d}" for i in range(1, 20))
TEMPERATURE_VARS = CLIMATE_VARS[:11]
PRECIPITATION_VARS = CLIMATE_VARS[11:]

CURATED_CLASSES = (
    "Corn", "Soybeans", "Rice", "Alfalfa", "Grapes", "Almonds", "Pecans",
    "Peanuts", "Walnuts", "Potatoes", "Oats", "Cotton", "Dry beans",
    "Sugarbeets", "Winter Wheat", "Spring Wheat", "Durum Wheat", "Sorghum",
    "Canola", "Barley", "Sunflower", "Pop or Orn Corn",
    "Other Hay-Non Alfalfa", "Woody Wetlands", "Fallow-Idle Cropland",
)

CLIMATE_MODES = ("none", "all", "temperature", "precipitation")

REGION_NAMES = ("South West", "North West", "South East", "North East")


def csv_header(timepoints: int = TIMEPOINTS) -> list[str]:
    obs = [f"ls_t{t}_b{b}" for t in range(timepoints) for b in BANDS]
    return ["lat", "lon", "label", *obs, *CLIMATE_VARS]


@dataclass
class NormalizationStats:
    obs_mean: np.ndarray  # (C,)
    obs_std: np.ndarray
    climate_mean: np.ndarray  # (d,)
    climate_std: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}


@dataclass
class Sample:
    lat: float
    lon: float
    timeseries: np.ndarray  # T x C
    climate: np.ndarray  # d
    label: int
    region: int


@dataclass
class Dataset:
    lat: np.ndarray
    lon: np.ndarray
    timeseries: np.ndarray  # n x T x C, imputed
    missing: np.ndarray  # n x T x C bool
    climate: np.ndarray  # n x d
    labels: np.ndarray  # n, int64
    class_names: list[str]
    channel_names: list[str] = field(default_factory=lambda: [f"B{b}" for b in BANDS])
    climate_names: list[str] = field(default_factory=lambda: list(CLIMATE_VARS))
    temperature_columns: list[int] = field(default_factory=lambda: list(range(11)))
    regions: np.ndarray | None = None
    median_lat: float = math.nan
    median_lon: float = math.nan
    stats: NormalizationStats | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.regions is None:
            self.regions, self.median_lat, self.median_lon = assign_regions(self.lat, self.lon)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def timepoints(self) -> int:
        return self.timeseries.shape[1]

    @property
    def channels(self) -> int:
        return self.timeseries.shape[2]

    @property
    def precipitation_columns(self) -> list[int]:
        return [j for j in range(len(self.climate_names)) if j not in self.temperature_columns]

    @property
    def imputed_cells(self) -> int:
        return int(self.missing.sum())

    def sample(self, i: int) -> Sample:
        return Sample(float(self.lat[i]), float(self.lon[i]), self.timeseries[i],
                      self.climate[i], int(self.labels[i]), int(self.regions[i]))

    def climate_columns(self, mode: str) -> list[int]:
        if mode == "none":
            return []
        if mode == "all":
            return list(range(len(self.climate_names)))
        if mode == "temperature":
            return list(self.temperature_columns)
        if mode == "precipitation":
            return self.precipitation_columns
        raise ConfigError(f"unknown climate mode {mode!r}; expected one of {CLIMATE_MODES}")

    def input_channels(self, mode: str) -> int:
        return self.channels + len(self.climate_columns(mode))


# ---------------------------------------------------------------------------
# regions, stats, splits


def assign_regions(lat, lon) -> tuple[np.ndarray, float, float]:
    """Quadrants split at the median latitude/longitude (ties go north/east).

    0 = SW, 1 = NW, 2 = SE, 3 = NE.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if lat.size == 0:
        return np.zeros(0, dtype=np.int64), math.nan, math.nan
    med_lat, med_lon = float(np.median(lat)), float(np.median(lon))
    regions = (lat >= med_lat).astype(np.int64) + 2 * (lon >= med_lon).astype(np.int64)
    return regions, med_lat, med_lon


def compute_stats(dataset: Dataset, indices: np.ndarray | None = None) -> NormalizationStats:
    """Per-channel and per-climate-variable z-score statistics.

    Missing cells count as the training mean, so standardized training data
    has exactly zero mean and unit std per channel.
    """
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if idx.size == 0:
        raise DataError("cannot compute statistics on an empty split")
    obs = dataset.timeseries[idx].reshape(-1, dataset.channels)
    miss = dataset.missing[idx].reshape(-1, dataset.channels)
    observed = np.where(miss, 0.0, obs).sum(0)
    counts = (~miss).sum(0)
    mean = np.where(counts > 0, observed / np.maximum(counts, 1), 0.0)
    filled = np.where(miss, mean, obs)
    std = filled.std(0)
    clim = dataset.climate[idx]
    return NormalizationStats(
        obs_mean=mean,
        obs_std=_safe_std(std),
        climate_mean=clim.mean(0),
        climate_std=_safe_std(clim.std(0)),
    )


def _safe_std(std: np.ndarray) -> np.ndarray:
    return np.where(std > 0, std, 1.0)


def impute(dataset: Dataset, stats: NormalizationStats) -> Dataset:
    """Fill missing cells with the given per-channel means."""
    ts = np.where(dataset.missing, stats.obs_mean, dataset.timeseries)
    return replace(dataset, timeseries=ts, stats=stats)


@dataclass(frozen=True)
class SplitPlan:
    test_region: int
    validation_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.test_region not in (0, 1, 2, 3):
            raise ConfigError(f"test_region must be 0-3, got {self.test_region}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in [0, 1)")


def split_indices(dataset: Dataset, plan: SplitPlan) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(train, val, test) index arrays; val is a uniform random fraction of
    the source regions."""
    test = np.flatnonzero(dataset.regions == plan.test_region)
    source = np.flatnonzero(dataset.regions != plan.test_region)
    rng = np.random.default_rng(plan.seed)
    perm = rng.permutation(source)
    n_val = int(round(plan.validation_fraction * len(source)))
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    return train, val, test


def make_model_input(
    dataset: Dataset,
    mode: str,
    stats: NormalizationStats | None = None,
    indices: np.ndarray | None = None,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """m x T x C tensor: standardized observations, plus the standardized
    climate subset for ``mode`` repeated on every timepoint."""
    cols = dataset.climate_columns(mode)
    stats = stats or dataset.stats
    if stats is None:
        raise DataError("make_model_input: normalization stats missing")
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    obs = (dataset.timeseries[idx] - stats.obs_mean) / stats.obs_std
    obs = np.where(dataset.missing[idx], 0.0, obs)
    parts = [obs]
    if cols:
        clim = (dataset.climate[idx] - stats.climate_mean) / stats.climate_std
        clim = clim[:, cols]
        parts.append(np.repeat(clim[:, None, :], dataset.timepoints, axis=1))
    x = np.concatenate(parts, axis=2)
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def subset(dataset: Dataset, indices: Sequence[int]) -> Dataset:
    """Row subset that keeps the parent's medians and region ids."""
    idx = np.asarray(indices)
    return replace(
        dataset,
        lat=dataset.lat[idx], lon=dataset.lon[idx],
        timeseries=dataset.timeseries[idx], missing=dataset.missing[idx],
        climate=dataset.climate[idx], labels=dataset.labels[idx],
        regions=dataset.regions[idx],
    )


# ---------------------------------------------------------------------------
# curation and CSV ingestion


@dataclass
class RawTable:
    """Parsed rows before class curation; labels are class names."""

    lat: np.ndarray
    lon: np.ndarray
    timeseries: np.ndarray  # n x T x C with NaN for missing cells
    climate: np.ndarray
    labels: list[str]
    lines: list[int] = field(default_factory=list)


def curate_classes(
    raw: RawTable, allowed: Sequence[str] = CURATED_CLASSES, provenance: dict | None = None
) -> Dataset:
    """Keep rows whose class is in ``allowed``; labels index the allow-list."""
    allowed = list(allowed)
    if not allowed:
        raise DataError("curate_classes: empty allow-list")
    known = set(CURATED_CLASSES) | set(raw.labels)
    unknown = [name for name in allowed if name not in known]
    if unknown:
        raise DataError(f"curate_classes: unknown class names in allow-list: {unknown}")
    if len(set(allowed)) != len(allowed):
        raise DataError("curate_classes: duplicate names in allow-list")
    index = {name: i for i, name in enumerate(allowed)}
    keep = np.array([name in index for name in raw.labels], dtype=bool)
    labels = np.array([index[name] for name in raw.labels if name in index], dtype=np.int64)
    ts = raw.timeseries[keep]
    missing = np.isnan(ts)
    ds = Dataset(
        lat=raw.lat[keep], lon=raw.lon[keep],
        timeseries=np.where(missing, 0.0, ts), missing=missing,
        climate=raw.climate[keep], labels=labels, class_names=allowed,
        provenance={"source": "ingested", "dropped_rows": int((~keep).sum()), **(provenance or {})},
    )
    if len(ds):
        ds = impute(ds, compute_stats(ds))
    return ds


def read_csv_table(path: str | Path, allowed: Sequence[str] | None = None) -> RawTable:
    """Parse the ingestion CSV. Empty observation cells become NaN.

    When ``allowed`` is given, labels outside it are an error.
    """
    expected = csv_header()
    n_obs = TIMEPOINTS * len(BANDS)
    lat, lon, obs, clim, labels, lines = [], [], [], [], [], []
    allowed_set = set(allowed) if allowed is not None else None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header required") from None
        if [h.strip() for h in header] != expected:
            raise DataError(f"{path}:1: header does not match the {len(expected)}-column schema")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(expected):
                raise DataError(f"{path}:{line}: expected {len(expected)} columns, got {len(row)}")

            def num(text, col, allow_empty=False):
                text = text.strip()
                if text == "" and allow_empty:
                    return math.nan
                try:
                    value = float(text)
                except ValueError:
                    raise DataError(
                        f"{path}:{line}: cannot parse {text!r} in column {expected[col]}"
                    ) from None
                if not math.isfinite(value):
                    raise DataError(f"{path}:{line}: non-finite value in column {expected[col]}")
                return value

            label = row[2].strip()
            if not label:
                raise DataError(f"{path}:{line}: missing label")
            if allowed_set is not None and label not in allowed_set:
                raise DataError(f"{path}:{line}: unknown label {label!r}")
            lat.append(num(row[0], 0))
            lon.append(num(row[1], 1))
            obs.append([num(row[3 + j], 3 + j, allow_empty=True) for j in range(n_obs)])
            clim.append([num(row[3 + n_obs + j], 3 + n_obs + j) for j in range(len(CLIMATE_VARS))])
            labels.append(label)
            lines.append(line)
    n = len(labels)
    return RawTable(
        lat=np.array(lat, dtype=np.float64),
        lon=np.array(lon, dtype=np.float64),
        timeseries=np.array(obs, dtype=np.float64).reshape(n, TIMEPOINTS, len(BANDS)),
        climate=np.array(clim, dtype=np.float64).reshape(n, len(CLIMATE_VARS)),
        labels=labels,
        lines=lines,
    )


def ingest_csv(
    path: str | Path, classes: Sequence[str] = CURATED_CLASSES, curate: bool = True
) -> Dataset:
    """Read the ingestion CSV into a Dataset.

    With ``curate`` rows outside ``classes`` are dropped; otherwise such a
    label is an error naming its line.
    """
    raw = read_csv_table(path, allowed=None if curate else classes)
    if not raw.labels:
        raise DataError(f"{path}: no data rows")
    ds = curate_classes(raw, classes, provenance={"path": str(path)})
    if not len(ds):
        raise DataError(f"{path}: no rows left after class curation")
    return ds


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Inverse of :func:`ingest_csv`; missing cells are written empty."""
    if dataset.channels != len(BANDS) or len(dataset.climate_names) != len(CLIMATE_VARS):
        raise DataError("write_csv: dataset does not follow the real-data schema")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(csv_header(dataset.timepoints))
        for i in range(len(dataset)):
            obs = dataset.timeseries[i].reshape(-1)
            miss = dataset.missing[i].reshape(-1)
            writer.writerow([
                repr(float(dataset.lat[i])), repr(float(dataset.lon[i])),
                dataset.class_names[dataset.labels[i]],
                *("" if m else repr(float(v)) for v, m in zip(obs, miss)),
                *(repr(float(v)) for v in dataset.climate[i]),
            ])


# ---------------------------------------------------------------------------
# binary cache
#
#   magic "ARCDOGDS" | u32 version | u32 n, T, C, d | u32 meta length
#   | meta JSON (names, provenance, medians) | u8 has_stats
#   | [stats: C + C + d + d float64] | n packed records of float64:
#     lat, lon, label, region, T*C observations, T*C missing flags, d climate
#
# all numbers little-endian.

CACHE_MAGIC = b"ARCDOGDS"
CACHE_VERSION = 1


def save_cache(dataset: Dataset, path: str | Path) -> None:
    n, t, c = dataset.timeseries.shape
    d = dataset.climate.shape[1]
    meta = json.dumps({
        "class_names": list(dataset.class_names),
        "channel_names": list(dataset.channel_names),
        "climate_names": list(dataset.climate_names),
        "temperature_columns": list(dataset.temperature_columns),
        "median_lat": dataset.median_lat,
        "median_lon": dataset.median_lon,
        "provenance": dataset.provenance,
    }, sort_keys=True).encode()
    records = np.concatenate([
        dataset.lat[:, None], dataset.lon[:, None],
        dataset.labels[:, None].astype(np.float64),
        dataset.regions[:, None].astype(np.float64),
        dataset.timeseries.reshape(n, t * c),
        dataset.missing.reshape(n, t * c).astype(np.float64),
        dataset.climate,
    ], axis=1)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<5I", CACHE_VERSION, n, t, c, d))
        fh.write(struct.pack("<I", len(meta)) + meta)
        if dataset.stats is None:
            fh.write(b"\x00")
        else:
            fh.write(b"\x01")
            s = dataset.stats
            for arr in (s.obs_mean, s.obs_std, s.climate_mean, s.climate_std):
                fh.write(np.asarray(arr, dtype="<f8").tobytes())
        fh.write(records.astype("<f8").tobytes())


def load_cache(path: str | Path) -> Dataset:
    data = Path(path).read_bytes()
    if not data.startswith(CACHE_MAGIC):
        raise DataError(f"{path}: not a dataset cache (bad magic)")
    off = len(CACHE_MAGIC)
    version, n, t, c, d = struct.unpack_from("<5I", data, off)
    off += 20
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    (mlen,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + mlen])
    off += mlen
    has_stats = data[off]
    off += 1

    def floats(count):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr

    stats = None
    if has_stats:
        stats = NormalizationStats(floats(c), floats(c), floats(d), floats(d))
    width = 4 + 2 * t * c + d
    rec = floats(n * width).reshape(n, width)
    if off != len(data):
        raise DataError(f"{path}: trailing bytes in dataset cache")
    ds = Dataset(
        lat=rec[:, 0].copy(), lon=rec[:, 1].copy(),
        timeseries=rec[:, 4:4 + t * c].reshape(n, t, c).copy(),
        missing=rec[:, 4 + t * c:4 + 2 * t * c].reshape(n, t, c) != 0,
        climate=rec[:, 4 + 2 * t * c:].copy(),
        labels=rec[:, 2].astype(np.int64),
        class_names=meta["class_names"],
        channel_names=meta["channel_names"],
        climate_names=meta["climate_names"],
        temperature_columns=meta["temperature_columns"],
        stats=stats,
        provenance=meta["provenance"],
    )
    stored = rec[:, 3].astype(np.int64)
    if not np.array_equal(stored, ds.regions):
        raise DataError(f"{path}: stored regions disagree with recomputed medians")
    return ds


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SyntheticSpec:
    grid_size: int = 160
    domain_dim: int = 8
    num_classes: int = 5
    timepoints: int = 8
    channels: int = 9
    harmonics: int = 3
    drift_strength: float = 1.5
    noise: float = 0.3
    cloud_probability: float = 0.1
    seed: int = 0
    # strength of the domain-dependent shift of the observations
    modulation: float = 1.0
    # spread between class templates
    class_separation: float = 1.0
    # columns of the grid; defaults to grid_size (square grid)
    grid_cols: int | None = None

    def __post_init__(self):
        ints = ("grid_size", "domain_dim", "num_classes", "timepoints", "channels", "harmonics")
        for name in ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"SyntheticSpec.{name} must be positive")
        if self.num_classes < 2:
            raise ConfigError("SyntheticSpec.num_classes must be >= 2")
        if self.grid_cols is not None and self.grid_cols < 1:
            raise ConfigError("SyntheticSpec.grid_cols must be positive")
        for name in ("drift_strength", "noise", "modulation", "class_separation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"SyntheticSpec.{name} must be nonnegative")
        if not 0.0 <= self.cloud_probability <= 1.0:
            raise ConfigError("SyntheticSpec.cloud_probability must be in [0, 1]")


# bounding box of the synthetic grid, loosely the continental US
LAT_RANGE = (25.0, 49.0)
LON_RANGE = (-124.0, -67.0)


@dataclass
class DomainField:
    """v_j(x, y) = sum_h a_jh sin(2 pi (kx_jh x + ky_jh y) + phi_jh) on the
    unit square; (x, y) are normalized lon/lat."""

    amplitudes: np.ndarray  # d x H
    frequencies: np.ndarray  # d x H x 2
    phases: np.ndarray  # d x H

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        arg = (self.frequencies[None, :, :, 0] * np.asarray(x)[:, None, None]
               + self.frequencies[None, :, :, 1] * np.asarray(y)[:, None, None])
        return (self.amplitudes[None] * np.sin(2 * np.pi * arg + self.phases[None])).sum(-1)

    def lipschitz_bounds(self) -> np.ndarray:
        """Per-dimension bound on |grad v_j| over the unit square."""
        speed = np.linalg.norm(self.frequencies, axis=-1)
        return (np.abs(self.amplitudes) * 2 * np.pi * speed).sum(-1)

    def lipschitz_bound(self) -> float:
        """Bound on ||v(p) - v(q)|| / ||p - q|| in normalized coordinates."""
        return float(np.linalg.norm(self.lipschitz_bounds()))


def _streams(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def make_domain_field(spec: SyntheticSpec, rng: np.random.Generator) -> DomainField:
    d, h = spec.domain_dim, spec.harmonics
    # harmonic h has frequency up to (h + 1) / 2 cycles across the grid
    scale = (np.arange(h) + 1.0) / 2.0
    freqs = rng.uniform(-1.0, 1.0, size=(d, h, 2)) * scale[None, :, None]
    amps = rng.normal(size=(d, h)) / (np.arange(h) + 1.0)
    phases = rng.uniform(0, 2 * np.pi, size=(d, h))
    return DomainField(amps, freqs, phases)


def _smooth_curves(rng: np.random.Generator, shape: tuple[int, ...], timepoints: int) -> np.ndarray:
    """Random smooth curves over time: a few low temporal harmonics.

    Returns an array of shape (*shape, timepoints)."""
    t = np.arange(timepoints) / max(timepoints, 1)
    out = rng.normal(size=(*shape, 1)) * 0.5
    for k in (1, 2):
        amp = rng.normal(size=(*shape, 1)) / k
        phase = rng.uniform(0, 2 * np.pi, size=(*shape, 1))
        out = out + amp * np.sin(2 * np.pi * k * t / 2 + phase)
    return out


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Smooth continuous-domain benchmark.

    Class prevalence at each point is softmax of an affine function of the
    domain vector (scaled by ``drift_strength``); observations are a class
    template plus a domain-dependent affine modulation, Gaussian noise and
    cloud-masked timepoints.
    """
    rows, cols = spec.grid_size, spec.grid_cols or spec.grid_size
    d, k, t, c = spec.domain_dim, spec.num_classes, spec.timepoints, spec.channels
    field_rng, class_rng, template_rng, mod_rng = _streams(spec.seed, 4)
    row_rngs = _streams(spec.seed + 0x5EED, rows)

    dom = make_domain_field(spec, field_rng)
    prior_w = class_rng.normal(size=(d, k)) / math.sqrt(d)
    prior_b = np.zeros(k)
    templates = spec.class_separation * _smooth_curves(template_rng, (k, c), t).transpose(0, 2, 1)
    # the domain shifts observations along the directions that separate the
    # class templates, so class and domain are confounded without v
    centered = templates - templates.mean(0)
    mixing = mod_rng.normal(size=(k, d)) / math.sqrt(d)

    ys = (np.arange(rows) + 0.5) / rows
    xs = (np.arange(cols) + 0.5) / cols
    lat_all, lon_all, clim_all, lab_all, obs_all, miss_all = [], [], [], [], [], []
    for r, rng in enumerate(row_rngs):
        y = np.full(cols, ys[r])
        v = dom(xs, y)  # cols x d
        logits = prior_b + spec.drift_strength * v @ prior_w
        prob = np.exp(logits - logits.max(1, keepdims=True))
        prob /= prob.sum(1, keepdims=True)
        u = rng.random(cols)
        labels = np.minimum((prob.cumsum(1) < u[:, None]).sum(1), k - 1)
        shift = spec.modulation * np.einsum("ktc,nk->ntc", centered, v @ mixing.T)
        obs = templates[labels] + shift + spec.noise * rng.normal(size=(cols, t, c))
        cloudy = rng.random((cols, t)) < spec.cloud_probability
        miss = np.repeat(cloudy[:, :, None], c, axis=2)
        lat_all.append(LAT_RANGE[0] + y * (LAT_RANGE[1] - LAT_RANGE[0]))
        lon_all.append(LON_RANGE[0] + xs * (LON_RANGE[1] - LON_RANGE[0]))
        clim_all.append(v)
        lab_all.append(labels)
        obs_all.append(obs)
        miss_all.append(miss)

    missing = np.concatenate(miss_all)
    obs = np.concatenate(obs_all)
    if d == len(CLIMATE_VARS):
        climate_names, temp_cols = list(CLIMATE_VARS), list(range(len(TEMPERATURE_VARS)))
    else:
        climate_names = [f"v{j:02d}" for j in range(d)]
        temp_cols = list(range(math.ceil(d * len(TEMPERATURE_VARS) / len(CLIMATE_VARS))))
    ds = Dataset(
        lat=np.concatenate(lat_all), lon=np.concatenate(lon_all),
        timeseries=np.where(missing, 0.0, obs), missing=missing,
        climate=np.concatenate(clim_all), labels=np.concatenate(lab_all).astype(np.int64),
        class_names=[f"class{j}" for j in range(k)],
        channel_names=[f"B{BANDS[j]}" if c == len(BANDS) else f"ch{j}" for j in range(c)],
        climate_names=climate_names,
        temperature_columns=temp_cols,
        provenance={
            "source": "synthetic",
            "spec": asdict(spec),
            "lipschitz_bound": dom.lipschitz_bound(),
        },
    )
    return impute(ds, compute_stats(ds))


def domain_field_for(spec: SyntheticSpec) -> DomainField:
    """The domain field that :func:`generate_synthetic` uses for ``spec``."""
    return make_domain_field(spec, _streams(spec.seed, 4)[0])


def grid_step(spec: SyntheticSpec) -> tuple[float, float]:
    """Normalized (x, y) spacing of the synthetic grid."""
    return 1.0 / (spec.grid_cols or spec.grid_size), 1.0 / spec.grid_size


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterable[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
