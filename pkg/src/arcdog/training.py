"""Adam, reduce-on-plateau with early stopping, the training loop and the
leave-one-quadrant-out experiment grid."""
from __future__ import annotations

import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import data as D
from . import model as M
from . import numerics as nx
from .analysis import MetricsReport, compute_metrics
from .errors import ArcdogError, ConfigError, DataError, NonFiniteError
from .loss import LossConfig, arcdog_loss, domain_matrix

log = logging.getLogger(__name__)

DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    plateau_factor: float = 0.1
    patience: int = 5
    max_reductions: int = 3
    # None: 512 below 50k samples, else 4096
    batch_size: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 200
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.patience < 1 or self.max_reductions < 1 or self.max_epochs < 1:
            raise ConfigError("patience, max_reductions and max_epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    def resolved_batch_size(self, n_samples: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 512 if n_samples < 50_000 else 4096


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    params: dict[str, torch.Tensor]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, torch.zeros_like(p))
            self.v.setdefault(name, torch.zeros_like(p))


def adam_step(state: AdamState, grads: dict[str, torch.Tensor]) -> AdamState:
    """One bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in state.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)
    return state


# ---------------------------------------------------------------------------
# scheduler


@dataclass
class PlateauScheduler:
    """Reduce-on-plateau with termination on the final reduction.

    An epoch improves only if its validation loss is strictly below the best
    so far. After ``patience`` non-improving epochs the learning rate is
    multiplied by ``factor``; the ``max_reductions``-th reduction stops
    training and asks for the best parameters to be restored.
    """

    lr: float
    factor: float = 0.1
    patience: int = 5
    max_reductions: int = 3
    best: float = math.inf
    best_epoch: int = -1
    bad_epochs: int = 0
    reductions: int = 0
    epoch: int = 0

    def step(self, val_loss: float) -> tuple[float, bool, bool, bool]:
        """Returns (new lr, stop, restore_best, improved)."""
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            return self.lr, False, False, True
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            self.reductions += 1
            self.lr *= self.factor
            if self.reductions >= self.max_reductions:
                return self.lr, True, True, False
        return self.lr, False, False, False


def plateau_schedule(scheduler: PlateauScheduler, val_loss: float) -> tuple[float, bool, bool]:
    lr, stop, restore, _ = scheduler.step(val_loss)
    return lr, stop, restore


def simulate_schedule(val_losses, lr: float = 1e-3, factor: float = 0.1, patience: int = 5,
                      max_reductions: int = 3) -> list[dict]:
    """Run the scheduler over a fixed loss sequence; returns the epoch log."""
    sched = PlateauScheduler(lr, factor, patience, max_reductions)
    trace = []
    for epoch, loss in enumerate(val_losses, start=1):
        lr_used = sched.lr
        new_lr, stop, restore, improved = sched.step(loss)
        trace.append({"epoch": epoch, "val_loss": loss, "lr": lr_used, "next_lr": new_lr,
                      "improved": improved, "stop": stop, "restore": restore})
        if stop:
            break
    return trace


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict[str, torch.Tensor]
    model_config: M.ModelConfig
    epoch_log: list[dict]
    best_epoch: int
    best_val_loss: float
    stats: D.NormalizationStats
    split: tuple[np.ndarray, np.ndarray, np.ndarray]
    metrics: dict[str, MetricsReport] = field(default_factory=dict)
    stopped_by: str = ""


def model_config_for(dataset: D.Dataset, climate_mode: str, base: M.ModelConfig | None = None) -> M.ModelConfig:
    base = base or M.ModelConfig()
    return replace(base, input_channels=dataset.input_channels(climate_mode),
                   timepoints=dataset.timepoints, num_classes=dataset.num_classes)


@dataclass
class _Split:
    x: torch.Tensor
    v: torch.Tensor
    y: torch.Tensor


def _prepare(dataset, idx, mode, stats, dtype):
    return _Split(
        x=D.make_model_input(dataset, mode, stats, idx, dtype=dtype),
        v=domain_matrix(dataset.climate[idx], stats.climate_mean, stats.climate_std),
        y=torch.from_numpy(dataset.labels[idx]),
    )


def evaluate_loss(params, split: _Split, mcfg, lcfg, batch_size: int) -> dict[str, float]:
    """Size-weighted mean of per-batch loss terms, eval mode."""
    n = len(split.y)
    sums = {"classification": 0.0, "regression_term": 0.0, "total": 0.0}
    with torch.no_grad():
        for idx in D.iter_batches(n, batch_size):
            logits, feats = M.forward(params, split.x[idx], mcfg, train=False)
            parts = arcdog_loss(logits, split.y[idx], feats, split.v[idx], lcfg).as_floats()
            for k in sums:
                sums[k] += parts[k] * len(idx)
    return {k: s / n for k, s in sums.items()}


def predict(params, x: torch.Tensor, mcfg: M.ModelConfig, batch_size: int = 4096):
    """Eval-mode (predicted labels, features)."""
    preds, feats = [], []
    with torch.no_grad():
        for idx in D.iter_batches(len(x), batch_size):
            logits, f = M.forward(params, x[idx], mcfg, train=False)
            preds.append(logits.argmax(1))
            feats.append(f)
    if not preds:
        return torch.zeros(0, dtype=torch.long), torch.zeros(0, mcfg.feature_dim)
    return torch.cat(preds), torch.cat(feats)


def train(
    dataset: D.Dataset,
    plan: D.SplitPlan,
    model_config: M.ModelConfig | None = None,
    loss_config: LossConfig | None = None,
    train_config: TrainConfig | None = None,
    climate_mode: str = "all",
    evaluate: bool = True,
) -> TrainResult:
    """Train on the three source quadrants, early-stopped on validation loss."""
    lcfg = loss_config or LossConfig()
    tcfg = train_config or TrainConfig()
    mcfg = model_config_for(dataset, climate_mode, model_config)
    dtype = DTYPES[tcfg.dtype]

    train_idx, val_idx, test_idx = D.split_indices(dataset, plan)
    if len(train_idx) == 0:
        raise DataError(f"empty training split for test region {plan.test_region}")
    stats = D.compute_stats(dataset, train_idx)
    tr = _prepare(dataset, train_idx, climate_mode, stats, dtype)
    va = _prepare(dataset, val_idx, climate_mode, stats, dtype) if len(val_idx) else tr
    batch_size = tcfg.resolved_batch_size(len(dataset))
    min_rows = min(mcfg.feature_dim, batch_size)

    torch.manual_seed(tcfg.seed)
    params = {k: t.to(dtype).requires_grad_(True) for k, t in M.init_params(mcfg, tcfg.seed).items()}
    adam = AdamState(params, tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    sched = PlateauScheduler(tcfg.learning_rate, tcfg.plateau_factor, tcfg.patience, tcfg.max_reductions)
    shuffle_rng = np.random.default_rng(tcfg.seed)
    dropout_gen = torch.Generator().manual_seed(tcfg.seed)

    best_params = {k: t.detach().clone() for k, t in params.items()}
    epoch_log = []
    stopped_by = "max_epochs"
    for epoch in range(1, tcfg.max_epochs + 1):
        sums = {"classification": 0.0, "regression_term": 0.0, "total": 0.0}
        seen = 0
        for idx in D.iter_batches(len(train_idx), batch_size, shuffle_rng):
            if len(idx) < min_rows and seen:
                continue  # tail too small for a meaningful batch regression
            logits, feats = M.forward(params, tr.x[idx], mcfg, train=True, generator=dropout_gen)
            parts = arcdog_loss(logits, tr.y[idx], feats, tr.v[idx], lcfg)
            nx.check_finite(parts.total.detach(), f"training loss (epoch {epoch})")
            grads = torch.autograd.grad(parts.total, list(params.values()), allow_unused=True)
            adam_step(adam, dict(zip(params, grads)))
            for k, val in parts.as_floats().items():
                sums[k] += val * len(idx)
            seen += len(idx)
        train_loss = {k: s / seen for k, s in sums.items()}
        val_loss = evaluate_loss(params, va, mcfg, lcfg, batch_size)
        lr_used = adam.lr
        new_lr, stop, restore, improved = sched.step(val_loss["total"])
        if improved:
            best_params = {k: t.detach().clone() for k, t in params.items()}
        adam.lr = new_lr
        epoch_log.append({
            "epoch": epoch,
            "train_loss": train_loss["total"],
            "train_classification": train_loss["classification"],
            "train_regression_term": train_loss["regression_term"],
            "val_loss": val_loss["total"],
            "val_classification": val_loss["classification"],
            "val_regression_term": val_loss["regression_term"],
            "lr": lr_used,
            "next_lr": new_lr,
            "improved": improved,
        })
        log.debug("epoch %d train %.5f val %.5f lr %.1e", epoch, train_loss["total"],
                  val_loss["total"], lr_used)
        if stop:
            stopped_by = "plateau"
            break

    final = {k: t.detach().clone() for k, t in best_params.items()}
    result = TrainResult(
        params=final, model_config=mcfg, epoch_log=epoch_log, best_epoch=sched.best_epoch,
        best_val_loss=sched.best, stats=stats, split=(train_idx, val_idx, test_idx),
        stopped_by=stopped_by,
    )
    if evaluate:
        k = dataset.num_classes
        for name, idx, prepared in (("train", train_idx, tr), ("val", val_idx, va if len(val_idx) else None)):
            if prepared is None or not len(idx):
                continue
            pred, _ = predict(final, prepared.x, mcfg, batch_size=4096)
            result.metrics[name] = compute_metrics(pred.numpy(), dataset.labels[idx], k)
        if len(test_idx):
            x_test = D.make_model_input(dataset, climate_mode, stats, test_idx, dtype=dtype)
            pred, _ = predict(final, x_test, mcfg, batch_size=4096)
            result.metrics["test"] = compute_metrics(pred.numpy(), dataset.labels[test_idx], k)
    return result


def run_metrics(result: TrainResult, echo: dict) -> dict:
    """The per-run metrics document (JSON-serializable, deterministic)."""
    return {
        "config": echo,
        "seed": echo.get("train", {}).get("seed"),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "stopped_by": result.stopped_by,
        "epoch_log": result.epoch_log,
        "regression_term_trace": [e["train_regression_term"] for e in result.epoch_log],
        "metrics": {name: m.to_dict() for name, m in result.metrics.items()},
    }


# ---------------------------------------------------------------------------
# experiment grid


C_SWEEP = (-1.0, -0.1, 0.0, 0.001, 0.01, 0.1, 1.0)

MODE_LABELS = {
    "none": "Baseline",
    "all": "All climate input",
    "temperature": "Temperature only",
    "precipitation": "Precipitation only",
}


@dataclass(frozen=True)
class Setting:
    label: str
    climate_mode: str
    c: float


@dataclass(frozen=True)
class ExperimentConfig:
    test_regions: tuple[int, ...] = (0, 1, 2, 3)
    sweep: str = "c"  # "c" (c values, climate input) or "climate" (input modes, c = 0)
    c_values: tuple[float, ...] = C_SWEEP
    climate_modes: tuple[str, ...] = ("none", "all", "temperature", "precipitation")
    # climate input of the c-sweep rows
    climate_input: str = "all"
    include_baseline: bool = True
    trials: int = 5
    base_seed: int = 0
    metric: str = "macro"
    model: M.ModelConfig = M.ModelConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    validation_fraction: float = 0.10

    def __post_init__(self):
        if not self.test_regions or any(r not in (0, 1, 2, 3) for r in self.test_regions):
            raise ConfigError(f"test_regions must be drawn from 0-3, got {self.test_regions}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.sweep not in ("c", "climate"):
            raise ConfigError(f"sweep must be 'c' or 'climate', got {self.sweep!r}")
        if self.metric not in ("macro", "overall"):
            raise ConfigError("metric must be 'macro' or 'overall'")
        for mode in (*self.climate_modes, self.climate_input):
            if mode not in D.CLIMATE_MODES:
                raise ConfigError(f"unknown climate mode {mode!r}")

    def settings(self) -> list[Setting]:
        rows = []
        if self.include_baseline:
            rows.append(Setting("Baseline", "none", 0.0))
        if self.sweep == "c":
            rows += [Setting(f"c = {_fmt_c(c)}", self.climate_input, float(c)) for c in self.c_values]
        else:
            rows += [Setting(MODE_LABELS[m], m, 0.0) for m in self.climate_modes
                     if not (m == "none" and self.include_baseline)]
        return rows

    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.trials)]


def _fmt_c(c: float) -> str:
    return f"{c:g}"


@dataclass
class CellRun:
    setting: Setting
    test_region: int
    seed: int
    metrics: dict | None = None
    error: str | None = None


def _run_cell(dataset, exp: ExperimentConfig, setting: Setting, region: int, seed: int) -> CellRun:
    lcfg = replace(exp.loss, c=setting.c)
    tcfg = replace(exp.train, seed=seed)
    plan = D.SplitPlan(region, exp.validation_fraction, seed)
    echo = {"setting": asdict(setting), "test_region": region, "loss": asdict(lcfg),
            "train": asdict(tcfg), "model": asdict(exp.model)}
    try:
        res = train(dataset, plan, exp.model, lcfg, tcfg, setting.climate_mode)
    except ArcdogError as exc:
        log.warning("cell %s region %d seed %d failed: %s", setting.label, region, seed, exc)
        return CellRun(setting, region, seed, error=f"{type(exc).__name__}: {exc}")
    echo["model"] = asdict(res.model_config)
    return CellRun(setting, region, seed, metrics=run_metrics(res, echo))


# worker-side dataset for process pools
_WORKER_DATASET = None


def _init_worker(dataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset
    torch.set_num_threads(1)


def _run_cell_worker(args):
    return _run_cell(_WORKER_DATASET, *args)


@dataclass
class GridResult:
    config: ExperimentConfig
    runs: list[CellRun]

    def cell_values(self, label: str, region: int, metric: str | None = None) -> list[float]:
        metric = metric or self.config.metric
        key = "macro_accuracy" if metric == "macro" else "overall_accuracy"
        return [r.metrics["metrics"]["test"][key] for r in self.runs
                if r.setting.label == label and r.test_region == region
                and r.metrics is not None and "test" in r.metrics["metrics"]]

    def failed(self, label: str, region: int) -> bool:
        return any(r.error for r in self.runs if r.setting.label == label and r.test_region == region)

    def table(self, metric: str | None = None) -> list[dict]:
        rows = []
        for s in self.config.settings():
            row = {"method": s.label}
            for region in self.config.test_regions:
                vals = self.cell_values(s.label, region, metric)
                if self.failed(s.label, region) or not vals:
                    row[region] = None
                    row[f"{region}_std"] = None
                else:
                    row[region] = statistics.fmean(vals)
                    row[f"{region}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
            rows.append(row)
        return rows


def run_experiment_grid(dataset: D.Dataset, exp: ExperimentConfig, jobs: int = 1,
                        on_run=None) -> GridResult:
    """Train every (setting, test region, seed) cell and collect per-run metrics.

    Failed runs are recorded and the grid continues. Results do not depend on
    execution order.
    """
    cells = [(s, r, seed) for s in exp.settings() for r in exp.test_regions for seed in exp.seeds()]
    runs: list[CellRun] = []
    if jobs <= 1:
        for s, r, seed in cells:
            run = _run_cell(dataset, exp, s, r, seed)
            runs.append(run)
            if on_run:
                on_run(run)
    else:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(dataset,)) as pool:
            for run in pool.map(_run_cell_worker, [(exp, s, r, seed) for s, r, seed in cells]):
                runs.append(run)
                if on_run:
                    on_run(run)
    return GridResult(exp, runs)


def summary_rows(grid: GridResult, metric: str | None = None) -> tuple[list[str], list[list[str]]]:
    """Table-shaped rows: method, metric label, one column per test region."""
    metric = metric or grid.config.metric
    header = ["method", "metric", *[str(r) for r in grid.config.test_regions]]
    out = []
    for row in grid.table(metric):
        cells = ["failed" if row[r] is None else f"{row[r]:.4f}" for r in grid.config.test_regions]
        out.append([row["method"], f"{metric}_accuracy", *cells])
    return header, out

