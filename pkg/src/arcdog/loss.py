"""Classification loss combined with a signed closed-form regression term.

    total = cross_entropy(logits, labels) - c * ||V - Theta Theta^+ V|| / ||V||

With c > 0 the features are pushed to make the domain matrix V linearly
unrecoverable; c < 0 pushes them to encode it.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import numerics as nx
from .errors import ConfigError, DataError, NumericalError


@dataclass(frozen=True)
class LossConfig:
    c: float = 0.0
    normalize_residual: bool = True
    square_residual: bool = False
    # None selects the batch-adaptive default (see numerics.default_ridge)
    ridge: float | None = None

    def __post_init__(self):
        if self.ridge is not None and self.ridge < 0:
            raise ConfigError(f"ridge must be >= 0, got {self.ridge}")


@dataclass
class LossBreakdown:
    classification: torch.Tensor
    regression_term: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "classification": float(self.classification.detach()),
            "regression_term": float(self.regression_term.detach()),
            "total": float(self.total.detach()),
        }


def regression_term(features: torch.Tensor, domains: torch.Tensor, config: LossConfig) -> torch.Tensor:
    theta = features.to(nx.DTYPE)
    v = domains.detach().to(nx.DTYPE)
    m, f = theta.shape
    if m < f:
        warnings.warn(f"batch of {m} rows has fewer rows than feature columns ({f})", stacklevel=3)
    ridge = nx.default_ridge(theta) if config.ridge is None else config.ridge
    resid = nx.residual_norm(theta, v, ridge, squared=config.square_residual)
    if config.normalize_residual:
        target = float(torch.linalg.norm(v))
        if target == 0.0:
            raise NumericalError("degenerate domain batch: ||V|| = 0")
        resid = resid / (target**2 if config.square_residual else target)
    return resid


def arcdog_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    features: torch.Tensor,
    domains: torch.Tensor,
    config: LossConfig,
) -> LossBreakdown:
    ce = nx.cross_entropy(logits, labels)
    if config.c == 0.0:
        # logged only, so a short batch is not worth a warning
        with torch.no_grad(), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            reg = regression_term(features.detach(), domains, config)
        total = ce
    else:
        reg = regression_term(features, domains, config)
        total = ce - config.c * reg.to(ce.dtype)
    return LossBreakdown(classification=ce, regression_term=reg, total=total)


# ---------------------------------------------------------------------------
# domain matrix


def domain_matrix(
    climate: np.ndarray,
    mean: np.ndarray,
    std: np.ndarray,
    columns: Sequence[int] | None = None,
) -> torch.Tensor:
    """Z-score climate rows with training statistics; optionally keep a
    subset of variables (e.g. the temperature group)."""
    climate = np.asarray(climate, dtype=np.float64)
    if climate.ndim != 2 or climate.shape[1] != len(mean) or len(mean) != len(std):
        raise DataError(
            f"domain_matrix: climate shape {climate.shape} vs stats of length {len(mean)}"
        )
    if np.isnan(climate).any():
        raise DataError("domain_matrix: missing climate values")
    z = (climate - mean) / std
    if columns is not None:
        z = z[:, list(columns)]
    return torch.from_numpy(np.ascontiguousarray(z))
