"""Dense float64 tensor ops, the closed-form least-squares residual, and a
finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects; reverse-mode gradients come from
torch autograd except for the least-squares residual, whose backward pass is
written out by hand (adjoint of the symmetric normal-equations solve).
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import NonFiniteError, RankDeficientError, ShapeError

DTYPE = torch.float64

# Toggle for the per-op finiteness guard (tests flip it to measure overhead).
CHECK_FINITE = True

# Condition number above which an unregularized Gram matrix is refused.
MAX_GRAM_CONDITION = 1e12


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def _finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if CHECK_FINITE and not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"{op}: non-finite values in output")
    return t


def check_finite(t: torch.Tensor, op: str) -> torch.Tensor:
    """Unconditional finiteness guard."""
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"{op}: non-finite values in output")
    return t


@contextmanager
def finite_checks(enabled: bool):
    """Temporarily switch the per-op guard; callers that disable it must
    check their final outputs (NaN and Inf propagate through every op here)."""
    global CHECK_FINITE
    prev, CHECK_FINITE = CHECK_FINITE, enabled
    try:
        yield
    finally:
        CHECK_FINITE = prev


# ---------------------------------------------------------------------------
# core ops


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _finite(a @ b, "matmul")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        out = a + b
    except RuntimeError as exc:
        raise ShapeError(f"add: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}") from exc
    return _finite(out, "add")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        out = a * b
    except RuntimeError as exc:
        raise ShapeError(f"mul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}") from exc
    return _finite(out, "mul")


def relu(x: torch.Tensor) -> torch.Tensor:
    return _finite(torch.relu(x), "relu")


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return _finite(torch.softmax(x, dim=axis), "softmax")


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    width = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and tuple(p.shape) != (width,):
            raise ShapeError(f"layer_norm: {name} shape {tuple(p.shape)} vs input {tuple(x.shape)}")
    return _finite(F.layer_norm(x, (width,), gain, bias, eps), "layer_norm")


def conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Same-padded 1d convolution.

    x is (m, channels_in, T); weight is (channels_out, channels_in, k) with k odd.
    """
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: shape mismatch {tuple(x.shape)} vs {tuple(weight.shape)}")
    k = weight.shape[2]
    if k % 2 != 1:
        raise ShapeError(f"conv1d: same padding needs an odd kernel, got weight {tuple(weight.shape)}")
    return _finite(F.conv1d(x, weight, bias, padding=k // 2), "conv1d")


def max_over_axis(x: torch.Tensor, axis: int) -> torch.Tensor:
    return x.max(dim=axis).values


def dropout(
    x: torch.Tensor, rate: float, train: bool, generator: torch.Generator | None = None
) -> torch.Tensor:
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.dim() != 2 or labels.dim() != 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"cross_entropy: shape mismatch {tuple(logits.shape)} vs {tuple(labels.shape)}"
        )
    k = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    return _finite(F.cross_entropy(logits, labels.long()), "cross_entropy")


# ---------------------------------------------------------------------------
# closed-form least squares


@dataclass
class LeastSquaresResult:
    coefficients: torch.Tensor  # f x d
    fitted: torch.Tensor  # m x d
    residual_norm: float
    target_norm: float
    # forward record needed by the backward pass
    features: torch.Tensor | None = field(default=None, repr=False)
    targets: torch.Tensor | None = field(default=None, repr=False)
    cholesky: torch.Tensor | None = field(default=None, repr=False)
    ridge: float = 0.0

    @property
    def residual(self) -> torch.Tensor:
        return self.targets - self.fitted


def default_ridge(features: torch.Tensor, scale: float = 1e-6) -> float:
    """Ridge proportional to the mean eigenvalue of the Gram matrix."""
    f = features.shape[1]
    return scale * float((features.detach() ** 2).sum()) / f


def pinv_least_squares(
    features: torch.Tensor, targets: torch.Tensor, ridge: float = 0.0
) -> LeastSquaresResult:
    """Solve min_Phi ||targets - features @ Phi||_F (+ ridge ||Phi||_F^2).

    Works through the f x f normal equations with a Cholesky factor; the
    m x m projector is never formed.
    """
    theta = features.detach().to(DTYPE)
    v = targets.detach().to(DTYPE)
    if theta.dim() != 2 or v.dim() != 2 or theta.shape[0] != v.shape[0]:
        raise ShapeError(
            f"pinv_least_squares: shape mismatch {tuple(theta.shape)} vs {tuple(v.shape)}"
        )
    m, f = theta.shape
    if m < 1 or f < 1 or v.shape[1] < 1:
        raise ShapeError(f"pinv_least_squares: empty operand {tuple(theta.shape)}, {tuple(v.shape)}")
    if ridge < 0:
        raise ValueError(f"ridge must be nonnegative, got {ridge}")
    if not (torch.isfinite(theta).all() and torch.isfinite(v).all()):
        raise NonFiniteError("pinv_least_squares: non-finite input")

    gram = theta.T @ theta
    if ridge == 0.0:
        eig = torch.linalg.eigvalsh(gram)
        if eig[0] <= 0 or eig[-1] / eig[0] > MAX_GRAM_CONDITION:
            raise RankDeficientError(
                f"rank-deficient features: Gram condition {float(eig[-1] / eig[0]) if eig[0] > 0 else math.inf:.3g}"
                f" exceeds {MAX_GRAM_CONDITION:.0e} (m={m}, f={f})"
            )
    else:
        gram = gram + ridge * torch.eye(f, dtype=DTYPE)
    chol, info = torch.linalg.cholesky_ex(gram)
    if int(info) != 0:
        raise RankDeficientError(f"rank-deficient features: Cholesky failed at pivot {int(info)}")

    coef = torch.cholesky_solve(theta.T @ v, chol)
    fitted = theta @ coef
    return LeastSquaresResult(
        coefficients=coef,
        fitted=fitted,
        residual_norm=float(torch.linalg.norm(v - fitted)),
        target_norm=float(torch.linalg.norm(v)),
        features=theta,
        targets=v,
        cholesky=chol,
        ridge=float(ridge),
    )


def backward_pinv_least_squares(
    result: LeastSquaresResult, upstream: float | torch.Tensor = 1.0, squared: bool = False
) -> torch.Tensor:
    """Gradient of the residual loss with respect to the features.

    The loss is ||R||_F (or ||R||_F^2 when ``squared``) with R = V - Theta Phi
    and Phi the (ridge) solution. Targets are treated as constants and the
    ridge is held fixed.
    """
    if result.features is None or result.targets is None or result.cholesky is None:
        raise RuntimeError("backward_pinv_least_squares: missing forward record")
    theta, coef, chol = result.features, result.coefficients, result.cholesky
    resid = result.targets - result.fitted
    # d||R||^2/dTheta = -2 R Phi^T - 2 ridge (R W^T - Theta W Phi^T), W = G^-1 Phi
    grad = -2.0 * resid @ coef.T
    if result.ridge != 0.0:
        w = torch.cholesky_solve(coef, chol)
        grad = grad - 2.0 * result.ridge * (resid @ w.T - theta @ w @ coef.T)
    if not squared:
        norm = result.residual_norm
        grad = grad / (2.0 * norm) if norm > 0 else torch.zeros_like(grad)
    return grad * upstream


class _ResidualNorm(torch.autograd.Function):
    @staticmethod
    def forward(ctx, features, targets, ridge, squared):
        result = pinv_least_squares(features, targets, ridge)
        ctx.result = result
        ctx.squared = squared
        value = result.residual_norm**2 if squared else result.residual_norm
        return torch.tensor(value, dtype=features.dtype)

    @staticmethod
    def backward(ctx, upstream):
        grad = backward_pinv_least_squares(ctx.result, upstream, ctx.squared)
        return grad.to(upstream.dtype), None, None, None


def residual_norm(
    features: torch.Tensor, targets: torch.Tensor, ridge: float = 0.0, squared: bool = False
) -> torch.Tensor:
    """Differentiable ||V - Theta Theta^+ V||_F (squared if requested).

    Gradients flow into ``features`` only.
    """
    return _ResidualNorm.apply(features, targets.detach(), float(ridge), bool(squared))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    step: float
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor] | dict[str, torch.Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare autograd gradients of a scalar ``fn`` with central differences.

    The error for each input is max|analytic - numeric| over the probed
    coordinates, divided by the largest magnitude of either gradient. That
    scale is floored at ``floor`` times the largest analytic gradient over
    all inputs, so an input whose gradient vanishes identically (such as the
    attention key bias) is not judged on round-off alone. A constant
    function reports 0. ``max_coords`` limits probing to a random
    subset of coordinates per input.
    """
    if isinstance(inputs, dict):
        names, tensors = list(inputs), list(inputs.values())
    else:
        names, tensors = [f"input{i}" for i in range(len(inputs))], list(inputs)
    leaves = [t.detach().clone().to(DTYPE).requires_grad_(True) for t in tensors]

    out = fn(*leaves)
    if out.requires_grad:
        analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    else:  # constant in every input
        analytic = [None] * len(leaves)
    rng = torch.Generator().manual_seed(seed)
    global_scale = max((float(g.abs().max()) for g in analytic if g is not None and g.numel()),
                       default=0.0)

    errors = {}
    with torch.no_grad():
        probe = [t.detach().clone() for t in leaves]
        for name, leaf, x, g in zip(names, leaves, probe, analytic):
            g = torch.zeros_like(x) if g is None else g.detach()
            n = x.numel()
            coords = torch.arange(n)
            if max_coords is not None and n > max_coords:
                coords = torch.randperm(n, generator=rng)[:max_coords]
            flat = x.view(-1)
            numeric = torch.empty(len(coords), dtype=DTYPE)
            for j, c in enumerate(coords.tolist()):
                orig = float(flat[c])
                flat[c] = orig + step
                hi = float(fn(*probe))
                flat[c] = orig - step
                lo = float(fn(*probe))
                flat[c] = orig
                numeric[j] = (hi - lo) / (2 * step)
            a = g.reshape(-1)[coords]
            if a.numel() == 0:
                errors[name] = 0.0
                continue
            scale = max(float(a.abs().max()), float(numeric.abs().max()), floor * global_scale)
            diff = float((a - numeric).abs().max())
            errors[name] = diff / scale if scale > 0 else diff
    return GradCheckReport(errors=errors, step=step, tolerance=tolerance)
