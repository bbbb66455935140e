"""Tensor core: checked differentiable ops, reverse-mode helpers and optimizers.

Tensors are ``torch.Tensor`` values. The ops below wrap the handful of
primitives the networks need and add the error contract used across the
package (shape mismatches raise :class:`ShapeError`, non-finite results
raise :class:`NonFiniteError`). Adam and SGD are implemented here rather
than taken from ``torch.optim`` so that their state is a plain, cloneable
record.
"""
from __future__ import annotations

import contextlib
import copy
import functools
import math
import os
import random
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

NORM_EPS = 1e-5
MAX_STEPS = 2**53


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


# ---------------------------------------------------------------- determinism


def set_deterministic(seed: int | None = None, enabled: bool = True) -> None:
    """Force single-threaded, deterministic kernels and optionally seed every rng."""
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    if seed is not None:
        random.seed(seed)
        np.random.seed(seed % 2**32)
        torch.manual_seed(seed)


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Switch the default dtype to float64 (gradient-check suites)."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


# ------------------------------------------------------------------- checking


_OP_CHECKS = True


@contextlib.contextmanager
def op_checks(enabled: bool) -> Iterator[None]:
    """Toggle the per-op finiteness check. Training loops switch it off because a
    non-finite intermediate always reaches the loss, which is checked regardless."""
    global _OP_CHECKS
    prev, _OP_CHECKS = _OP_CHECKS, enabled
    try:
        yield
    finally:
        _OP_CHECKS = prev


def unchecked(fn: Callable) -> Callable:
    """Run ``fn`` with per-op checks off (its losses still go through :func:`check_finite`)."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with op_checks(False):
            return fn(*args, **kwargs)

    return wrapper


def check_finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if not bool(torch.isfinite(t.detach()).all()):
        raise NonFiniteError(f"{op}: non-finite output")
    return t


def _op_out(t: torch.Tensor, op: str) -> torch.Tensor:
    return check_finite(t, op) if _OP_CHECKS else t


def _require_ndim(x: torch.Tensor, ndim: int, op: str) -> None:
    if x.dim() != ndim:
        raise ShapeError(f"{op}: expected {ndim}-d input, got shape {tuple(x.shape)}")


# ------------------------------------------------------------------------ ops


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[0 if b.dim() == 1 else -2]:
        raise ShapeError(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return _op_out(a @ b, "matmul")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    return _op_out(F.linear(x, weight, bias), "linear")


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    _require_ndim(x, 4, "conv2d")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: {x.shape[1]} input channels, kernel expects {weight.shape[1]}")
    if x.shape[2] + 2 * padding < weight.shape[2] or x.shape[3] + 2 * padding < weight.shape[3]:
        raise ShapeError("conv2d: kernel larger than padded input")
    return _op_out(F.conv2d(x, weight, bias, stride=stride, padding=padding), "conv2d")


def conv_transpose2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    _require_ndim(x, 4, "conv_transpose2d")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: {x.shape[1]} input channels, kernel expects {weight.shape[0]}")
    out = F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)
    return _op_out(out, "conv_transpose2d")


def instance_norm(
    x: torch.Tensor,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = NORM_EPS,
) -> torch.Tensor:
    """Normalize every (sample, channel) map to zero mean / unit variance."""
    _require_ndim(x, 4, "instance_norm")
    return _op_out(F.instance_norm(x, weight=weight, bias=bias, eps=eps), "instance_norm")


def batch_norm_lite(
    x: torch.Tensor,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = NORM_EPS,
) -> torch.Tensor:
    """Batch norm using current-batch statistics only (no running averages)."""
    if x.dim() not in (2, 4):
        raise ShapeError(f"batch_norm_lite: expected 2-d or 4-d input, got {tuple(x.shape)}")
    y = F.batch_norm(x, None, None, weight, bias, training=True, eps=eps)
    return _op_out(y, "batch_norm_lite")


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def leaky_relu(x: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    return F.leaky_relu(x, slope)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def avgpool2x2(x: torch.Tensor) -> torch.Tensor:
    _require_ndim(x, 4, "avgpool2x2")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avgpool2x2: odd spatial size {tuple(x.shape[2:])}")
    return F.avg_pool2d(x, 2, 2)


def upsample_nearest2x(x: torch.Tensor) -> torch.Tensor:
    _require_ndim(x, 4, "upsample_nearest2x")
    return F.interpolate(x, scale_factor=2, mode="nearest")


def grid_sample(images: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling with zeros outside the image; differentiable in both arguments.

    ``grid`` holds normalized (x, y) coordinates in [-1, 1] with pixel
    centres convention (``align_corners=False``).
    """
    _require_ndim(images, 4, "grid_sample")
    if grid.dim() != 4 or grid.shape[-1] != 2 or grid.shape[0] != images.shape[0]:
        raise ShapeError(f"grid_sample: bad grid shape {tuple(grid.shape)} for images {tuple(images.shape)}")
    out = F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return _op_out(out, "grid_sample")


def softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _require_ndim(logits, 2, "softmax_cross_entropy")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: labels {tuple(labels.shape)} vs logits {tuple(logits.shape)}")
    return check_finite(F.cross_entropy(logits, labels), "softmax_cross_entropy")


def squared_l2(a: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """Sum of squared entries of ``a`` (or of ``a - b``)."""
    if b is not None:
        if a.shape != b.shape:
            raise ShapeError(f"squared_l2: {tuple(a.shape)} vs {tuple(b.shape)}")
        a = a - b
    return check_finite((a * a).sum(), "squared_l2")


def concat(tensors: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != dim % len(ref)):
            raise ShapeError(f"concat: {tuple(ref)} vs {tuple(t.shape)} along dim {dim}")
    return torch.cat(list(tensors), dim=dim)


def embed_lookup(table: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= table.shape[0]):
        raise ShapeError(f"embed_lookup: index out of range [0, {table.shape[0]})")
    return table[idx]


# ------------------------------------------------------------------- backward


def backward(loss: torch.Tensor, retain_graph: bool = False) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every grad-flagged leaf."""
    if loss.numel() != 1 or loss.dim() != 0:
        raise GraphError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise GraphError("backward: loss was not produced by a recorded graph")
    try:
        loss.backward(retain_graph=retain_graph)
    except RuntimeError as exc:
        if "second time" in str(exc) or "freed" in str(exc):
            raise GraphError("backward: graph already freed") from exc
        raise


def numeric_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, h: float = 1e-3) -> torch.Tensor:
    """Central finite differences of scalar ``fn()`` w.r.t. the entries of ``x`` (mutated in place).

    ``fn`` runs with grad recording on, so losses that differentiate internally work too.
    """
    out = torch.zeros_like(x)
    flat = x.data.view(-1)
    g = out.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(fn().detach())
        flat[i] = orig - h
        fm = float(fn().detach())
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max |a - n| normalized by max |n| (floored to avoid division by zero)."""
    scale = max(float(numeric.abs().max()), 1e-12)
    return float((analytic - numeric).abs().max()) / scale


# ----------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    kind: str
    lr: float
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.0
    weight_decay: float = 0.0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)
    buf: list[torch.Tensor] = field(default_factory=list)

    def clone(self) -> OptimizerState:
        return copy.deepcopy(self)


def adam(lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(kind="adam", lr=lr, betas=betas, eps=eps)


def sgd(lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState(kind="sgd", lr=lr, momentum=momentum, weight_decay=weight_decay)


def _check_pairs(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None]) -> None:
    if len(params) != len(grads):
        raise ShapeError(f"optimizer: {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise ShapeError(f"optimizer: grad {tuple(g.shape)} vs param {tuple(p.shape)}")


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: OptimizerState,
) -> None:
    """Bias-corrected Adam update applied in place; ``None`` grads count as zero."""
    if state.kind != "adam":
        raise ValueError(f"adam_step on a {state.kind!r} state")
    _check_pairs(params, grads)
    if state.step + 1 >= MAX_STEPS:
        raise OverflowError("adam_step: step counter overflow")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    elif len(state.m) != len(params):
        raise ShapeError("adam_step: parameter list changed between steps")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)


def sgd_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: OptimizerState,
) -> None:
    """theta <- theta - lr * g, with heavy-ball momentum when ``state.momentum > 0``."""
    if state.kind != "sgd":
        raise ValueError(f"sgd_step on a {state.kind!r} state")
    _check_pairs(params, grads)
    if not state.buf:
        state.buf = [torch.zeros(0) for _ in params]
    state.step += 1
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if state.weight_decay:
                g = g + state.weight_decay * p
            if state.momentum:
                if state.buf[i].numel() == 0:
                    state.buf[i] = g.detach().clone()
                else:
                    state.buf[i].mul_(state.momentum).add_(g)
                g = state.buf[i]
            p.add_(g, alpha=-state.lr)


def step(params: Sequence[torch.Tensor], state: OptimizerState) -> None:
    """Apply one update using the ``.grad`` fields of ``params``, then clear them."""
    grads = [p.grad for p in params]
    if state.kind == "adam":
        adam_step(params, grads, state)
    else:
        sgd_step(params, grads, state)
    for p in params:
        p.grad = None
