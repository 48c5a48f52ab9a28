"""Dense-array primitives and reverse-mode gradients.

Thin layer over torch: a global float mode, shape-checked primitives used by
the backbone, a scalar ``backward`` that returns one gradient per parameter,
and a central finite-difference checker used as a test oracle.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

_MODES = {"float32": torch.float32, "float64": torch.float64}
_mode = "float32"


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, left, right):
        self.primitive = primitive
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{primitive}: incompatible shapes {self.left} and {self.right}")


def set_float_mode(mode: str) -> None:
    global _mode
    if mode not in _MODES:
        raise ValueError(f"unknown float mode {mode!r}; expected one of {sorted(_MODES)}")
    _mode = mode
    torch.set_default_dtype(_MODES[mode])


def get_float_mode() -> str:
    return _mode


def dtype() -> torch.dtype:
    return _MODES[_mode]


@contextlib.contextmanager
def float_mode(mode: str) -> Iterator[None]:
    """Temporarily switch the global float mode."""
    prev = _mode
    set_float_mode(mode)
    try:
        yield
    finally:
        set_float_mode(prev)


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(np.asarray(data), dtype=dtype(), requires_grad=requires_grad)


# -- primitives ---------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != (b.shape[-2] if b.dim() > 1 else b.shape[0]):
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("add", a.shape, b.shape) from None
    return a + b


def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """x @ w + b with w stored as [in, out]."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    y = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError("linear.bias", w.shape, b.shape)
        y = y + b
    return y


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # torch subtracts the row max internally
    return torch.log_softmax(x, dim=dim)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def log_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return F.logsigmoid(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if weight.shape != (x.shape[-1],) or bias.shape != weight.shape:
        raise ShapeError("layer_norm", x.shape, weight.shape)
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise ShapeError("embedding", ids.shape, table.shape)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError("embedding", ids.shape, table.shape)
    return table[ids]


def concat(parts: Sequence[torch.Tensor], dim: int) -> torch.Tensor:
    ref = parts[0].shape
    for p in parts[1:]:
        if p.dim() != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, p.shape)) if i != dim % len(ref)):
            raise ShapeError("concat", ref, p.shape)
    return torch.cat(list(parts), dim=dim)


# -- gradients ----------------------------------------------------------------

def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradient of a scalar ``loss`` w.r.t. each named parameter.

    Parameters the loss does not reach get a zero gradient of matching shape.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names], allow_unused=True)
    return {
        n: (torch.zeros_like(params[n]) if g is None else g)
        for n, g in zip(names, grads)
    }


def finite_difference_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Iterable[torch.Tensor],
    h: float = 1e-4,
    n_samples: int = 20,
    seed: int = 0,
) -> tuple[float, int]:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` is a closure recomputing a scalar from the current parameter values.
    Up to ``n_samples`` coordinates per parameter are probed. Returns
    ``(max relative error, nan count)`` with relative error
    ``|analytic - fd| / (|analytic| + 1e-8)``.
    """
    if isinstance(params, Mapping):
        plist = list(params.values())
    else:
        plist = list(params)
    loss = f()
    grads = torch.autograd.grad(loss, plist, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    nans = 0
    with torch.no_grad():
        for p, g in zip(plist, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= n_samples else rng.choice(n, size=n_samples, replace=False)
            for i in sorted(int(j) for j in idx):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(f())
                flat[i] = orig - h
                down = float(f())
                flat[i] = orig
                fd = (up - down) / (2 * h)
                a = float(gflat[i])
                if math.isnan(fd) or math.isnan(a):
                    nans += 1
                    continue
                worst = max(worst, abs(a - fd) / (abs(a) + 1e-8))
    return worst, nans
