"""Layer base class and the finite-difference gradient checker.

Every differentiable piece of the network is a :class:`Layer` with a manual
``backward``. Composite layers own named children and chain their passes by
hand; there is no tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import NumericError, StateError


class Layer:
    """Parameters, gradients, buffers, mode and the per-forward cache."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Layer] = {}
        self.training = True
        self._cache = None

    # -- construction helpers
    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_child(self, name: str, layer: "Layer") -> "Layer":
        self.children[name] = layer
        return layer

    # -- passes
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _saved(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    # -- traversal
    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Layer"]]:
        yield prefix, self
        for name, child in self.children.items():
            yield from child.modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for path, mod in self.modules():
            for name, p in mod.params.items():
                yield (f"{path}.{name}" if path else name), p, mod.grads[name]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.modules():
            for name, b in mod.buffers.items():
                yield (f"{path}.{name}" if path else name), b

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by dotted name, in traversal order."""
        out = {name: p for name, p, _ in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def num_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    def zero_grad(self):
        for _, _, g in self.named_parameters():
            g.fill(0.0)

    def train(self, mode: bool = True) -> "Layer":
        for _, mod in self.modules():
            mod.training = mode
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def kink_signature(self) -> bytes | None:
        """Bytes identifying the active linear piece of a piecewise layer, else None."""
        return None

    def reseed(self, seed: int) -> "Layer":
        """Re-initialise every stochastic sublayer's RNG from ``seed``."""
        for i, (_, mod) in enumerate(self.modules()):
            if hasattr(mod, "rng"):
                mod.rng = np.random.default_rng([int(seed), i])
        return self


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int
    per_tensor: dict[str, float] = field(default_factory=dict)
    n_refined: int = 0
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<28s} max_rel_err={self.max_rel_error:.3e} "
                f"checked={self.n_checked:<6d} refined={self.n_refined:<4d} "
                f"tol={self.tolerance:.0e} {status}")


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def _coords(size, limit, rng):
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def _signature(layer: Layer) -> tuple:
    return tuple(sig for _, mod in layer.modules() if (sig := mod.kink_signature()) is not None)


def grad_check(layer: Layer, x: np.ndarray, h: float = 1e-3, *, seed: int = 0,
               weighted: bool = True, max_coords: int | None = None,
               check_input: bool = True, tolerance: float = 1e-4,
               name: str | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The scalar loss is ``sum(w * layer(x))``. With ``weighted`` the weights
    ``w`` are drawn from N(0, 1) under ``seed``; otherwise ``w = 1``. A plain
    sum is degenerate for layers whose outputs sum to a constant (softmax,
    layer norm), hence the default.

    Central differences are only exact to O(h^2) where the function is
    smooth over ``[theta - h, theta + h]``. When a ReLU mask or max-pool
    winner changes inside that stencil, the coordinate is re-probed with a
    step shrunk by 1e3 (counted in ``n_refined``); if the pattern still
    changes it is counted in ``n_skipped`` and excluded.

    ``max_coords`` caps how many scalars are probed per tensor (sampled
    without replacement); ``None`` probes all of them. Dropout masks are
    frozen by reseeding before every forward, and normalisation buffers are
    restored afterwards.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    saved_buffers = {k: v.copy() for k, v in layer.named_buffers()}
    label = name or type(layer).__name__

    def run(inp):
        layer.reseed(seed)
        return layer.forward(inp)

    y = run(x)
    w = rng.standard_normal(y.shape) if weighted else np.ones_like(y)

    def loss(inp):
        val = float(np.sum(w * run(inp)))
        if not np.isfinite(val):
            raise NumericError(f"grad_check: non-finite loss for {label}")
        return val, _signature(layer)

    _, base_sig = loss(x)
    layer.zero_grad()
    dx = layer.backward(w)

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        lp, sp = loss(x)
        flat[i] = orig - step
        lm, sm = loss(x)
        flat[i] = orig
        return (lp - lm) / (2.0 * step), sp == base_sig and sm == base_sig

    per_tensor: dict[str, float] = {}
    n_checked = n_refined = n_skipped = 0
    targets = [(pname, p, g) for pname, p, g in layer.named_parameters()]
    if check_input:
        targets.append(("<input>", x, dx))
    for pname, arr, grad in targets:
        flat, gflat = arr.reshape(-1), np.asarray(grad).reshape(-1)
        worst = 0.0
        for i in _coords(flat.size, max_coords, rng):
            numeric, smooth = central(flat, i, h)
            if not smooth:
                n_refined += 1
                numeric, smooth = central(flat, i, h * 1e-3)
                if not smooth:
                    n_skipped += 1
                    continue
            worst = max(worst, float(relative_error(gflat[i], numeric)))
            n_checked += 1
        per_tensor[pname] = worst

    for k, v in layer.named_buffers():
        v[...] = saved_buffers[k]
    return GradCheckReport(label, max(per_tensor.values(), default=0.0), tolerance,
                           n_checked, per_tensor, n_refined, n_skipped)
