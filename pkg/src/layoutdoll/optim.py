"""Named parameter collections, gradient clipping, and the optimizers."""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericFailure
from .tensor import Tensor


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        if self.max_grad_norm <= 0:
            raise ContractViolation("max_grad_norm must be positive")
        for b in self.betas:
            if not 0.0 < b < 1.0:
                raise ContractViolation("betas must lie in (0, 1)")


class ParamSet:
    """Ordered map of parameter-path -> Tensor, plus the shared step counter."""

    def __init__(self):
        self._params = {}
        self.step_count = 0

    def add(self, path, value, rng=None, scale=None):
        if path in self._params:
            raise ContractViolation(f"duplicate parameter path {path!r}")
        if rng is not None:
            value = rng.standard_normal(value) * scale
        t = Tensor(value, requires_grad=True)
        self._params[path] = t
        return t

    def __getitem__(self, path):
        return self._params[path]

    def __contains__(self, path):
        return path in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def paths(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def gradients(self):
        """Gradient map after backward(); unreached parameters get zeros."""
        return {path: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for path, t in self._params.items()}

    def load_arrays(self, arrays):
        for path, t in self._params.items():
            arr = arrays[path]
            if arr.shape != t.data.shape:
                raise ContractViolation(
                    f"shape mismatch for {path!r}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)


def clip_grad_norm(grads, max_grad_norm):
    """Scale the whole gradient map so its global L2 norm is <= max_grad_norm.

    Returns (possibly rescaled grads, pre-clip norm).
    """
    total_sq = 0.0
    for g in grads.values():
        if not np.isfinite(g).all():
            raise NumericFailure("non-finite gradient before clipping")
        total_sq += float((g.astype(np.float64) ** 2).sum())
    total_norm = float(np.sqrt(total_sq))
    if total_norm > max_grad_norm:
        scale = max_grad_norm / total_norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total_norm


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: ParamSet, cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.m = {p: np.zeros_like(t.data) for p, t in params.items()}
        self.v = {p: np.zeros_like(t.data) for p, t in params.items()}

    def step(self, grads):
        cfg = self.cfg
        b1, b2 = cfg.betas
        self.params.step_count += 1
        t = self.params.step_count
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for path, p in self.params.items():
            g = grads[path]
            if g.shape != p.data.shape:
                raise ContractViolation(f"gradient shape mismatch for {path!r}")
            m = self.m[path]
            v = self.v[path]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= cfg.learning_rate * update
            if cfg.weight_decay:
                p.data -= cfg.learning_rate * cfg.weight_decay * p.data
        return self.params

    def state_arrays(self):
        out = {}
        for path in self.params.paths():
            out[f"m/{path}"] = self.m[path]
            out[f"v/{path}"] = self.v[path]
        return out

    def load_state_arrays(self, arrays):
        for path in self.params.paths():
            self.m[path] = arrays[f"m/{path}"].copy()
            self.v[path] = arrays[f"v/{path}"].copy()


class SGD:
    """Plain gradient descent, kept for unit tests of the update rule."""

    def __init__(self, params: ParamSet, learning_rate):
        self.params = params
        self.learning_rate = learning_rate

    def step(self, grads):
        self.params.step_count += 1
        for path, p in self.params.items():
            p.data -= self.learning_rate * grads[path]
        return self.params


def optimizer_step(params, grads, cfg, state=None):
    """One AdamW step as a standalone call; returns (params, optimizer)."""
    opt = state if state is not None else AdamW(params, cfg)
    opt.step(grads)
    return params, opt
