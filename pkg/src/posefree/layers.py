"""Minimal parameter containers on top of :mod:`posefree.autodiff`."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Collects parameters from attributes, lists and dicts of submodules.

    Parameter names follow attribute paths, e.g. ``blocks.0.attn.qkv.weight``.
    """

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict=True):
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _walk(val, name):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(prefix=f"{name}.")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(val, dict):
        for k, v in val.items():
            yield from _walk(v, f"{name}.{k}")


def param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float64, bias=True, scale=None):
        std = scale if scale is not None else np.sqrt(1.0 / n_in)
        self.weight = param(rng.normal(0.0, std, (n_in, n_out)), dtype)
        self.bias = param(np.zeros(n_out), dtype) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


_ACTS = {"relu": ad.relu, "gelu": ad.gelu}


class MLP(Module):
    """Stack of ``layers`` linear maps with an activation between them."""

    def __init__(self, n_in, width, n_out, layers, rng, dtype=np.float64,
                 act="gelu", out_scale=None):
        if layers < 1:
            raise ValueError("MLP needs at least one layer")
        dims = [n_in] + [width] * (layers - 1) + [n_out]
        self.layers = [Linear(a, b, rng, dtype, scale=np.sqrt(2.0 / a) if act == "relu" else None)
                       for a, b in zip(dims[:-1], dims[1:])]
        if out_scale is not None:
            self.layers[-1].weight.data *= out_scale
        self._act = _ACTS[act]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = self._act(layer(x))
        return self.layers[-1](x)
