"""Low-rank adapters on named linear weights.

An adapter on ``W[d_out, d_in]`` adds ``(alpha / r) * B @ A`` to the layer's
effective weight.  ``B`` starts at zero, so attaching is exactly neutral until
the first update.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .model import ModelParams
from .rng import stream


def default_targets(n_dec_layers: int) -> list[str]:
    return [f"decoder.layers.{i}.attn.{p}.weight" for i in range(n_dec_layers) for p in "qv"]


@dataclass
class LoraAdapter:
    target: str
    A: Tensor
    B: Tensor
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data)


def attach(params: ModelParams, targets=None, rank: int = 4, alpha: float = 8.0,
           seed: int = 0) -> ModelParams:
    """Return a parameter set sharing ``params``' base tensors with fresh adapters.

    Base tensors stay untouched, and an adapted weight is never itself
    trainable: its update flows through ``A`` and ``B`` only.
    """
    if targets is None:
        targets = default_targets(params.config.n_dec_layers)
    if rank < 1 or alpha <= 0:
        raise ValueError("LoRA needs rank >= 1 and alpha > 0")
    adapters = dict(params.adapters)
    for target in targets:
        if target not in params.tensors:
            raise KeyError(f"LoRA target {target!r} is not a model parameter")
        W = params.tensors[target]
        if W.ndim != 2:
            raise ValueError(f"LoRA target {target!r} is not a 2-D weight (shape {W.shape})")
        d_out, d_in = W.shape
        if rank > min(d_out, d_in):
            raise ValueError(f"rank {rank} exceeds min{W.shape} for {target!r}")
        if target in adapters:
            raise ValueError(f"{target!r} already has an adapter")
        rng = stream(seed, "lora", target)
        A = Tensor(rng.standard_normal((rank, d_in)) / np.sqrt(d_in), requires_grad=True,
                   name=f"lora.{target}.A")
        B = Tensor(np.zeros((d_out, rank)), requires_grad=True, name=f"lora.{target}.B")
        adapters[target] = LoraAdapter(target, A, B, rank, float(alpha))
    return ModelParams(params.config, dict(params.tensors), dict(params.frozen), adapters)


def merge(params: ModelParams) -> ModelParams:
    """Fold every adapter into its base weight and drop the adapters."""
    tensors = dict(params.tensors)
    for target, adapter in params.adapters.items():
        W = tensors[target]
        tensors[target] = Tensor(W.data + adapter.delta(), requires_grad=True, name=W.name)
    return ModelParams(params.config, tensors, dict(params.frozen), {})


def adapter_param_count(params: ModelParams) -> int:
    return sum(a.A.data.size + a.B.data.size for a in params.adapters.values())
