"""Low-rank adapter algebra: creation, application, scaling, merging.

An adapter stores per-layer factor pairs (A: r x k, B: d x r) for a set of
target linear layers of a host model.  The effective weight of a target
layer under the adapter is

    W' = W + beta * B @ A

B starts at zero and A at small random values, so a fresh adapter is an
exact no-op.  Application never mutates the host: modified weights are
swapped in functionally per call.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
from torch.func import functional_call


@dataclass
class LoraLayer:
    """Factors for one target layer; delta is exactly beta * B @ A."""

    A: torch.Tensor  # (r, k)
    B: torch.Tensor  # (d, r)


@dataclass
class LoraAdapter:
    layers: dict[str, LoraLayer]
    rank: int
    beta: float = 1.0
    host_checksum: str | None = None
    erased_concept: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def target_layer_names(self) -> list[str]:
        return list(self.layers)

    def delta(self, name: str, beta: float | None = None) -> torch.Tensor:
        """Dense weight delta for one layer."""
        b = self.beta if beta is None else beta
        layer = self.layers[name]
        return b * (layer.B @ layer.A)

    def trainable_parameters(self) -> list[torch.Tensor]:
        return [t for layer in self.layers.values() for t in (layer.A, layer.B)]

    def detached_copy(self) -> "LoraAdapter":
        """Snapshot with detached tensors (for checkpointing)."""
        return LoraAdapter(
            layers={
                name: LoraLayer(A=l.A.detach().clone(), B=l.B.detach().clone())
                for name, l in self.layers.items()
            },
            rank=self.rank,
            beta=self.beta,
            host_checksum=self.host_checksum,
            erased_concept=self.erased_concept,
            meta=copy.deepcopy(self.meta),
        )


def _target_weight(model: torch.nn.Module, name: str) -> torch.Tensor:
    try:
        return model.get_parameter(name + ".weight")
    except AttributeError as exc:
        raise ValueError(f"host model has no linear layer named {name!r}") from exc


def init_adapter(
    model: torch.nn.Module,
    rank: int = 4,
    beta: float = 1.0,
    seed: int = 0,
    target_names: list[str] | None = None,
    init_scale: float = 0.25,
) -> LoraAdapter:
    """Fresh adapter over the model's target layers: B zeros, A small random.

    Enforces rank <= min(d, k) / 2 for every target layer so the factors stay
    genuinely low-rank.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if target_names is None:
        target_names = model.lora_target_names()
    gen = torch.Generator().manual_seed(seed)
    layers: dict[str, LoraLayer] = {}
    for name in target_names:
        W = _target_weight(model, name)
        if W.ndim != 2:
            raise ValueError(f"target {name!r} is not a linear weight matrix")
        d, k = W.shape
        if rank > min(d, k) // 2:
            raise ValueError(
                f"rank {rank} too large for layer {name!r} with shape ({d}, {k}); "
                f"need rank <= min(d, k) / 2 = {min(d, k) // 2}"
            )
        A = init_scale * torch.randn(rank, k, generator=gen, dtype=W.dtype)
        B = torch.zeros(d, rank, dtype=W.dtype)
        layers[name] = LoraLayer(A=A, B=B)
    return LoraAdapter(layers=layers, rank=rank, beta=beta)


def weight_overrides(
    model: torch.nn.Module, adapter: LoraAdapter, beta: float | None = None
) -> dict[str, torch.Tensor]:
    """Per-parameter override dict {name.weight: W + beta*B@A} for functional calls."""
    overrides = {}
    for name in adapter.layers:
        W = _target_weight(model, name).detach()
        overrides[name + ".weight"] = W + adapter.delta(name, beta)
    return overrides


def functional_forward(
    model: torch.nn.Module, adapter: LoraAdapter, args: tuple, beta: float | None = None
) -> torch.Tensor:
    """Run the host forward pass with adapted weights swapped in.

    Gradients flow to the adapter factors; the host is read-only.
    """
    return functional_call(model, weight_overrides(model, adapter, beta), args)


def adapted_forward(model, adapter: LoraAdapter, z, t, c, beta: float | None = None) -> torch.Tensor:
    """Host forward with each target W replaced by W + beta*B@A.

    Accepts either a Latent/Condition pair or raw batched tensors.
    """
    from .diffusion import Condition, Latent  # local import to avoid a cycle

    if isinstance(z, Latent):
        emb = c.embedding if isinstance(c, Condition) else c
        x = z.data.unsqueeze(0)
        tb = torch.full((1,), t, dtype=torch.long) if isinstance(t, int) else t
        out = functional_forward(model, adapter, (x, tb, emb.to(x.dtype).unsqueeze(0)), beta)
        return out.squeeze(0)
    return functional_forward(model, adapter, (z, t, c), beta)


class AdaptedDenoiser:
    """A (host, adapter) pair exposing the plain denoiser interface.

    ``beta_override`` rescales the adapter at inference time without touching
    it (beta_override=0 disconnects the adapter entirely).
    """

    def __init__(self, model, adapter: LoraAdapter, beta_override: float | None = None):
        self.model = model
        self.adapter = adapter
        self.beta_override = beta_override
        self.latent_shape = model.latent_shape
        self.cond_dim = model.cond_dim
        self.n_concepts = model.n_concepts

    def __call__(self, x: torch.Tensor, t: torch.Tensor, cond_emb: torch.Tensor) -> torch.Tensor:
        return functional_forward(self.model, self.adapter, (x, t, cond_emb), self.beta_override)

    def condition(self, concept_id: int | None):
        return self.model.condition(concept_id)


def merge_adapters(a1: LoraAdapter, a2: LoraAdapter, a: float) -> LoraAdapter:
    """Blend two adapters: per-layer delta a*dW1 + (1-a)*dW2.

    Endpoints return an exact copy of the corresponding adapter; interior
    weights produce a stacked rank-(r1+r2) adapter with the blend folded
    into the B factors (merged beta = 1).
    """
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"merge weight must lie in [0, 1], got {a}")
    if set(a1.layers) != set(a2.layers):
        raise ValueError(
            f"adapters target different layer sets: {sorted(a1.layers)} vs {sorted(a2.layers)}"
        )
    if a == 1.0:
        return a1.detached_copy()
    if a == 0.0:
        return a2.detached_copy()
    layers = {}
    for name in a1.layers:
        l1, l2 = a1.layers[name], a2.layers[name]
        if l1.A.shape[1] != l2.A.shape[1] or l1.B.shape[0] != l2.B.shape[0]:
            raise ValueError(f"layer {name!r} has mismatched host dimensions")
        A = torch.cat([l1.A, l2.A], dim=0).detach().clone()
        B = torch.cat([a * a1.beta * l1.B, (1.0 - a) * a2.beta * l2.B], dim=1).detach().clone()
        layers[name] = LoraLayer(A=A, B=B)
    return LoraAdapter(
        layers=layers,
        rank=a1.rank + a2.rank,
        beta=1.0,
        meta={"merged": True, "a": a},
    )


def merge_many(adapters: list[LoraAdapter], weights: list[float]) -> LoraAdapter:
    """n-ary extension of the two-adapter merge with normalized weights."""
    if len(adapters) != len(weights) or not adapters:
        raise ValueError("need one weight per adapter")
    total = sum(weights)
    if total <= 0:
        raise ValueError("weights must sum to a positive value")
    norm = [w / total for w in weights]
    names = set(adapters[0].layers)
    if any(set(ad.layers) != names for ad in adapters):
        raise ValueError("adapters target different layer sets")
    layers = {}
    for name in names:
        A = torch.cat([ad.layers[name].A for ad in adapters], dim=0).detach().clone()
        B = torch.cat(
            [w * ad.beta * ad.layers[name].B for w, ad in zip(norm, adapters)], dim=1
        ).detach().clone()
        layers[name] = LoraLayer(A=A, B=B)
    return LoraAdapter(
        layers=layers,
        rank=sum(ad.rank for ad in adapters),
        beta=1.0,
        meta={"merged": True, "weights": norm},
    )
