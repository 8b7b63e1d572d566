"""Concept recovery pipeline: invert references, expand by slerp, relearn an adapter.

Stages:

1. DDIM-invert each reference image under the unlearned model, recording the
   latent trajectory up to a target depth.
2. Expand the handful of inverted latents into a larger set via spherical
   interpolation over seed pairs:

       slerp(z1, z2; p) = sin((1-p)*O)/sin(O) * z1 + sin(p*O)/sin(O) * z2
       O = arccos(<z1, z2> / (|z1| |z2|))

3. Denoise every expanded latent from the restart step under the unlearned
   model to build the relearning set.
4. Fine-tune only a low-rank adapter on that set (host weights frozen,
   checksum-verified).

Also provides auto-guided sampling that blends the unlearned and adapted
models' CFG predictions per step:

    eps = eps_cfg_unlearn + w * (eps_cfg_adapted - eps_cfg_unlearn)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .checkpoints import state_checksum
from .diffusion import (
    Condition,
    Latent,
    NoiseSchedule,
    cfg_eps_batch,
    ddim_inverse_step_data,
    ddim_step_data,
    inference_timesteps,
    sample_batch,
)
from .lora import AdaptedDenoiser, LoraAdapter, functional_forward, init_adapter


class HostMutated(RuntimeError):
    """The frozen host model changed during adapter training."""


# ---------------------------------------------------------------------------
# spherical interpolation
# ---------------------------------------------------------------------------

_ANTIPARALLEL_MARGIN = 1e-6
_PARALLEL_MARGIN = 1e-9


def slerp_data(x1: torch.Tensor, x2: torch.Tensor, p: float) -> torch.Tensor:
    """Spherical interpolation between two same-shape tensors.

    The angle is computed in float64 on the flattened vectors; the weights
    multiply the inputs in their own dtype.  Endpoints are exact.  Parallel
    inputs fall back to linear interpolation (the great circle degenerates);
    antiparallel or zero-norm inputs are rejected.
    """
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    f1 = x1.reshape(-1).to(torch.float64)
    f2 = x2.reshape(-1).to(torch.float64)
    n1 = float(torch.linalg.vector_norm(f1))
    n2 = float(torch.linalg.vector_norm(f2))
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("slerp is undefined for zero-norm inputs")
    cos_omega = max(-1.0, min(1.0, float(torch.dot(f1, f2)) / (n1 * n2)))
    omega = math.acos(cos_omega)
    if omega >= math.pi - _ANTIPARALLEL_MARGIN:
        raise ValueError("antiparallel inputs: the interpolation great circle is undefined")
    if omega <= _PARALLEL_MARGIN:
        return (1.0 - p) * x1 + p * x2
    sin_omega = math.sin(omega)
    w1 = math.sin((1.0 - p) * omega) / sin_omega
    w2 = math.sin(p * omega) / sin_omega
    return w1 * x1 + w2 * x2


def slerp(z1: Latent, z2: Latent, p: float) -> Latent:
    """Latent-level slerp; both inputs must sit at the same noise level."""
    if z1.t != z2.t:
        raise ValueError(f"latents sit at different noise levels: {z1.t} vs {z2.t}")
    return Latent(data=slerp_data(z1.data, z2.data, p), t=z1.t)


# ---------------------------------------------------------------------------
# inversion
# ---------------------------------------------------------------------------

@dataclass
class LatentTrajectory:
    """DDIM-inversion record from a clean image up to the target depth."""

    source_image: Latent
    condition: Condition
    latents: list[tuple[int, Latent]]  # (train timestep, latent), ascending noise
    inversion_scale: float
    round_trip_rms: float | None = None

    @property
    def final(self) -> Latent:
        return self.latents[-1][1]


def invert_image(
    model,
    image: Latent,
    c: Condition,
    sched: NoiseSchedule,
    target_depth: int,
    *,
    n_infer_steps: int = 50,
    inversion_scale: float = 1.0,
    compute_round_trip: bool = True,
) -> LatentTrajectory:
    """Deterministic DDIM inversion of a clean image.

    ``target_depth`` counts inverse steps taken up the inference subsequence;
    depth d leaves the latent at the level where ``denoise_from`` with
    ``t_start = n_infer_steps - d`` picks it up.  The round-trip RMS (replay
    the suffix and compare with the source) is recorded when requested.
    """
    if image.t is not None:
        raise ValueError("invert_image expects a clean image (t=None)")
    ts = inference_timesteps(sched, n_infer_steps)
    if not 0 <= target_depth <= n_infer_steps:
        raise ValueError(f"target_depth {target_depth} outside [0, {n_infer_steps}]")

    levels = [0] + [ts[n_infer_steps - d] for d in range(1, target_depth + 1)]
    emb = c.embedding.to(image.data.dtype).unsqueeze(0)
    null_emb = model.condition(None).embedding.to(image.data.dtype)
    x = image.data.unsqueeze(0)
    entries: list[tuple[int, Latent]] = [(0, Latent(data=image.data.clone(), t=0))]
    with torch.no_grad():
        for lo, hi in zip(levels, levels[1:]):
            eps = cfg_eps_batch(model, x, lo, emb, inversion_scale, null_emb)
            x = ddim_inverse_step_data(x, eps, lo, hi, sched)
            if not torch.isfinite(x).all():
                raise RuntimeError(
                    f"inversion diverged at step {lo}->{hi} (non-finite latents); "
                    "check the model or lower the inversion guidance scale"
                )
            entries.append((hi, Latent(data=x.squeeze(0).clone(), t=hi)))

        rms = None
        if compute_round_trip:
            if target_depth == 0:
                rms = 0.0
            else:
                recon = sample_batch(
                    model, x, emb, sched, inversion_scale, n_infer_steps,
                    start_index=n_infer_steps - target_depth,
                )
                rms = float(torch.sqrt(((recon.squeeze(0) - image.data) ** 2).mean()))
    return LatentTrajectory(
        source_image=image,
        condition=c,
        latents=entries,
        inversion_scale=inversion_scale,
        round_trip_rms=rms,
    )


# ---------------------------------------------------------------------------
# expansion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExpansionScheme:
    """Pair-major enumeration: for each unordered seed pair (lexicographic),
    interpolate at each p in order, stopping once the target count is met."""

    p_values: tuple[float, ...] = (0.25, 0.5, 0.75)
    target_total: int = 33


@dataclass
class ExpansionSet:
    seeds: list[Latent]
    interpolants: list[tuple[int, float, Latent]]  # (pair index, p, latent)
    total_count: int

    def all_latents(self) -> list[Latent]:
        return list(self.seeds) + [lat for _, _, lat in self.interpolants]


def seed_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def expand_latents(seeds: list[Latent], scheme: ExpansionScheme = ExpansionScheme()) -> ExpansionSet:
    """Grow the seed latents into ``target_total`` samples by slerp.

    The default scheme turns 6 seeds into 33 samples: the 6 seeds plus the
    first 27 interpolants of the pair-major enumeration.
    """
    if len(seeds) < 2:
        raise ValueError("need at least 2 seed latents to interpolate")
    for p in scheme.p_values:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"interpolation parameter p={p} outside [0, 1]")
    n_interp = scheme.target_total - len(seeds)
    if n_interp < 0:
        raise ValueError(
            f"target_total {scheme.target_total} smaller than the seed count {len(seeds)}"
        )
    pairs = seed_pairs(len(seeds))
    if n_interp > len(pairs) * len(scheme.p_values):
        raise ValueError(
            f"cannot build {n_interp} interpolants from {len(pairs)} pairs "
            f"x {len(scheme.p_values)} p-values"
        )
    interpolants: list[tuple[int, float, Latent]] = []
    for pair_index, (i, j) in enumerate(pairs):
        for p in scheme.p_values:
            if len(interpolants) == n_interp:
                break
            interpolants.append((pair_index, p, slerp(seeds[i], seeds[j], p)))
        if len(interpolants) == n_interp:
            break
    return ExpansionSet(
        seeds=list(seeds),
        interpolants=interpolants,
        total_count=len(seeds) + len(interpolants),
    )


# ---------------------------------------------------------------------------
# relearning set construction
# ---------------------------------------------------------------------------

def build_training_set(
    expansion: ExpansionSet,
    model,
    c: Condition,
    restart_step: int,
    *,
    sched: NoiseSchedule,
    n_infer_steps: int = 50,
    guidance_scale: float = 1.0,
) -> list[tuple[Latent, Condition]]:
    """Denoise every expansion latent from the restart step; pair with the concept.

    ``restart_step`` indexes the descending inference subsequence (35 of 50 by
    default upstream), matching an inversion depth of n_infer_steps - restart_step.
    """
    ts = inference_timesteps(sched, n_infer_steps)
    if not 0 <= restart_step < len(ts):
        raise ValueError(f"restart_step {restart_step} outside [0, {len(ts)})")
    level = ts[restart_step]
    latents = expansion.all_latents()
    for lat in latents:
        if lat.t != level:
            raise ValueError(
                f"expansion latent at level {lat.t} does not match restart level {level}; "
                "invert with target_depth = n_infer_steps - restart_step"
            )
    x = torch.stack([lat.data for lat in latents])
    emb = c.embedding.to(x.dtype).expand(x.shape[0], -1)
    with torch.no_grad():
        clean = sample_batch(model, x, emb, sched, guidance_scale, n_infer_steps,
                             start_index=restart_step)
    return [(Latent(data=clean[i], t=None), c) for i in range(clean.shape[0])]


# ---------------------------------------------------------------------------
# adapter relearning
# ---------------------------------------------------------------------------

@dataclass
class RelearnConfig:
    rank: int = 4
    beta: float = 1.0
    steps: int = 500
    batch_size: int = 1
    lr: float = 1e-3
    checkpoint_every: int = 50
    seed: int = 0


@dataclass
class RelearnRun:
    adapter_checkpoints: dict[int, LoraAdapter]
    final_adapter: LoraAdapter
    train_log: list[tuple[int, float]]
    config: RelearnConfig
    host_checksum: str

    def checkpoint_steps(self) -> list[int]:
        return sorted(self.adapter_checkpoints)


def relearn(
    unlearned,
    train_set: list[tuple[Latent, Condition]],
    config: RelearnConfig,
    sched: NoiseSchedule,
) -> RelearnRun:
    """Optimize only the adapter factors on the noise-prediction loss.

    The host model is frozen; its parameter checksum is verified before and
    after.  Checkpoints include the step-0 (zero-delta) adapter, every
    ``checkpoint_every`` steps, and the final step.
    """
    if not train_set:
        raise ValueError("relearning set is empty")
    host_sum = state_checksum(unlearned)
    host_grad_flags = {n: p.requires_grad for n, p in unlearned.named_parameters()}
    unlearned.requires_grad_(False)
    adapter = init_adapter(unlearned, rank=config.rank, beta=config.beta, seed=config.seed)
    for tensor in adapter.trainable_parameters():
        tensor.requires_grad_(True)
    adapter.host_checksum = host_sum

    images = torch.stack([lat.data for lat, _ in train_set])
    embs = torch.stack([c.embedding.to(images.dtype) for _, c in train_set])
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.SGD(adapter.trainable_parameters(), lr=config.lr)
    sqrt_ab = torch.sqrt(torch.as_tensor(sched.alpha_bars, dtype=images.dtype))
    sqrt_1m = torch.sqrt(1.0 - torch.as_tensor(sched.alpha_bars, dtype=images.dtype))

    checkpoints: dict[int, LoraAdapter] = {0: adapter.detached_copy()}
    log: list[tuple[int, float]] = []
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, images.shape[0], (config.batch_size,), generator=gen)
        x0 = images[idx]
        t = torch.randint(0, sched.n_train_steps, (config.batch_size,), generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        x_t = sqrt_ab[t].view(-1, 1, 1, 1) * x0 + sqrt_1m[t].view(-1, 1, 1, 1) * noise
        pred = functional_forward(unlearned, adapter, (x_t, t, embs[idx]))
        loss = ((pred - noise) ** 2).sum(dim=(1, 2, 3)).mean()
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite relearning loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append((step, loss.item()))
        if step % config.checkpoint_every == 0 or step == config.steps:
            checkpoints[step] = adapter.detached_copy()

    for n, p in unlearned.named_parameters():
        p.requires_grad_(host_grad_flags[n])
    if state_checksum(unlearned) != host_sum:
        raise HostMutated("host parameters changed during relearning")
    final = checkpoints[max(checkpoints)]
    return RelearnRun(
        adapter_checkpoints=checkpoints,
        final_adapter=final,
        train_log=log,
        config=config,
        host_checksum=host_sum,
    )


# ---------------------------------------------------------------------------
# auto-guided sampling (blend of unlearned and adapted predictions)
# ---------------------------------------------------------------------------

def automemora_noise(eps_cfg_unlearn: torch.Tensor, eps_cfg_memora: torch.Tensor, w: float) -> torch.Tensor:
    """Blend two CFG-transformed predictions: eps_u + w * (eps_m - eps_u).

    w=0 and w=1 return the corresponding input exactly.
    """
    if eps_cfg_unlearn.shape != eps_cfg_memora.shape:
        raise ValueError(
            f"shape mismatch: {tuple(eps_cfg_unlearn.shape)} vs {tuple(eps_cfg_memora.shape)}"
        )
    if w == 0.0:
        return eps_cfg_unlearn
    if w == 1.0:
        return eps_cfg_memora
    return eps_cfg_unlearn + w * (eps_cfg_memora - eps_cfg_unlearn)


def automemora_sample_batch(
    unlearned,
    adapter: LoraAdapter,
    x_T: torch.Tensor,
    cond_emb: torch.Tensor,
    sched: NoiseSchedule,
    s: float = 7.5,
    w: float = 0.5,
    n_infer_steps: int = 50,
    trace: list | None = None,
) -> torch.Tensor:
    """Full DDIM loop where each step blends both models' CFG predictions.

    Pass a list as ``trace`` to record (t, eps_unlearn, eps_adapted, eps_used)
    per step.
    """
    adapted = AdaptedDenoiser(unlearned, adapter)
    ts = inference_timesteps(sched, n_infer_steps)
    null_emb = unlearned.condition(None).embedding.to(x_T.dtype)
    x = x_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_u = cfg_eps_batch(unlearned, x, t, cond_emb, s, null_emb)
        eps_m = cfg_eps_batch(adapted, x, t, cond_emb, s, null_emb)
        eps = automemora_noise(eps_u, eps_m, w)
        if trace is not None:
            trace.append((t, eps_u.detach(), eps_m.detach(), eps.detach()))
        x = ddim_step_data(x, eps, t, t_prev, sched)
    return x


def automemora_sample(
    unlearned,
    adapter: LoraAdapter,
    z_T: Latent,
    c: Condition,
    sched: NoiseSchedule,
    s: float = 7.5,
    w: float = 0.5,
    n_infer_steps: int = 50,
) -> Latent:
    """Single-latent wrapper around automemora_sample_batch."""
    emb = c.embedding.to(z_T.data.dtype).unsqueeze(0)
    x = automemora_sample_batch(
        unlearned, adapter, z_T.data.unsqueeze(0), emb, sched, s, w, n_infer_steps
    )
    return Latent(data=x.squeeze(0), t=None)
