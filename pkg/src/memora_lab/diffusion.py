"""Noise schedules, forward diffusion, CFG, and deterministic DDIM stepping.

Implements the arithmetic shared by every other module:

- Forward process:  z_t = sqrt(abar_t) * z_0 + sqrt(1 - abar_t) * eps
- DDIM step (eta=0):
      x0_hat   = (z_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)
      z_{t'}   = sqrt(abar_{t'}) * x0_hat + sqrt(1 - abar_{t'}) * eps
  which is its own algebraic inverse when run toward higher noise.
- Classifier-free guidance:
      eps_cfg = eps(z, null) + s * (eps(z, c) - eps(z, null))

Conventions:
- Schedules are float64 numpy arrays; a timestep ``t`` indexes them directly,
  so ``abar(t) = alpha_bars[t]`` for ``t`` in ``[0, n_train_steps)``.
- Clean samples carry ``t=None``.  The inference subsequence is descending,
  ``[T-1, T-1-stride, ...]``, and the last entry takes a final step to t=0;
  level 0 has ``abar ~= 1 - beta_start`` and is treated as clean.
- Stepping helpers are dtype-preserving (float32 latents in the pipeline,
  float64 wherever precision is being tested).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch

SCHEDULE_KINDS = ("scaled_linear", "linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha/alpha-bar arrays driving all diffusion arithmetic."""

    n_train_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str
    beta_start: float
    beta_end: float

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at timestep t (python float, float64)."""
        if not 0 <= t < self.n_train_steps:
            raise ValueError(f"timestep {t} outside [0, {self.n_train_steps})")
        return float(self.alpha_bars[t])


def make_schedule(
    n_train_steps: int,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
    kind: str = "scaled_linear",
) -> NoiseSchedule:
    """Build a noise schedule.

    ``scaled_linear`` spaces sqrt(beta) arithmetically between
    sqrt(beta_start) and sqrt(beta_end); ``linear`` spaces beta itself.
    Endpoint betas equal beta_start / beta_end exactly.  Equal endpoints
    yield a constant schedule.
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if n_train_steps < 2:
        raise ValueError("n_train_steps must be >= 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )

    if kind == "scaled_linear":
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), n_train_steps,
                            dtype=np.float64) ** 2
    else:
        betas = np.linspace(beta_start, beta_end, n_train_steps, dtype=np.float64)
    # pin the endpoints exactly (sqrt/square round-trips can be off by 1 ulp)
    betas[0] = beta_start
    betas[-1] = beta_end

    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ValueError("generated betas fall outside (0, 1)")
    if np.any(np.diff(betas) < -1e-15):
        raise ValueError("generated betas are not monotone non-decreasing")

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if np.any(np.diff(alpha_bars) >= 0.0):
        raise ValueError("alpha_bars are not strictly decreasing")
    return NoiseSchedule(
        n_train_steps=n_train_steps,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        kind=kind,
        beta_start=beta_start,
        beta_end=beta_end,
    )


def inference_timesteps(sched: NoiseSchedule, n_infer_steps: int) -> list[int]:
    """Descending strided timestep subsequence for n_infer_steps of inference.

    For T=1000 and 50 steps this is [999, 979, ..., 19]; each entry steps to
    the next, and the last entry takes a final step to t=0.
    """
    if n_infer_steps < 1:
        raise ValueError("n_infer_steps must be >= 1")
    if n_infer_steps > sched.n_train_steps:
        raise ValueError(
            f"n_infer_steps={n_infer_steps} exceeds n_train_steps={sched.n_train_steps}"
        )
    stride = sched.n_train_steps // n_infer_steps
    return [sched.n_train_steps - 1 - i * stride for i in range(n_infer_steps)]


@dataclass
class Latent:
    """A (C, H, W) sample tagged with its noise level; t=None means clean."""

    data: torch.Tensor
    t: int | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"latent data must be (C, H, W), got shape {tuple(self.data.shape)}")


@dataclass(frozen=True)
class Condition:
    """A conditioning signal: concept id plus its embedding vector.

    ``concept_id=None`` is the unconditional (null) branch, which has a
    dedicated learned embedding.
    """

    concept_id: int | None
    embedding: torch.Tensor


class EpsModel(Protocol):
    """What the stepping code needs from a noise predictor.

    ``__call__(x, t, cond_emb)`` maps a (B,C,H,W) batch at integer timesteps
    ``t`` (LongTensor (B,)) with condition embeddings (B, cond_dim) to
    predicted noise of the same shape as ``x``.
    """

    latent_shape: tuple[int, int, int]
    cond_dim: int

    def __call__(self, x: torch.Tensor, t: torch.Tensor, cond_emb: torch.Tensor) -> torch.Tensor: ...

    def condition(self, concept_id: int | None) -> Condition: ...


# ---------------------------------------------------------------------------
# forward process
# ---------------------------------------------------------------------------

def forward_diffuse(z0: Latent, t: int, noise: torch.Tensor, sched: NoiseSchedule) -> Latent:
    """Closed-form forward process q(z_t | z_0) with caller-supplied noise."""
    if z0.t is not None:
        raise ValueError("forward_diffuse expects a clean latent (t=None)")
    if noise.shape != z0.data.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.data.shape)}")
    ab = sched.alpha_bar(t)
    data = math.sqrt(ab) * z0.data + math.sqrt(1.0 - ab) * noise
    return Latent(data=data, t=t)


def diffuse_batch(
    x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Batched forward process with a per-sample timestep vector."""
    ab = torch.as_tensor(sched.alpha_bars, dtype=x0.dtype)[t].view(-1, 1, 1, 1)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


# ---------------------------------------------------------------------------
# DDIM stepping
# ---------------------------------------------------------------------------

def _retarget(x: torch.Tensor, eps: torch.Tensor, ab_from: float, ab_to: float) -> torch.Tensor:
    x0_hat = (x - math.sqrt(1.0 - ab_from) * eps) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * x0_hat + math.sqrt(1.0 - ab_to) * eps


def ddim_step_data(
    x: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Deterministic (eta=0) DDIM update on raw tensors, t -> t_prev < t."""
    if eps.shape != x.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(x.shape)}")
    if t_prev == t:
        return x
    if not t > t_prev >= 0:
        raise ValueError(f"ddim_step requires t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    return _retarget(x, eps, sched.alpha_bar(t), sched.alpha_bar(t_prev))


def ddim_step(z_t: Latent, eps: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> Latent:
    """Denoising DDIM step; see module docstring for the update formula."""
    return Latent(data=ddim_step_data(z_t.data, eps, t, t_prev, sched), t=t_prev)


def ddim_inverse_step_data(
    x: torch.Tensor, eps: torch.Tensor, t: int, t_next: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Algebraic inverse of ddim_step_data under the same eps, t -> t_next > t."""
    if eps.shape != x.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(x.shape)}")
    if t_next == t:
        return x
    if not t_next > t >= 0:
        raise ValueError(f"ddim_inverse_step requires t_next > t >= 0, got t={t}, t_next={t_next}")
    return _retarget(x, eps, sched.alpha_bar(t), sched.alpha_bar(t_next))


def ddim_inverse_step(
    z_t: Latent, eps: torch.Tensor, t: int, t_next: int, sched: NoiseSchedule
) -> Latent:
    """Inversion step toward higher noise."""
    return Latent(data=ddim_inverse_step_data(z_t.data, eps, t, t_next, sched), t=t_next)


# ---------------------------------------------------------------------------
# classifier-free guidance
# ---------------------------------------------------------------------------

def cfg_eps_batch(
    model: EpsModel,
    x: torch.Tensor,
    t: int,
    cond_emb: torch.Tensor,
    s: float,
    null_emb: torch.Tensor | None = None,
) -> torch.Tensor:
    """CFG-transformed noise prediction for a batch at a shared timestep.

    s=1 and s=0 short-circuit to the conditional / unconditional branch so
    those identities hold exactly (and inversion at s=1 costs one forward).
    """
    tb = torch.full((x.shape[0],), t, dtype=torch.long)
    if s == 1.0:
        return model(x, tb, cond_emb)
    if null_emb is None:
        null_emb = model.condition(None).embedding.to(x.dtype)
    null_batch = null_emb.expand(x.shape[0], -1)
    eps_u = model(x, tb, null_batch)
    if s == 0.0:
        return eps_u
    eps_c = model(x, tb, cond_emb)
    return eps_u + s * (eps_c - eps_u)


def cfg_noise(model: EpsModel, z: Latent, t: int, c: Condition, s: float) -> torch.Tensor:
    """CFG prediction eps(z,null) + s*(eps(z,c) - eps(z,null)) for one latent."""
    if c.concept_id is None:
        raise ValueError("cfg_noise requires a conditional condition, not the null one")
    emb = c.embedding.to(z.data.dtype).unsqueeze(0)
    return cfg_eps_batch(model, z.data.unsqueeze(0), t, emb, s).squeeze(0)


# ---------------------------------------------------------------------------
# sampling loops
# ---------------------------------------------------------------------------

def sample_batch(
    model: EpsModel,
    x_T: torch.Tensor,
    cond_emb: torch.Tensor,
    sched: NoiseSchedule,
    s: float,
    n_infer_steps: int,
    start_index: int = 0,
) -> torch.Tensor:
    """Iterated CFG + DDIM over the inference subsequence, batched.

    ``start_index`` selects the suffix of the descending schedule to run
    (0 = full sampling).  Deterministic given all inputs.
    """
    ts = inference_timesteps(sched, n_infer_steps)
    if not 0 <= start_index < len(ts):
        raise ValueError(f"start_index {start_index} outside [0, {len(ts)})")
    null_emb = model.condition(None).embedding.to(x_T.dtype)
    x = x_T
    for i in range(start_index, len(ts)):
        t = ts[i]
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = cfg_eps_batch(model, x, t, cond_emb, s, null_emb)
        x = ddim_step_data(x, eps, t, t_prev, sched)
    return x


def sample(
    model: EpsModel,
    z_T: Latent,
    c: Condition,
    sched: NoiseSchedule,
    s: float = 7.5,
    n_infer_steps: int = 50,
) -> Latent:
    """Full clean sample from an initial noise latent."""
    emb = c.embedding.to(z_T.data.dtype).unsqueeze(0)
    x = sample_batch(model, z_T.data.unsqueeze(0), emb, sched, s, n_infer_steps)
    return Latent(data=x.squeeze(0), t=None)


def denoise_from(
    model: EpsModel,
    z_t: Latent,
    t_start: int,
    c: Condition,
    sched: NoiseSchedule,
    s: float = 7.5,
    n_infer_steps: int = 50,
) -> Latent:
    """Denoise only the suffix of the inference schedule starting at index t_start.

    t_start=0 is identical to sample(); t_start = n_infer_steps - 1 is a single
    denoising step.  z_t must sit at the noise level of schedule entry t_start
    (checked when the latent carries a timestep tag).
    """
    ts = inference_timesteps(sched, n_infer_steps)
    if not 0 <= t_start < len(ts):
        raise ValueError(f"t_start {t_start} outside the inference subsequence [0, {len(ts)})")
    if z_t.t is not None and z_t.t != ts[t_start]:
        raise ValueError(
            f"latent is tagged t={z_t.t} but schedule entry {t_start} is t={ts[t_start]}"
        )
    emb = c.embedding.to(z_t.data.dtype).unsqueeze(0)
    x = sample_batch(model, z_t.data.unsqueeze(0), emb, sched, s, n_infer_steps,
                     start_index=t_start)
    return Latent(data=x.squeeze(0), t=None)
