"""The toy noise predictor: a small U-shaped conv net with keyed concept slots.

Conditioning enters through a two-stage pathway: a routing linear maps the
condition embedding to attention weights over a bank of concept slots, and
per-block value tables turn those weights into channel biases that are added
to the feature maps (timestep embeddings are added the same way).  The
routing map is where conditioning enters the network and is what low-rank
adapters attach to; the value tables are the content the routing addresses.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import Condition


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _Block(nn.Module):
    """conv -> norm -> act -> (+time bias, +slot bias) -> conv -> norm -> act."""

    def __init__(self, cin: int, cout: int, time_dim: int, n_slots: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(4, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(4, cout)
        self.time_proj = nn.Linear(time_dim, cout)
        self.value_table = nn.Linear(n_slots, cout, bias=False)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor, slot_attn: torch.Tensor) -> torch.Tensor:
        h = self.act(self.norm1(self.conv1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None] + self.value_table(slot_attn)[:, :, None, None]
        return self.act(self.norm2(self.conv2(h)))


class ConditionalDenoiser(nn.Module):
    """eps(z_t, t, c) predictor over (1, H, W) latents with learned concept embeddings.

    The embedding table holds one row per concept plus a dedicated null row
    (index n_concepts) for the unconditional branch.  The output conv is
    zero-initialized so an untrained model predicts exactly zero noise.
    """

    def __init__(
        self,
        latent_shape: tuple[int, int, int] = (1, 16, 16),
        n_concepts: int = 4,
        cond_dim: int = 16,
        base_channels: int = 24,
        time_dim: int = 48,
        n_slots: int = 8,
    ):
        super().__init__()
        c, h, w = latent_shape
        if h % 2 or w % 2:
            raise ValueError("latent height/width must be even (one 2x down/up pair)")
        self.latent_shape = (c, h, w)
        self.n_concepts = n_concepts
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.base_channels = base_channels
        self.n_slots = n_slots

        self.embed = nn.Embedding(n_concepts + 1, cond_dim)
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU())
        self.cond_router = nn.Linear(cond_dim, n_slots, bias=False)

        b = base_channels
        self.stem = nn.Conv2d(c, b, 3, padding=1)
        self.enc = _Block(b, b, time_dim, n_slots)
        self.down = nn.AvgPool2d(2)
        self.mid = _Block(b, 2 * b, time_dim, n_slots)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.dec = _Block(3 * b, b, time_dim, n_slots)
        self.out = nn.Conv2d(b, c, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def hparams(self) -> dict:
        return {
            "latent_shape": list(self.latent_shape),
            "n_concepts": self.n_concepts,
            "cond_dim": self.cond_dim,
            "base_channels": self.base_channels,
            "time_dim": self.time_dim,
            "n_slots": self.n_slots,
        }

    def slot_attention(self, cond_emb: torch.Tensor) -> torch.Tensor:
        """Softmax routing of a condition embedding over the concept slots.

        Attention weights are bounded in (0, 1): routing can select stored
        content but can never amplify it beyond its learned magnitude.
        """
        return F.softmax(self.cond_router(cond_emb), dim=-1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond_emb: torch.Tensor) -> torch.Tensor:
        t_emb = self.time_mlp(timestep_features(t, self.time_dim).to(x.dtype))
        a = self.slot_attention(cond_emb)
        s = self.stem(x)
        e = self.enc(s, t_emb, a)
        m = self.mid(self.down(e), t_emb, a)
        d = self.dec(torch.cat([self.up(m), e], dim=1), t_emb, a)
        return self.out(d)

    # -- conditioning ------------------------------------------------------

    def embedding_for(self, concept_ids: torch.Tensor) -> torch.Tensor:
        """Embedding rows for a LongTensor of ids (null = n_concepts)."""
        return self.embed(concept_ids)

    def null_index(self) -> int:
        return self.n_concepts

    def condition(self, concept_id: int | None) -> Condition:
        """Detached Condition for a concept id (None = unconditional)."""
        if concept_id is None:
            idx = self.n_concepts
        else:
            idx = int(concept_id)
            if not 0 <= idx < self.n_concepts:
                raise ValueError(f"concept_id {concept_id} outside [0, {self.n_concepts})")
        return Condition(concept_id=concept_id, embedding=self.embed.weight[idx].detach().clone())

    # -- adapter plumbing --------------------------------------------------

    def lora_target_names(self) -> list[str]:
        """The linear maps through which conditioning enters the network."""
        return ["cond_router"]

    def value_table_parameters(self) -> list[nn.Parameter]:
        """The slot-content tables addressed by the router."""
        return [blk.value_table.weight for blk in (self.enc, self.mid, self.dec)]


def fresh_denoiser(seed: int, **kwargs) -> ConditionalDenoiser:
    """Construct a denoiser with seeded parameter initialization."""
    torch.manual_seed(seed)
    return ConditionalDenoiser(**kwargs)
