"""Synthetic concept world: glyph dataset, base denoiser training, concept classifier.

The world is a set of grayscale procedural glyphs (disk, frame, cross,
stripes, ...) rendered with per-sample position/size/intensity jitter on a
flat background.  It is deliberately easy: a small CNN separates the concepts
essentially perfectly, which is what makes attack-success rates meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import ConditionalDenoiser, fresh_denoiser
from .diffusion import NoiseSchedule

GLYPH_ORDER = ["disk", "frame", "cross", "stripes", "ring", "triangle", "dots", "bars"]
MIN_PER_CLASS = 8


class TrainingDiverged(RuntimeError):
    """Raised when a training loss goes non-finite."""


# ---------------------------------------------------------------------------
# glyph rendering
# ---------------------------------------------------------------------------

def _coverage(signed_dist: np.ndarray, soft: float = 0.8) -> np.ndarray:
    """Antialiased inside/outside coverage from a signed distance field."""
    return np.clip(0.5 - signed_dist / soft, 0.0, 1.0)


def _render_glyph(kind: str, size: int, cx: float, cy: float, scale: float,
                  phase: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = x - cx, y - cy
    if kind == "disk":
        d = np.hypot(dx, dy) - scale
    elif kind == "frame":
        box = np.maximum(np.abs(dx), np.abs(dy)) - scale
        d = np.abs(box) - 0.18 * size / 2
    elif kind == "cross":
        w = 0.16 * size / 2
        bar_h = np.maximum(np.abs(dx) - scale, np.abs(dy) - w)
        bar_v = np.maximum(np.abs(dy) - scale, np.abs(dx) - w)
        d = np.minimum(bar_h, bar_v)
    elif kind == "stripes":
        period = scale
        wave = np.sin(2.0 * np.pi * ((dx + dy) / period + phase))
        return np.clip((wave - 0.1) / 0.8, 0.0, 1.0)
    elif kind == "ring":
        d = np.abs(np.hypot(dx, dy) - scale) - 0.16 * size / 2
    elif kind == "triangle":
        d = np.maximum(1.6 * np.abs(dx) - (scale - dy), dy - scale)
    elif kind == "dots":
        off = scale
        d = np.full_like(dx, np.inf)
        for sx in (-off, off):
            for sy in (-off, off):
                d = np.minimum(d, np.hypot(dx - sx, dy - sy) - 0.14 * size / 2)
    elif kind == "bars":
        period = scale
        wave = np.sin(2.0 * np.pi * (dy / period + phase))
        return np.clip((wave - 0.1) / 0.8, 0.0, 1.0)
    else:
        raise ValueError(f"unknown glyph kind {kind!r}")
    return _coverage(d)


def _scale_range(kind: str, size: int) -> tuple[float, float]:
    half = size / 2.0
    return {
        "disk": (0.42 * half, 0.62 * half),
        "frame": (0.55 * half, 0.78 * half),
        "cross": (0.60 * half, 0.82 * half),
        "stripes": (0.40 * half, 0.58 * half),
        "ring": (0.52 * half, 0.72 * half),
        "triangle": (0.55 * half, 0.80 * half),
        "dots": (0.38 * half, 0.52 * half),
        "bars": (0.40 * half, 0.58 * half),
    }[kind]


@dataclass
class ConceptDataset:
    images: torch.Tensor  # (N, 1, H, W), float32, values in [-1, 1]
    labels: torch.Tensor  # (N,), long
    n_concepts: int
    render_spec: dict
    seed: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def class_indices(self, concept_id: int) -> torch.Tensor:
        return torch.nonzero(self.labels == concept_id, as_tuple=False).squeeze(1)

    def images_of(self, concept_id: int) -> torch.Tensor:
        return self.images[self.class_indices(concept_id)]

    def class_counts(self) -> list[int]:
        return [int((self.labels == c).sum()) for c in range(self.n_concepts)]


def generate_dataset(n_concepts: int, n_per_class: int, image_size: int, seed: int) -> ConceptDataset:
    """Render a deterministic multi-concept glyph dataset.

    Each concept gets one glyph kind with jittered center, scale, intensity,
    and (for periodic kinds) phase.  Identical (arguments, seed) pairs produce
    byte-identical tensors.
    """
    if n_concepts < 3:
        raise ValueError("need n_concepts >= 3 (one erased concept plus retained ones)")
    if n_concepts > len(GLYPH_ORDER):
        raise ValueError(f"at most {len(GLYPH_ORDER)} concepts supported")
    if image_size < 8:
        raise ValueError("image_size must be >= 8")
    if n_per_class < MIN_PER_CLASS:
        raise ValueError(f"need at least {MIN_PER_CLASS} samples per class")

    rng = np.random.default_rng(seed)
    jitter = image_size / 12.0
    spec = {
        "image_size": image_size,
        "background": -1.0,
        "position_jitter": jitter,
        "intensity_range": [0.6, 0.95],
        "concepts": [{"kind": GLYPH_ORDER[c]} for c in range(n_concepts)],
    }
    images = np.empty((n_concepts * n_per_class, 1, image_size, image_size), dtype=np.float32)
    labels = np.empty(n_concepts * n_per_class, dtype=np.int64)
    center = (image_size - 1) / 2.0
    row = 0
    for cid in range(n_concepts):
        kind = GLYPH_ORDER[cid]
        lo, hi = _scale_range(kind, image_size)
        for _ in range(n_per_class):
            cx = center + rng.uniform(-jitter, jitter)
            cy = center + rng.uniform(-jitter, jitter)
            scale = rng.uniform(lo, hi)
            intensity = rng.uniform(0.6, 0.95)
            phase = rng.uniform(0.0, 1.0)
            mask = _render_glyph(kind, image_size, cx, cy, scale, phase)
            img = -1.0 + mask * (intensity + 1.0)
            images[row, 0] = np.clip(img, -1.0, 1.0).astype(np.float32)
            labels[row] = cid
            row += 1
    return ConceptDataset(
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels),
        n_concepts=n_concepts,
        render_spec=spec,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# denoiser training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 3000
    lr: float = 2e-3
    batch_size: int = 32
    seed: int = 0
    p_uncond: float = 0.1
    weight_decay: float = 0.0  # decoupled decay on all parameters
    value_decay: float = 0.0  # decoupled decay on the slot-content tables only


def train_denoiser(
    dataset: ConceptDataset,
    sched: NoiseSchedule,
    config: TrainConfig,
    model: ConditionalDenoiser | None = None,
) -> ConditionalDenoiser:
    """Noise-prediction training with conditional dropout for CFG.

    The loss is the squared error summed over pixels and averaged over the
    batch, so an untrained (zero-output) predictor starts at roughly the
    latent dimensionality.  Pass ``model`` to continue training an existing
    network.  The per-step loss log is attached as ``model.train_log``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if model is None:
        model = fresh_denoiser(config.seed, n_concepts=dataset.n_concepts,
                               latent_shape=tuple(dataset.images.shape[1:]))
    model.requires_grad_(True)
    gen = torch.Generator().manual_seed(config.seed + 1)
    if config.weight_decay > 0.0 or config.value_decay > 0.0:
        values = set(map(id, model.value_table_parameters()))
        groups = [
            {"params": [p for p in model.parameters() if id(p) not in values],
             "weight_decay": config.weight_decay},
            {"params": model.value_table_parameters(),
             "weight_decay": config.value_decay},
        ]
        opt = torch.optim.AdamW(groups, lr=config.lr)
    else:
        opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sqrt_ab = torch.sqrt(torch.as_tensor(sched.alpha_bars, dtype=torch.float32))
    sqrt_1m = torch.sqrt(1.0 - torch.as_tensor(sched.alpha_bars, dtype=torch.float32))
    images, labels = dataset.images, dataset.labels
    null_idx = model.null_index()
    log: list[tuple[int, float]] = []

    model.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(dataset), (config.batch_size,), generator=gen)
        x0 = images[idx]
        t = torch.randint(0, sched.n_train_steps, (config.batch_size,), generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        x_t = sqrt_ab[t].view(-1, 1, 1, 1) * x0 + sqrt_1m[t].view(-1, 1, 1, 1) * noise
        drop = torch.rand(config.batch_size, generator=gen) < config.p_uncond
        ids = torch.where(drop, torch.full_like(labels[idx], null_idx), labels[idx])
        pred = model(x_t, t, model.embedding_for(ids))
        loss = ((pred - noise) ** 2).sum(dim=(1, 2, 3)).mean()
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite denoiser loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append((step, loss.item()))
    model.eval()
    model.train_log = log
    return model


# ---------------------------------------------------------------------------
# concept classifier
# ---------------------------------------------------------------------------

class ConceptClassifier(nn.Module):
    """Small CNN: two conv/pool stages, a feature layer, and a softmax head.

    ``features`` exposes the deterministic penultimate-layer map used by the
    Frechet/cosine metrics.
    """

    def __init__(self, n_concepts: int, image_size: int = 16, feature_dim: int = 32):
        super().__init__()
        if image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        self.n_concepts = n_concepts
        self.image_size = image_size
        self.feature_dim = feature_dim
        self.conv1 = nn.Conv2d(1, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.pool = nn.MaxPool2d(2)
        flat = 32 * (image_size // 4) ** 2
        self.fc1 = nn.Linear(flat, feature_dim)
        self.fc2 = nn.Linear(feature_dim, n_concepts)
        self.holdout_accuracy: float | None = None

    @property
    def hparams(self) -> dict:
        return {
            "n_concepts": self.n_concepts,
            "image_size": self.image_size,
            "feature_dim": self.feature_dim,
        }

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.pool(F.relu(self.conv1(x)))
        h = self.pool(F.relu(self.conv2(h)))
        return F.relu(self.fc1(h.flatten(1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.features(x))

    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.forward(x), dim=1)


@dataclass
class ClassifierConfig:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    holdout_fraction: float = 0.2
    max_imbalance: float = 3.0
    noise_aug: float = 0.1


def train_classifier(dataset: ConceptDataset, config: ClassifierConfig) -> ConceptClassifier:
    """Supervised training; held-out accuracy is stored on the classifier.

    Inputs get light Gaussian noise augmentation so the classifier stays
    reliable on generated (slightly soft) images.  Rejects datasets whose
    class balance exceeds the configured ratio.
    """
    counts = dataset.class_counts()
    if min(counts) == 0:
        raise ValueError(f"degenerate dataset: some classes have no samples (counts={counts})")
    if max(counts) / min(counts) > config.max_imbalance:
        raise ValueError(
            f"class imbalance {max(counts)}/{min(counts)} exceeds {config.max_imbalance}"
        )

    torch.manual_seed(config.seed)
    clf = ConceptClassifier(dataset.n_concepts, image_size=dataset.images.shape[-1])
    gen = torch.Generator().manual_seed(config.seed + 1)
    n = len(dataset)
    perm = torch.randperm(n, generator=gen)
    n_hold = max(1, int(round(config.holdout_fraction * n)))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    x_train, y_train = dataset.images[train_idx], dataset.labels[train_idx]
    x_hold, y_hold = dataset.images[hold_idx], dataset.labels[hold_idx]

    opt = torch.optim.Adam(clf.parameters(), lr=config.lr)
    clf.train()
    for _ in range(config.epochs):
        order = torch.randperm(len(x_train), generator=gen)
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x = x_train[idx]
            if config.noise_aug > 0:
                x = x + config.noise_aug * torch.randn(x.shape, generator=gen)
            loss = F.cross_entropy(clf(x), y_train[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged("non-finite classifier loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
    clf.eval()
    with torch.no_grad():
        acc = float((clf(x_hold).argmax(dim=1) == y_hold).float().mean())
    clf.holdout_accuracy = acc
    return clf
