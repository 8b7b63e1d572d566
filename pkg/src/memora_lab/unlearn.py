"""Two in-repo unlearners producing the targets for the recovery pipeline.

- ``unlearn_negative_guidance``: fine-tunes a copy of the base model so its
  conditional prediction for the erased concept regresses toward the frozen
  base's negatively guided target

      eps*(z_t, null) - eta * (eps*(z_t, c) - eps*(z_t, null))

  This is the shallow archetype: it corrupts the response to the condition
  while leaving most of the model intact.
- ``unlearn_retrain_excluding``: continues training on the dataset with the
  erased class removed and the erased condition remapped to an anchor
  concept's distribution.  This is the aggressive archetype that overwrites
  the erased knowledge rather than masking it.

Both return the unlearned model together with its measured no-attack ASR and
its retained-class Frechet distance to the base model.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import NoiseSchedule
from .metrics import asr, extract_features, fid, generate_images
from .seeds import derive_seed
from .world import ConceptDataset, TrainConfig, TrainingDiverged, train_denoiser

METHOD_NEGATIVE_GUIDANCE = "negative_guidance"
METHOD_RETRAIN_EXCLUDING = "retrain_excluding"


@dataclass
class UnlearnResult:
    model: torch.nn.Module
    method: str
    erased_concept: int
    pre_relearn_asr: float
    retained_fid_delta: float


def retained_fid(
    model_a,
    model_b,
    erased_concept: int,
    n_concepts: int,
    classifier,
    *,
    sched: NoiseSchedule,
    n_infer_steps: int = 50,
    guidance_scale: float = 7.5,
    per_class: int = 40,
    seed: int = 0,
) -> float:
    """Frechet distance between the two models' retained-class generations.

    Both models sample the same per-(class, index) seeds so the comparison is
    paired.
    """
    feats = []
    for model in (model_a, model_b):
        rows = []
        for cid in range(n_concepts):
            if cid == erased_concept:
                continue
            seeds = [derive_seed(seed, "retained_fid", cid, i) for i in range(per_class)]
            images = generate_images(
                model, cid, seeds, sched=sched, n_infer_steps=n_infer_steps,
                guidance_scale=guidance_scale,
            )
            rows.append(extract_features(images, classifier))
        feats.append(np.concatenate(rows, axis=0))
    return fid(feats[0], feats[1])


def _measure(
    model, base, erased_concept, dataset, classifier, sched,
    n_infer_steps, guidance_scale, eval_prompts, eval_seed, method,
) -> UnlearnResult:
    pre = asr(
        model, erased_concept, classifier, eval_prompts, None, eval_seed,
        sched=sched, n_infer_steps=n_infer_steps, guidance_scale=guidance_scale,
    )
    delta = retained_fid(
        model, base, erased_concept, dataset.n_concepts, classifier,
        sched=sched, n_infer_steps=n_infer_steps, guidance_scale=guidance_scale,
        seed=eval_seed,
    )
    return UnlearnResult(
        model=model,
        method=method,
        erased_concept=erased_concept,
        pre_relearn_asr=pre,
        retained_fid_delta=delta,
    )


def unlearn_negative_guidance(
    base,
    concept: int,
    eta: float = 1.0,
    steps: int = 400,
    config: TrainConfig | None = None,
    *,
    dataset: ConceptDataset,
    classifier,
    sched: NoiseSchedule,
    n_infer_steps: int = 50,
    guidance_scale: float = 7.5,
    eval_prompts: int = 50,
    eval_seed: int = 0,
    preserve_uncond: float = 1.0,
) -> UnlearnResult:
    """Erase a concept by regressing toward the frozen negatively guided target.

    Only the condition-embedding table trains: the erased concept's row moves
    until its (CFG-amplified) response follows the negatively guided target,
    and the ``preserve_uncond`` term keeps the null row anchored to the frozen
    teacher.  The network itself (routing, slot contents, backbone) stays
    frozen, so the method suppresses how the concept is addressed without
    rewriting what the model stores.  That is what makes it the shallow
    archetype: the residual response stays inside the span of retained
    content rather than turning anti-concept.
    """
    if concept is None:
        raise ValueError("cannot erase the null condition")
    if not 0 <= concept < dataset.n_concepts:
        raise ValueError(f"concept {concept} outside [0, {dataset.n_concepts})")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    config = config or TrainConfig()

    trainee = copy.deepcopy(base)
    trainee.requires_grad_(True)
    trainee.train()
    base.eval()
    gen = torch.Generator().manual_seed(config.seed + 2)
    opt = torch.optim.Adam([trainee.embed.weight], lr=config.lr)
    erased = dataset.images_of(concept)
    sqrt_ab = torch.sqrt(torch.as_tensor(sched.alpha_bars, dtype=torch.float32))
    sqrt_1m = torch.sqrt(1.0 - torch.as_tensor(sched.alpha_bars, dtype=torch.float32))
    null_idx = base.null_index()

    for step in range(steps):
        idx = torch.randint(0, erased.shape[0], (config.batch_size,), generator=gen)
        x0 = erased[idx]
        t = torch.randint(0, sched.n_train_steps, (config.batch_size,), generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        x_t = sqrt_ab[t].view(-1, 1, 1, 1) * x0 + sqrt_1m[t].view(-1, 1, 1, 1) * noise
        ids_c = torch.full((config.batch_size,), concept, dtype=torch.long)
        ids_u = torch.full((config.batch_size,), null_idx, dtype=torch.long)
        with torch.no_grad():
            eps_u = base(x_t, t, base.embedding_for(ids_u))
            eps_c = base(x_t, t, base.embedding_for(ids_c))
            target = eps_u - eta * (eps_c - eps_u)
        pred = trainee(x_t, t, trainee.embedding_for(ids_c))
        loss = ((pred - target) ** 2).sum(dim=(1, 2, 3)).mean()
        if preserve_uncond > 0.0:
            pred_u = trainee(x_t, t, trainee.embedding_for(ids_u))
            loss = loss + preserve_uncond * ((pred_u - eps_u) ** 2).sum(dim=(1, 2, 3)).mean()
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite negative-guidance loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    trainee.eval()

    return _measure(
        trainee, base, concept, dataset, classifier, sched,
        n_infer_steps, guidance_scale, eval_prompts, eval_seed,
        METHOD_NEGATIVE_GUIDANCE,
    )


def unlearn_retrain_excluding(
    base,
    dataset: ConceptDataset,
    concept_id: int,
    steps: int = 2000,
    config: TrainConfig | None = None,
    *,
    anchor: int = 0,
    classifier,
    sched: NoiseSchedule,
    n_infer_steps: int = 50,
    guidance_scale: float = 7.5,
    eval_prompts: int = 50,
    eval_seed: int = 0,
) -> UnlearnResult:
    """Continue training with the erased class dropped and its condition anchored.

    The erased condition is trained on the anchor concept's images, so the
    model replaces the forbidden distribution with the surrogate instead of
    merely suppressing it.  Training continues with standard decoupled weight
    decay, so content that no longer receives data support (the erased
    concept's slot) decays away instead of lingering.  That is what makes
    this the aggressive, hard-to-recover archetype.
    """
    if not 0 <= concept_id < dataset.n_concepts:
        raise ValueError(f"concept {concept_id} outside [0, {dataset.n_concepts})")
    if anchor == concept_id:
        raise ValueError("anchor concept must differ from the erased concept")
    if not 0 <= anchor < dataset.n_concepts:
        raise ValueError(f"anchor {anchor} outside [0, {dataset.n_concepts})")
    config = config or TrainConfig()

    keep = dataset.labels != concept_id
    anchor_imgs = dataset.images_of(anchor)
    images = torch.cat([dataset.images[keep], anchor_imgs])
    labels = torch.cat(
        [dataset.labels[keep], torch.full((anchor_imgs.shape[0],), concept_id, dtype=torch.long)]
    )
    surrogate = ConceptDataset(
        images=images,
        labels=labels,
        n_concepts=dataset.n_concepts,
        render_spec={"derived_from": dataset.render_spec, "remap": {concept_id: anchor}},
        seed=dataset.seed,
    )
    trainee = copy.deepcopy(base)
    run_cfg = TrainConfig(
        steps=steps, lr=config.lr, batch_size=config.batch_size,
        seed=config.seed, p_uncond=config.p_uncond,
        weight_decay=config.weight_decay, value_decay=config.value_decay,
    )
    train_denoiser(surrogate, sched, run_cfg, model=trainee)

    return _measure(
        trainee, base, concept_id, dataset, classifier, sched,
        n_infer_steps, guidance_scale, eval_prompts, eval_seed,
        METHOD_RETRAIN_EXCLUDING,
    )
