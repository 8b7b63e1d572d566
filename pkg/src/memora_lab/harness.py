"""Pipeline commands: train-base, unlearn, relearn, attack, eval, report.

Each command reads and writes only its declared artifacts under one run
directory; every artifact carries a manifest with a content checksum and the
checksums of its parents.  Reruns of an identical config under the same
master seed reproduce every CSV byte-for-byte (single-threaded mode).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .attack import AttackBudget, attack_batch
from .checkpoints import (
    CheckpointError,
    ProvenanceError,
    load_checkpoint,
    load_state,
    save_checkpoint,
    state_arrays,
    state_checksum,
)
from .config import RunConfig, write_config
from .denoiser import ConditionalDenoiser
from .diffusion import Latent, make_schedule
from .lora import AdaptedDenoiser, LoraAdapter, LoraLayer
from .metrics import (
    EvalReport,
    classify_forgetting,
    classify_images,
    cosine_report,
    extract_features,
    fid,
    generate_images,
    recovery_curve,
)
from .pipeline import (
    ExpansionScheme,
    RelearnConfig,
    RelearnRun,
    automemora_sample_batch,
    build_training_set,
    expand_latents,
    invert_image,
    relearn,
)
from .seeds import derive_seed, prompt_noise, prompt_seeds
from .unlearn import (
    METHOD_NEGATIVE_GUIDANCE,
    METHOD_RETRAIN_EXCLUDING,
    unlearn_negative_guidance,
    unlearn_retrain_excluding,
)
from .world import (
    ClassifierConfig,
    ConceptClassifier,
    ConceptDataset,
    TrainConfig,
    generate_dataset,
    train_classifier,
    train_denoiser,
)

DATASET_NAME = "dataset.npz"
CLASSIFIER_NAME = "classifier.npz"
BASE_MODEL_NAME = "base_model.npz"
CONFIG_SNAPSHOT = "config.resolved.ini"


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# artifact (de)serialization
# ---------------------------------------------------------------------------

def save_dataset(path: Path, dataset: ConceptDataset, config: dict) -> None:
    save_checkpoint(
        path,
        kind="dataset",
        arrays={"images": dataset.images.numpy(), "labels": dataset.labels.numpy()},
        config=config,
        extra={
            "n_concepts": dataset.n_concepts,
            "render_spec": dataset.render_spec,
            "seed": dataset.seed,
        },
    )


def load_dataset(path: Path) -> tuple[ConceptDataset, str]:
    arrays, manifest = load_checkpoint(path, expected_kind="dataset")
    dataset = ConceptDataset(
        images=torch.from_numpy(arrays["images"]),
        labels=torch.from_numpy(arrays["labels"]),
        n_concepts=int(manifest.extra["n_concepts"]),
        render_spec=manifest.extra["render_spec"],
        seed=int(manifest.extra["seed"]),
    )
    return dataset, manifest.checksum


def save_denoiser(path: Path, model: ConditionalDenoiser, kind: str,
                  parents: dict, config: dict, extra: dict | None = None) -> None:
    meta = {"hparams": model.hparams}
    meta.update(extra or {})
    save_checkpoint(path, kind=kind, arrays=state_arrays(model),
                    parents=parents, config=config, extra=meta)


def load_denoiser(path: Path, expected_kind: str | None = None) -> tuple[ConditionalDenoiser, "object"]:
    arrays, manifest = load_checkpoint(path, expected_kind=expected_kind)
    hp = manifest.extra["hparams"]
    model = ConditionalDenoiser(
        latent_shape=tuple(hp["latent_shape"]),
        n_concepts=int(hp["n_concepts"]),
        cond_dim=int(hp["cond_dim"]),
        base_channels=int(hp["base_channels"]),
        time_dim=int(hp["time_dim"]),
    )
    load_state(model, arrays)
    return model, manifest


def save_classifier(path: Path, clf: ConceptClassifier, parents: dict, config: dict) -> None:
    save_checkpoint(
        path, kind="classifier", arrays=state_arrays(clf), parents=parents,
        config=config,
        extra={"hparams": clf.hparams, "holdout_accuracy": clf.holdout_accuracy},
    )


def load_classifier(path: Path) -> tuple[ConceptClassifier, "object"]:
    arrays, manifest = load_checkpoint(path, expected_kind="classifier")
    hp = manifest.extra["hparams"]
    clf = ConceptClassifier(
        n_concepts=int(hp["n_concepts"]),
        image_size=int(hp["image_size"]),
        feature_dim=int(hp["feature_dim"]),
    )
    load_state(clf, arrays)
    clf.holdout_accuracy = manifest.extra.get("holdout_accuracy")
    return clf, manifest


def save_adapter(path: Path, adapter: LoraAdapter, step: int,
                 parents: dict, config: dict) -> None:
    arrays = {}
    for name, layer in adapter.layers.items():
        arrays[f"A::{name}"] = layer.A.detach().numpy()
        arrays[f"B::{name}"] = layer.B.detach().numpy()
    save_checkpoint(
        path, kind="adapter", arrays=arrays, parents=parents, config=config,
        extra={
            "rank": adapter.rank,
            "beta": adapter.beta,
            "host_checksum": adapter.host_checksum,
            "erased_concept": adapter.erased_concept,
            "step": step,
        },
    )


def load_adapter(path: Path) -> tuple[LoraAdapter, "object"]:
    arrays, manifest = load_checkpoint(path, expected_kind="adapter")
    layers: dict[str, LoraLayer] = {}
    for key in sorted(arrays):
        if key.startswith("A::"):
            name = key[3:]
            layers[name] = LoraLayer(
                A=torch.from_numpy(arrays[key]),
                B=torch.from_numpy(arrays[f"B::{name}"]),
            )
    adapter = LoraAdapter(
        layers=layers,
        rank=int(manifest.extra["rank"]),
        beta=float(manifest.extra["beta"]),
        host_checksum=manifest.extra.get("host_checksum"),
        erased_concept=manifest.extra.get("erased_concept"),
    )
    return adapter, manifest


def adapter_for_model(adapter_path: Path, model: ConditionalDenoiser) -> LoraAdapter:
    """Load an adapter and refuse it if it was trained against another host."""
    adapter, _ = load_adapter(adapter_path)
    host = state_checksum(model)
    if adapter.host_checksum is not None and adapter.host_checksum != host:
        raise ProvenanceError(
            f"adapter {adapter_path.name} was trained against host "
            f"{str(adapter.host_checksum)[:12]}..., supplied model is {host[:12]}..."
        )
    return adapter


# ---------------------------------------------------------------------------
# shared command plumbing
# ---------------------------------------------------------------------------

def _sched(cfg: RunConfig):
    s = cfg.schedule
    return make_schedule(s.n_train_steps, s.beta_start, s.beta_end, s.kind)


def _sampling_kwargs(cfg: RunConfig) -> dict:
    return {
        "n_infer_steps": cfg.sampling.n_infer_steps,
        "guidance_scale": cfg.sampling.guidance_scale,
    }


def _budget(cfg: RunConfig) -> AttackBudget:
    a = cfg.attack
    return AttackBudget(max_iters=a.max_iters, step_size=a.step_size,
                        norm_bound=a.norm_bound, chain_steps=a.chain_steps)


def _require_absent(paths: list[Path], force: bool) -> None:
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        names = ", ".join(p.name for p in existing)
        raise FileExistsError(f"outputs already exist ({names}); pass --force to overwrite")


def _model_stem(path: Path) -> str:
    return Path(path).name.removesuffix(".npz")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train_base(cfg: RunConfig, out: Path, force: bool = False) -> dict[str, Path]:
    """Generate the world, train the classifier and the base denoiser."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "dataset": out / DATASET_NAME,
        "classifier": out / CLASSIFIER_NAME,
        "base_model": out / BASE_MODEL_NAME,
    }
    _require_absent(list(paths.values()), force)
    write_config(cfg, out / CONFIG_SNAPSHOT)
    master = cfg.run.master_seed
    sched = _sched(cfg)

    dataset = generate_dataset(
        cfg.world.n_concepts, cfg.world.n_per_class, cfg.world.image_size,
        seed=derive_seed(master, "dataset"),
    )
    save_dataset(paths["dataset"], dataset, cfg.to_dict())
    dataset_sum = load_checkpoint(paths["dataset"])[1].checksum

    clf = train_classifier(dataset, ClassifierConfig(
        epochs=cfg.classifier.epochs, lr=cfg.classifier.lr,
        batch_size=cfg.classifier.batch_size,
        holdout_fraction=cfg.classifier.holdout_fraction,
        max_imbalance=cfg.classifier.max_imbalance,
        noise_aug=cfg.classifier.noise_aug,
        seed=derive_seed(master, "classifier") % (2**31),
    ))
    save_classifier(paths["classifier"], clf, parents={"dataset": dataset_sum},
                    config=cfg.to_dict())
    print(f"[train-base] classifier held-out accuracy: {clf.holdout_accuracy:.4f}")

    base = train_denoiser(dataset, sched, TrainConfig(
        steps=cfg.base_train.steps, lr=cfg.base_train.lr,
        batch_size=cfg.base_train.batch_size, p_uncond=cfg.base_train.p_uncond,
        seed=derive_seed(master, "base") % (2**31),
    ))
    save_denoiser(paths["base_model"], base, kind="base_model",
                  parents={"dataset": dataset_sum}, config=cfg.to_dict())
    write_csv(out / "base_train_log.csv", ["step", "loss"],
              [[s, l] for s, l in base.train_log])
    print(f"[train-base] wrote {', '.join(p.name for p in paths.values())}")
    return paths


def cmd_unlearn(
    cfg: RunConfig,
    out: Path,
    method: str,
    concept: int | None = None,
    model_path: Path | None = None,
    name: str | None = None,
    force: bool = False,
) -> Path:
    """Produce an unlearned model checkpoint from the base (or a given model)."""
    out = Path(out)
    concept = cfg.unlearn.concept if concept is None else int(concept)
    source = Path(model_path) if model_path else out / BASE_MODEL_NAME
    model, source_manifest = load_denoiser(source)
    dataset, dataset_sum = load_dataset(out / DATASET_NAME)
    clf, clf_manifest = load_classifier(out / CLASSIFIER_NAME)
    base, _ = load_denoiser(out / BASE_MODEL_NAME)
    sched = _sched(cfg)
    master = cfg.run.master_seed

    if name is None:
        name = f"unlearned_{method}_c{concept}"
        if model_path:
            name += f"__{_model_stem(source)}"
    target = out / f"{name}.npz"
    _require_absent([target], force)

    eval_seed = derive_seed(master, "eval", concept)
    kwargs = dict(
        dataset=dataset, classifier=clf, sched=sched,
        eval_prompts=cfg.eval.n_prompts, eval_seed=eval_seed,
        **_sampling_kwargs(cfg),
    )
    if method == METHOD_NEGATIVE_GUIDANCE:
        ng = cfg.negative_guidance
        result = unlearn_negative_guidance(
            model, concept, eta=ng.eta, steps=ng.steps,
            config=TrainConfig(steps=ng.steps, lr=ng.lr, batch_size=ng.batch_size,
                               seed=derive_seed(master, "unlearn", method, concept) % (2**31)),
            **kwargs,
        )
        method_extra = {"eta": ng.eta, "steps": ng.steps}
    elif method == METHOD_RETRAIN_EXCLUDING:
        rx = cfg.retrain_excluding
        result = unlearn_retrain_excluding(
            model, dataset, concept, steps=rx.steps,
            config=TrainConfig(steps=rx.steps, lr=rx.lr, batch_size=rx.batch_size,
                               seed=derive_seed(master, "unlearn", method, concept) % (2**31),
                               p_uncond=cfg.base_train.p_uncond,
                               weight_decay=rx.weight_decay,
                               value_decay=rx.value_decay),
            anchor=cfg.unlearn.anchor,
            **kwargs,
        )
        method_extra = {"anchor": cfg.unlearn.anchor, "steps": rx.steps}
    else:
        raise ValueError(f"unknown unlearn method {method!r}")

    save_denoiser(
        target, result.model, kind="unlearned_model",
        parents={"source_model": source_manifest.checksum, "dataset": dataset_sum,
                 "classifier": clf_manifest.checksum},
        config=cfg.to_dict(),
        extra={
            "method": result.method,
            "erased_concept": result.erased_concept,
            "pre_relearn_asr": result.pre_relearn_asr,
            "retained_fid_delta": result.retained_fid_delta,
            **method_extra,
        },
    )
    print(f"[unlearn] {name}: pre_relearn_asr={result.pre_relearn_asr:.3f} "
          f"retained_fid_delta={result.retained_fid_delta:.4f}")
    return target


def cmd_relearn(
    cfg: RunConfig,
    out: Path,
    model_path: Path,
    refs_path: Path | None = None,
    force: bool = False,
) -> Path:
    """Run the recovery pipeline against an unlearned checkpoint.

    Writes a run directory with the reference images, the adapter checkpoint
    archives, and the training-log CSV.
    """
    out = Path(out)
    model_path = Path(model_path)
    unlearned, model_manifest = load_denoiser(model_path)
    dataset, dataset_sum = load_dataset(out / DATASET_NAME)
    clf, _ = load_classifier(out / CLASSIFIER_NAME)
    sched = _sched(cfg)
    master = cfg.run.master_seed
    concept = int(model_manifest.extra.get("erased_concept", cfg.unlearn.concept))
    method = model_manifest.extra.get("method", "unknown")

    run_dir = out / f"relearn_{_model_stem(model_path)}"
    _require_absent([run_dir / "run.manifest.json"], force)
    run_dir.mkdir(parents=True, exist_ok=True)

    rl = cfg.relearn
    n_infer = cfg.sampling.n_infer_steps
    depth = n_infer - rl.restart_index

    # reference images: supplied, or drawn from the dataset's erased class
    if refs_path is not None:
        arrays, _ = load_checkpoint(Path(refs_path), expected_kind="reference_images")
        refs = torch.from_numpy(arrays["images"])
    else:
        pool = dataset.class_indices(concept)
        rng = np.random.default_rng(derive_seed(master, "relearn", method, concept, "refs"))
        pick = rng.permutation(len(pool))[: rl.n_reference]
        refs = dataset.images[pool[torch.from_numpy(np.ascontiguousarray(pick))]]
    save_checkpoint(run_dir / "refs.npz", kind="reference_images",
                    arrays={"images": refs.numpy()},
                    parents={"dataset": dataset_sum}, config=cfg.to_dict())

    invert_model = unlearned
    if rl.invert_with_original:
        invert_model, _ = load_denoiser(out / BASE_MODEL_NAME)
    cond = unlearned.condition(concept)
    trajectories = [
        invert_image(
            invert_model, Latent(data=refs[i]), cond, sched, depth,
            n_infer_steps=n_infer,
            inversion_scale=cfg.sampling.inversion_guidance_scale,
        )
        for i in range(refs.shape[0])
    ]
    expansion = expand_latents(
        [traj.final for traj in trajectories],
        ExpansionScheme(p_values=tuple(rl.p_values), target_total=rl.target_total),
    )
    train_set = build_training_set(
        expansion, unlearned, cond, rl.restart_index, sched=sched,
        n_infer_steps=n_infer, guidance_scale=cfg.sampling.build_guidance_scale,
    )
    built = torch.stack([lat.data for lat, _ in train_set])
    preds, _ = classify_images(clf, built)
    built_fraction = float((preds == concept).float().mean())

    run = relearn(unlearned, train_set, RelearnConfig(
        rank=rl.rank, beta=rl.beta, steps=rl.steps, batch_size=rl.batch_size,
        lr=rl.lr, checkpoint_every=rl.checkpoint_every,
        seed=derive_seed(master, "relearn", method, concept) % (2**31),
    ), sched)

    parents = {"host_model": model_manifest.checksum, "dataset": dataset_sum}
    for step in run.checkpoint_steps():
        adapter = run.adapter_checkpoints[step]
        adapter.erased_concept = concept
        save_adapter(run_dir / f"adapter_step_{step:05d}.npz", adapter, step,
                     parents=parents, config=cfg.to_dict())
    write_csv(run_dir / "train_log.csv", ["step", "loss"],
              [[s, l] for s, l in run.train_log])
    manifest = {
        "kind": "relearn_run",
        "erased_concept": concept,
        "method": method,
        "host_checksum": run.host_checksum,
        "checkpoint_steps": run.checkpoint_steps(),
        "round_trip_rms": [t.round_trip_rms for t in trajectories],
        "built_set_erased_fraction": built_fraction,
        "expansion_total": expansion.total_count,
        "config": cfg.to_dict(),
    }
    (run_dir / "run.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"[relearn] {run_dir.name}: built_set_erased_fraction={built_fraction:.3f}, "
          f"{len(run.checkpoint_steps())} checkpoints")
    return run_dir


def load_relearn_run(run_dir: Path) -> tuple[RelearnRun, dict]:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "run.manifest.json").read_text())
    checkpoints: dict[int, LoraAdapter] = {}
    for step in manifest["checkpoint_steps"]:
        adapter, _ = load_adapter(run_dir / f"adapter_step_{step:05d}.npz")
        checkpoints[step] = adapter
    log = []
    with open(run_dir / "train_log.csv") as fh:
        for row in csv.DictReader(fh):
            log.append((int(row["step"]), float(row["loss"])))
    rl = manifest["config"]["relearn"]
    run = RelearnRun(
        adapter_checkpoints=checkpoints,
        final_adapter=checkpoints[max(checkpoints)],
        train_log=log,
        config=RelearnConfig(
            rank=rl["rank"], beta=rl["beta"], steps=rl["steps"],
            batch_size=rl["batch_size"], lr=rl["lr"],
            checkpoint_every=rl["checkpoint_every"],
        ),
        host_checksum=manifest["host_checksum"],
    )
    return run, manifest


def cmd_attack(
    cfg: RunConfig,
    out: Path,
    model_path: Path,
    concept: int | None = None,
    adapter_path: Path | None = None,
    n_seeds: int | None = None,
    force: bool = False,
) -> Path:
    """Attack a model checkpoint; append per-seed outcomes to a manifest."""
    out = Path(out)
    model_path = Path(model_path)
    model, model_manifest = load_denoiser(model_path)
    target_model = model
    stem = _model_stem(model_path)
    if adapter_path is not None:
        adapter = adapter_for_model(Path(adapter_path), model)
        target_model = AdaptedDenoiser(model, adapter)
        stem += f"__{_model_stem(Path(adapter_path))}"
    clf, _ = load_classifier(out / CLASSIFIER_NAME)
    sched = _sched(cfg)
    concept = cfg.unlearn.concept if concept is None else int(concept)
    n = cfg.eval.n_prompts if n_seeds is None else int(n_seeds)
    seeds = prompt_seeds(derive_seed(cfg.run.master_seed, "eval", concept), n)

    results = attack_batch(
        target_model, clf, concept, _budget(cfg), seeds,
        sched=sched, **_sampling_kwargs(cfg),
    )
    target_json = out / f"attack_{stem}_c{concept}.json"
    target_csv = out / f"attack_{stem}_c{concept}.csv"
    _require_absent([target_json], force)
    payload = {
        "model": model_manifest.checksum,
        "concept": concept,
        "budget": asdict(_budget(cfg)),
        "post_asr": float(np.mean([r.success for r in results])),
        "results": [
            {
                "seed": r.seed,
                "success": r.success,
                "iterations_used": r.iterations_used,
                "classifier_prob": r.classifier_prob,
                "diverged": r.diverged,
            }
            for r in results
        ],
    }
    target_json.write_text(json.dumps(payload, indent=2, sort_keys=True))
    write_csv(target_csv, ["seed", "success", "iterations_used", "classifier_prob"],
              [[r.seed, int(r.success), r.iterations_used, r.classifier_prob] for r in results])
    print(f"[attack] {stem} concept {concept}: post_asr={payload['post_asr']:.3f}")
    return target_json


def _plain_generator(model, sched, cfg: RunConfig, jobs: int = 1):
    def gen(concept: int, seeds: list[int]) -> torch.Tensor:
        return generate_images(model, concept, seeds, sched=sched,
                               jobs=jobs, **_sampling_kwargs(cfg))
    return gen


def _automemora_generator(unlearned, adapter, w: float, sched, cfg: RunConfig):
    def gen(concept: int, seeds: list[int]) -> torch.Tensor:
        emb = unlearned.condition(concept).embedding
        x_T = prompt_noise(unlearned.latent_shape, seeds)
        with torch.no_grad():
            return automemora_sample_batch(
                unlearned, adapter, x_T, emb.expand(len(seeds), -1), sched,
                cfg.sampling.guidance_scale, w, cfg.sampling.n_infer_steps,
            )
    return gen


def build_eval_report(
    cfg: RunConfig,
    generator,
    concept: int,
    classifier,
    dataset: ConceptDataset,
    base_model,
    sched,
    attack_model=None,
) -> EvalReport:
    """Assemble an EvalReport from a generation function.

    ``attack_model`` enables the post-attack rate (only plain / adapted
    models expose the single-model interface the attack needs).
    """
    master = cfg.run.master_seed
    eval_seed = derive_seed(master, "eval", concept)
    seeds = prompt_seeds(eval_seed, cfg.eval.n_prompts)

    images = generator(concept, seeds)
    preds, probs = classify_images(classifier, images)
    pre_asr = float((preds == concept).float().mean())
    fidelity = float(probs[:, concept].mean())

    post_asr = None
    if attack_model is not None and cfg.eval.with_attack:
        results = attack_batch(attack_model, classifier, concept, _budget(cfg), seeds,
                               sched=sched, **_sampling_kwargs(cfg))
        post_asr = float(np.mean([r.success for r in results]))

    gen_feats, gen_feats_retained = [], []
    data_feats, data_feats_retained = [], []
    for cid in range(dataset.n_concepts):
        fid_seeds = [derive_seed(master, "eval-fid", cid, i)
                     for i in range(cfg.eval.fid_per_class)]
        gf = extract_features(generator(cid, fid_seeds), classifier)
        df = extract_features(dataset.images_of(cid), classifier)
        gen_feats.append(gf)
        data_feats.append(df)
        if cid != concept:
            gen_feats_retained.append(gf)
            data_feats_retained.append(df)
    fid_all = fid(np.concatenate(gen_feats), np.concatenate(data_feats))
    fid_retained = fid(np.concatenate(gen_feats_retained), np.concatenate(data_feats_retained))

    base_images = generate_images(base_model, concept, seeds, sched=sched,
                                  **_sampling_kwargs(cfg))
    cos = cosine_report(images, base_images, classifier)

    return EvalReport(
        pre_asr=pre_asr,
        post_asr=post_asr,
        fid_retained=fid_retained,
        fid_all=fid_all,
        cosine_mean=cos.mean,
        cosine_histogram=cos.histogram,
        n_prompts=cfg.eval.n_prompts,
        seeds=seeds,
        condition_fidelity=fidelity,
    )


def cmd_eval(
    cfg: RunConfig,
    out: Path,
    model_path: Path,
    adapter_path: Path | None = None,
    automemora_w: float | None = None,
    beta_override: float | None = None,
    concept: int | None = None,
    jobs: int = 1,
    force: bool = False,
) -> Path:
    """Evaluate a model (optionally adapted); write CSV + JSON report files.

    With ``automemora_w`` the report carries a second row generated by the
    per-step blend of the unlearned and adapted models' CFG predictions.
    """
    out = Path(out)
    model_path = Path(model_path)
    model, model_manifest = load_denoiser(model_path)
    dataset, _ = load_dataset(out / DATASET_NAME)
    clf, _ = load_classifier(out / CLASSIFIER_NAME)
    base, _ = load_denoiser(out / BASE_MODEL_NAME)
    sched = _sched(cfg)
    concept = cfg.unlearn.concept if concept is None else int(concept)

    stem = _model_stem(model_path)
    adapter = None
    eval_model = model
    if adapter_path is not None:
        adapter = adapter_for_model(Path(adapter_path), model)
        eval_model = AdaptedDenoiser(model, adapter, beta_override=beta_override)
        stem += f"__{_model_stem(Path(adapter_path))}"
        if beta_override is not None:
            stem += f"_beta{beta_override:g}"

    rows = []
    reports: dict[str, EvalReport] = {}
    report = build_eval_report(
        cfg, _plain_generator(eval_model, sched, cfg, jobs=jobs), concept,
        clf, dataset, base, sched, attack_model=eval_model,
    )
    reports["plain"] = report
    if automemora_w is not None:
        if adapter is None:
            raise ValueError("--automemora requires an adapter checkpoint")
        guided = build_eval_report(
            cfg, _automemora_generator(model, adapter, automemora_w, sched, cfg),
            concept, clf, dataset, base, sched, attack_model=None,
        )
        reports[f"automemora_w{automemora_w:g}"] = guided
        stem += f"_automemora{automemora_w:g}"

    header = ["variant", "concept", "pre_asr", "post_asr", "fid_retained", "fid_all",
              "cosine_mean", "condition_fidelity", "n_prompts"]
    for variant, rep in reports.items():
        rows.append([variant, concept, rep.pre_asr, rep.post_asr, rep.fid_retained,
                     rep.fid_all, rep.cosine_mean, rep.condition_fidelity, rep.n_prompts])
    csv_path = out / f"eval_{stem}.csv"
    json_path = out / f"eval_{stem}.json"
    _require_absent([csv_path], force)
    write_csv(csv_path, header, rows)
    json_path.write_text(json.dumps(
        {
            "model": model_manifest.checksum,
            "concept": concept,
            "variants": {
                variant: {
                    "pre_asr": rep.pre_asr,
                    "post_asr": rep.post_asr,
                    "fid_retained": rep.fid_retained,
                    "fid_all": rep.fid_all,
                    "cosine_mean": rep.cosine_mean,
                    "condition_fidelity": rep.condition_fidelity,
                    "cosine_histogram": rep.cosine_histogram.tolist(),
                    "n_prompts": rep.n_prompts,
                    "seeds": rep.seeds,
                }
                for variant, rep in reports.items()
            },
        },
        indent=2, sort_keys=True,
    ))
    for variant, rep in reports.items():
        post = "n/a" if rep.post_asr is None else f"{rep.post_asr:.3f}"
        print(f"[eval] {stem} [{variant}]: pre_asr={rep.pre_asr:.3f} post_asr={post} "
              f"fid_retained={rep.fid_retained:.4f} cosine={rep.cosine_mean:.4f}")
    return csv_path


def cmd_report(cfg: RunConfig, out: Path, run_dir: Path | None = None) -> Path:
    """Recovery curves, forgetting verdicts, cosine histograms, sample grids."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    root = Path(run_dir) if run_dir is not None else out
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    clf, _ = load_classifier(out / CLASSIFIER_NAME)
    sched = _sched(cfg)
    master = cfg.run.master_seed

    # recovery curves + verdicts for every relearn run found
    verdict_rows = []
    curve_paths = []
    for run_path in sorted(root.glob("relearn_*")):
        if not (run_path / "run.manifest.json").exists():
            continue
        run, manifest = load_relearn_run(run_path)
        host_stem = run_path.name.removeprefix("relearn_")
        unlearned, _ = load_denoiser(out / f"{host_stem}.npz")
        concept = int(manifest["erased_concept"])
        curve = recovery_curve(
            unlearned, run, concept, clf, cfg.eval.n_prompts,
            seed=derive_seed(master, "eval", concept),
            sched=sched, method_label=manifest.get("method", host_stem),
            **_sampling_kwargs(cfg),
        )
        verdict = classify_forgetting(curve, cfg.eval.threshold, cfg.eval.horizon)
        verdict_rows.append([run_path.name, manifest.get("method", ""), concept,
                             verdict.mode, verdict.steps_to_threshold,
                             verdict.threshold, verdict.horizon])
        curve_csv = report_dir / f"recovery_{host_stem}.csv"
        write_csv(curve_csv, ["step", "asr"],
                  [[s, v] for s, v in zip(curve.steps, curve.asr_values)])
        curve_paths.append((curve, host_stem))

    if verdict_rows:
        write_csv(report_dir / "verdicts.csv",
                  ["run", "method", "concept", "mode", "steps_to_threshold",
                   "threshold", "horizon"],
                  verdict_rows)
        fig, ax = plt.subplots(figsize=(6, 4))
        for curve, label in curve_paths:
            ax.plot(curve.steps, curve.asr_values, marker="o", label=curve.method_label or label)
        ax.axhline(cfg.eval.threshold, color="gray", linestyle="--", linewidth=1)
        ax.set_xlabel("relearning step")
        ax.set_ylabel("no-attack ASR")
        ax.set_ylim(-0.02, 1.02)
        ax.legend()
        fig.tight_layout()
        fig.savefig(report_dir / "recovery_curves.png", dpi=120)
        plt.close(fig)

    # cosine histograms from eval reports
    for eval_json in sorted(root.glob("eval_*.json")):
        payload = json.loads(eval_json.read_text())
        for variant, rep in payload["variants"].items():
            counts = rep["cosine_histogram"]
            edges = np.linspace(-1.0, 1.0, len(counts) + 1)
            fig, ax = plt.subplots(figsize=(5, 3))
            ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge")
            ax.set_xlabel("cosine similarity to base-model outputs")
            ax.set_ylabel("count")
            fig.tight_layout()
            name = eval_json.stem + (f"_{variant}" if len(payload["variants"]) > 1 else "")
            fig.savefig(report_dir / f"cosine_{name}.png", dpi=120)
            plt.close(fig)

    # sample grids for every model checkpoint in the run root
    for model_file in sorted(root.glob("*.npz")):
        try:
            model, manifest = load_denoiser(model_file)
        except CheckpointError:
            continue
        if manifest.kind not in ("base_model", "unlearned_model"):
            continue
        grid_seed = derive_seed(master, "report-grid")
        n_show = 8
        fig, axes = plt.subplots(model.n_concepts, n_show,
                                 figsize=(n_show * 1.1, model.n_concepts * 1.1))
        for cid in range(model.n_concepts):
            seeds = [derive_seed(grid_seed, cid, i) for i in range(n_show)]
            images = generate_images(model, cid, seeds, sched=sched, **_sampling_kwargs(cfg))
            for i in range(n_show):
                ax = axes[cid][i] if model.n_concepts > 1 else axes[i]
                ax.imshow(images[i, 0].clamp(-1, 1), cmap="gray", vmin=-1, vmax=1)
                ax.set_xticks([])
                ax.set_yticks([])
        fig.tight_layout()
        fig.savefig(report_dir / f"samples_{model_file.stem}.png", dpi=120)
        plt.close(fig)

    print(f"[report] wrote tables and plots under {report_dir}")
    return report_dir
