"""Training orchestration: arm selection, the three-path step, AdamW,
the fold/epoch loop, metrics logs, and resumable checkpoints.

Every source of randomness is a purpose-tagged stream derived from the
run seed (parameter init per path, sampler per cell and epoch,
augmentation per sample and epoch), so arms that share a seed see
identical data order and identical common-path initialization.  That
makes cross-arm comparisons controlled and makes two runs of the same
config byte-identical.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint, data, evaluation, layers, losses
from .config import ARM_NAMES, ConfigError, ExperimentConfig
from .data import AugmentPolicy, BalancedBatchSampler, ClassBalancedSampler
from .losses import EmbeddingBatch, LossBreakdown, LossWeights
from .seeding import derive_rng, derive_seed

__all__ = [
    "TrainingError", "ArmSpec", "ARMS", "Batch",
    "adamw_update", "triad_step", "train", "resolve_run_dir",
    "load_dataset", "generator_config", "backbone_spec_from_config",
]


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss, inconsistent setup)."""


@dataclass(frozen=True)
class ArmSpec:
    """What one comparison arm trains: which paths exist, which data they
    see, and which loss families are active."""

    name: str
    paths: tuple[str, ...]
    eval_path: str
    domains: str                   # "P" | "A" | "both"
    contrastive: bool
    embedding: bool


ARMS = {
    "pediatric_only": ArmSpec("pediatric_only", ("pediatric",), "pediatric",
                              "P", False, False),
    "adult_only": ArmSpec("adult_only", ("adult",), "adult", "A",
                          False, False),
    "joint": ArmSpec("joint", ("common",), "common", "both", False, False),
    "pediatric_only_contrastive": ArmSpec(
        "pediatric_only_contrastive", ("pediatric",), "pediatric", "P",
        True, False),
    "adult_only_contrastive": ArmSpec(
        "adult_only_contrastive", ("adult",), "adult", "A", True, False),
    "joint_contrastive": ArmSpec("joint_contrastive", ("common",), "common",
                                 "both", True, False),
    "triad_full": ArmSpec("triad_full", ("common", "pediatric", "adult"),
                          "common", "both", True, True),
}

#: Breakdown field that records each path's classification / contrastive term.
_FOCAL_KEY = {"common": "focal_c", "pediatric": "focal_p", "adult": "focal_a"}
_CONT_KEY = {"common": "cont_c", "pediatric": "cont_p", "adult": "cont_a"}


@dataclass
class Batch:
    """One step's worth of model input for a single domain or path."""

    images: np.ndarray             # (B, C, H, W) or (B, d)
    labels: np.ndarray             # (B,)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adamw_update(pset: layers.ParameterSet, lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam step over a parameter set, in place.

    The decay term and the adaptive term are both taken from the incoming
    parameter value: theta <- theta - lr*wd*theta - lr*m_hat/(sqrt(v_hat)+eps).
    A missing gradient counts as zero.
    """
    pset.step += 1
    t = pset.step
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for name, param in pset.params.items():
        g = param.grad if param.grad is not None else np.zeros_like(param.data)
        m = pset.opt_m[name]
        v = pset.opt_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        param.data = (param.data - lr * weight_decay * param.data
                      - lr * m_hat / (np.sqrt(v_hat) + eps))


# ---------------------------------------------------------------------------
# the per-step loss computation
# ---------------------------------------------------------------------------

def _path_terms(pset, spec, batch: Batch, cfg: ExperimentConfig,
                want_contrastive: bool, want_embedding: bool):
    """Forward one path: focal term, optional contrastive term, optional
    classwise means.  Returns (focal, contrastive|None, means|None)."""
    h = layers.backbone_forward(pset, spec, batch.images)
    logits = layers.classifier_forward(pset, spec, h)
    focal = losses.focal_loss(logits, batch.labels.astype(np.float64),
                              cfg.gamma, cfg.alpha)
    cont = None
    means = None
    if want_contrastive or want_embedding:
        z = layers.projection_forward(pset, spec, h)
        embedded = EmbeddingBatch(z, batch.labels, pset.name)
        if want_contrastive:
            cont = losses.multi_positive_contrastive_loss(embedded, cfg.tau)
        if want_embedding:
            means = losses.classwise_mean_embeddings(embedded)
    return focal, cont, means


def _arm_components(arm: ArmSpec, psets: dict, spec, cfg: ExperimentConfig,
                    batches: dict[str, Batch]) -> dict:
    """Loss components for one step of the given arm.

    ``batches`` maps path name to its input batch; the common path's batch
    is the concatenation of the pediatric and adult halves.
    """
    components: dict = {}
    means: dict = {}
    for path in arm.paths:
        focal, cont, cw = _path_terms(
            psets[path], spec, batches[path], cfg,
            want_contrastive=arm.contrastive, want_embedding=arm.embedding)
        components[_FOCAL_KEY[path]] = focal
        if cont is not None:
            components[_CONT_KEY[path]] = cont
        if cw is not None:
            means[path] = cw
    if arm.embedding:
        components["emb_sim"] = losses.embedding_similarity_loss(
            means["common"], means["pediatric"], means["adult"],
            mixed_sign=cfg.emb_sim_mixed_sign)
        components["emb_dissim"] = losses.embedding_dissimilarity_loss(
            means["common"])
    return components


def _weights(cfg: ExperimentConfig) -> LossWeights:
    return LossWeights(lambda_cls=cfg.lambda_cls, lambda_cont=cfg.lambda_cont,
                       lambda_emb=cfg.lambda_emb)


def _check_finite(components: dict, where: str) -> None:
    for name, term in components.items():
        if term is not None and not np.isfinite(term.data).all():
            raise TrainingError(
                f"non-finite loss component {name}={float(term.data)!r} "
                f"at {where}")


def _arm_batches(arm: ArmSpec, batch_p: Batch | None,
                 batch_a: Batch | None) -> dict[str, Batch]:
    batches: dict[str, Batch] = {}
    if "pediatric" in arm.paths:
        batches["pediatric"] = batch_p
    if "adult" in arm.paths:
        batches["adult"] = batch_a
    if "common" in arm.paths:
        if arm.domains == "both":
            batches["common"] = Batch(
                images=np.concatenate([batch_p.images, batch_a.images]),
                labels=np.concatenate([batch_p.labels, batch_a.labels]))
        else:
            batches["common"] = batch_p if arm.domains == "P" else batch_a
    return batches


def _step(arm: ArmSpec, psets: dict, spec, cfg: ExperimentConfig,
          batches: dict[str, Batch], where: str) -> LossBreakdown:
    components = _arm_components(arm, psets, spec, cfg, batches)
    _check_finite(components, where)
    breakdown, total = losses.total_loss(components, _weights(cfg))
    for path in arm.paths:
        psets[path].zero_grad()
    if total.requires_grad:
        total.backward()
    for path in arm.paths:
        adamw_update(psets[path], cfg.lr, cfg.weight_decay)
    return breakdown


def triad_step(batch_p: Batch, batch_a: Batch, params_c, params_p, params_a,
               cfg: ExperimentConfig) -> LossBreakdown:
    """One full three-path update from a balanced pediatric/adult pair.

    The common path consumes the concatenation of both halves; each
    auxiliary path consumes its own half.  All three parameter sets are
    updated in place from the total loss gradient.
    """
    arm = ARMS["triad_full"]
    psets = {"common": params_c, "pediatric": params_p, "adult": params_a}
    spec = backbone_spec_from_config(cfg, batch_p.images.shape)
    batches = _arm_batches(arm, batch_p, batch_a)
    return _step(arm, psets, spec, cfg, batches, where="triad_step")


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

def resolve_run_dir(cfg: ExperimentConfig) -> str:
    if cfg.run_dir:
        return cfg.run_dir
    root = os.environ.get("TRIAD_RUN_DIR", "runs")
    return os.path.join(root, f"{cfg.arm}-seed{cfg.seed}")


def generator_config(cfg: ExperimentConfig) -> data.GeneratorConfig:
    """Synthetic-data settings drawn from an experiment config."""
    return data.GeneratorConfig(
        n_per_cell=cfg.gen_n_per_cell, test_per_cell=cfg.gen_test_per_cell,
        mode=cfg.gen_mode, shift=cfg.gen_shift,
        separation=cfg.gen_separation, noise=cfg.gen_noise,
        amp_spread=cfg.gen_amp_spread,
        seed=cfg.resolved_data_seed, canvas_size=cfg.gen_canvas,
        vector_dim=cfg.gen_vector_dim)


def load_dataset(cfg: ExperimentConfig,
                 data_dir: str | None = None) -> data.ProcessedDataset:
    """Materialize the configured data source as a processed dataset.

    With ``data_manifest`` set, that manifest is ingested; otherwise a
    synthetic dataset is generated under ``data_dir`` (reused if its
    manifest already exists, since generation is deterministic).
    """
    if cfg.data_manifest:
        manifest = cfg.data_manifest
    else:
        if data_dir is None:
            raise ConfigError("no data_manifest and no directory to "
                              "generate into")
        manifest = os.path.join(data_dir, "manifest.txt")
        if not os.path.exists(manifest):
            manifest = data.generate_synthetic(generator_config(cfg),
                                               data_dir)
    raw = data.ingest_manifest(manifest)
    expected_mode = "conv" if raw.mode == "image" else "vector"
    if cfg.backbone != expected_mode:
        raise ConfigError(
            f"backbone {cfg.backbone!r} cannot consume {raw.mode!r} data")
    return data.preprocess(raw, target_size=cfg.image_size,
                           pad_fraction=cfg.pad_fraction, mean=cfg.norm_mean,
                           std=cfg.norm_std)


def backbone_spec_from_config(cfg: ExperimentConfig,
                              input_shape: tuple[int, ...]
                              ) -> layers.BackboneSpec:
    """Backbone spec matching the config and a sample input shape
    (either (B, C, H, W) for conv mode or (B, d) for vector mode)."""
    if cfg.backbone == "conv":
        return layers.BackboneSpec(
            mode="conv", input_size=input_shape[-1],
            in_channels=input_shape[1] if len(input_shape) == 4 else 1,
            embed_dim=cfg.embed_dim)
    return layers.BackboneSpec(
        mode="vector", vector_dim=input_shape[-1], hidden=cfg.hidden_dim,
        embed_dim=cfg.embed_dim)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


_STEP_HEADER = ("step,epoch,fold," + ",".join(LossBreakdown.FIELDS))
_EPOCH_HEADER = "epoch,fold,val_auroc,val_alignment"


def _log_order(fold_column: int):
    def key(row: str):
        parts = row.split(",")
        return (int(parts[fold_column]), *(int(p) for p
                                           in parts[:fold_column]))
    return key


def _write_logs(run_dir: str, step_rows: list[str],
                epoch_rows: list[str]) -> None:
    # canonical (fold, epoch, step) order keeps the files byte-identical
    # no matter how many resumes produced them
    step_rows.sort(key=_log_order(2))
    epoch_rows.sort(key=_log_order(1))
    _atomic_write(os.path.join(run_dir, "steps.csv"),
                  "\n".join([_STEP_HEADER] + step_rows) + "\n")
    _atomic_write(os.path.join(run_dir, "epochs.csv"),
                  "\n".join([_EPOCH_HEADER] + epoch_rows) + "\n")


def _read_log_rows(path: str) -> list[str]:
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        lines = fh.read().splitlines()
    return lines[1:] if lines else []


def _augmented(dataset: data.ProcessedDataset, indices: np.ndarray,
               cfg: ExperimentConfig, policy: AugmentPolicy, fold: int,
               epoch: int) -> Batch:
    images = dataset.inputs(indices)
    labels = dataset.labels[indices]
    if dataset.mode == "image" and not policy.is_identity:
        out = np.empty_like(images)
        for row, idx in enumerate(indices):
            rng = derive_rng(cfg.seed, "aug", fold, epoch, dataset.ids[idx])
            out[row] = data.augment(images[row], policy, rng)
        images = out
    return Batch(images=images, labels=labels)


def _fold_indices(dataset: data.ProcessedDataset, cfg: ExperimentConfig):
    """Per-domain train-split fold assignments.

    Validation is always the held-out pediatric fold (the transfer
    target); the same-index adult fold sits out of training so fold
    training sizes stay comparable across arms.  With folds=1 there is
    no held-out fold and validation falls back to the full pediatric
    train split (resubstitution).
    """
    splits = {}
    for domain in data.DOMAINS:
        idx = dataset.indices(split="train", domain=domain)
        if idx.size == 0:
            raise TrainingError(f"no train samples for domain {domain}")
        assignment = data.stratified_kfold(
            dataset.labels[idx], cfg.folds,
            derive_seed(cfg.seed, "folds", domain))
        splits[domain] = (idx, assignment)
    return splits


def _fold_split(splits, domain: str, fold: int, folds: int):
    idx, assignment = splits[domain]
    if folds == 1:
        return idx, idx
    return idx[assignment.train_mask(fold)], idx[assignment.val_mask(fold)]


def train(cfg: ExperimentConfig,
          dataset: data.ProcessedDataset | None = None) -> str:
    """Run one arm over all folds; returns the run directory.

    The run directory holds ``config.txt`` (the resolved snapshot),
    ``steps.csv`` / ``epochs.csv`` metrics logs, and per-fold best/last
    checkpoints.  Interrupted runs resume from the last checkpoint of the
    unfinished fold; finished folds are detected and skipped.
    """
    from .config import save_config  # local import keeps module load light

    arm = ARMS[cfg.arm]
    run_dir = resolve_run_dir(cfg)
    os.makedirs(run_dir, exist_ok=True)
    if dataset is None:
        dataset = load_dataset(cfg, data_dir=os.path.join(run_dir, "data"))
    save_config(cfg.replace(run_dir=run_dir),
                os.path.join(run_dir, "config.txt"))

    spec = backbone_spec_from_config(
        cfg, (1,) + tuple(dataset.input_shape))
    policy = AugmentPolicy(flip_prob=cfg.aug_flip,
                           brightness=cfg.aug_brightness,
                           contrast=cfg.aug_contrast)
    splits = _fold_indices(dataset, cfg)

    step_rows = _read_log_rows(os.path.join(run_dir, "steps.csv"))
    epoch_rows = _read_log_rows(os.path.join(run_dir, "epochs.csv"))

    for fold in range(cfg.folds):
        train_p, val_p = _fold_split(splits, "P", fold, cfg.folds)
        train_a, val_a = _fold_split(splits, "A", fold, cfg.folds)

        # every path starts from the same draw so the three embedding
        # spaces share a coordinate frame at step 0, mirroring a shared
        # pretrained starting point; arms then differ only in losses
        psets = {path: layers.init_path_params(
            spec, derive_rng(cfg.seed, "init", fold), path)
            for path in arm.paths}

        if arm.domains == "both":
            sampler = BalancedBatchSampler(
                dataset.labels[train_p], dataset.labels[train_a],
                cfg.batch_size, derive_seed(cfg.seed, "sampler", fold))
        elif arm.domains == "P":
            sampler = ClassBalancedSampler(
                dataset.labels[train_p], cfg.batch_size,
                derive_seed(cfg.seed, "sampler", fold), "P")
        else:
            sampler = ClassBalancedSampler(
                dataset.labels[train_a], cfg.batch_size,
                derive_seed(cfg.seed, "sampler", fold), "A")

        last_path = os.path.join(run_dir, f"last-fold{fold}.ckpt")
        best_path = os.path.join(run_dir, f"best-fold{fold}.ckpt")
        start_epoch = 0
        best_auroc = -1.0
        best_epoch = -1.0
        if os.path.exists(last_path):
            meta = checkpoint.load_checkpoint(last_path, psets.values())
            start_epoch = int(meta.get("epoch", 0.0))
            best_auroc = float(meta.get("best_auroc", -1.0))
            best_epoch = float(meta.get("best_epoch", -1.0))
        # drop rows the fold will regenerate; unconditional because a crash
        # can land between the log write and the checkpoint write
        step_rows = [r for r in step_rows
                     if not _row_beyond(r, fold, start_epoch, 2)]
        epoch_rows = [r for r in epoch_rows
                      if not _row_beyond(r, fold, start_epoch, 1)]

        if cfg.epochs == 0 and not os.path.exists(last_path):
            meta = {"epoch": 0.0, "best_auroc": -1.0, "best_epoch": -1.0}
            checkpoint.save_checkpoint(last_path, psets.values(), meta)
            checkpoint.save_checkpoint(best_path, psets.values(), meta)

        for epoch in range(start_epoch, cfg.epochs):
            for step_index, drawn in enumerate(sampler.epoch(epoch)):
                if arm.domains == "both":
                    idx_p, idx_a = drawn
                    batch_p = _augmented(dataset, train_p[idx_p], cfg,
                                         policy, fold, epoch)
                    batch_a = _augmented(dataset, train_a[idx_a], cfg,
                                         policy, fold, epoch)
                elif arm.domains == "P":
                    batch_p = _augmented(dataset, train_p[drawn], cfg,
                                         policy, fold, epoch)
                    batch_a = None
                else:
                    batch_a = _augmented(dataset, train_a[drawn], cfg,
                                         policy, fold, epoch)
                    batch_p = None
                where = (f"fold {fold} epoch {epoch} step {step_index}")
                batches = _arm_batches(arm, batch_p, batch_a)
                breakdown = _step(arm, psets, spec, cfg, batches, where)
                step = epoch * sampler.steps_per_epoch + step_index
                step_rows.append(
                    f"{step},{epoch},{fold},"
                    + ",".join(repr(v) for v in breakdown.as_row()))

            scores = evaluation.predict_scores(psets[arm.eval_path], spec,
                                               dataset.inputs(val_p))
            val_auroc = evaluation.auroc(scores, dataset.labels[val_p])
            if arm.domains == "both":
                # held-out folds of both domains; single-domain arms skip
                # this so they never read the other domain's inputs
                val_align = evaluation.domain_alignment(
                    psets[arm.eval_path], spec, dataset,
                    np.concatenate([val_p, val_a]))
            else:
                val_align = math.nan
            epoch_rows.append(f"{epoch},{fold},{val_auroc!r},{val_align!r}")

            # logs first, best next, last checkpoint as the commit marker:
            # a crash anywhere leaves a state the next run regenerates
            _write_logs(run_dir, step_rows, epoch_rows)
            if val_auroc > best_auroc:
                best_auroc = val_auroc
                best_epoch = float(epoch)
            meta = {"epoch": float(epoch + 1), "best_auroc": best_auroc,
                    "best_epoch": best_epoch}
            if best_epoch == float(epoch):
                checkpoint.save_checkpoint(best_path, psets.values(), meta)
            checkpoint.save_checkpoint(last_path, psets.values(), meta)

    _write_logs(run_dir, step_rows, epoch_rows)
    return run_dir


def _row_beyond(row: str, fold: int, start_epoch: int,
                fold_column: int) -> bool:
    """True for CSV rows of ``fold`` at or past ``start_epoch`` (stale rows
    a resumed fold will write again)."""
    parts = row.split(",")
    try:
        row_fold = int(parts[fold_column])
        row_epoch = int(parts[fold_column - 1])
    except (ValueError, IndexError):
        return True
    return row_fold == fold and row_epoch >= start_epoch


assert set(ARMS) == set(ARM_NAMES)
