"""Evaluation: AUROC, embedding-alignment diagnostics, and the arm ladder.

``auroc`` is the rank-based estimator with mid-rank tie handling; it is
exactly (not approximately) equal to pair counting, which the test suite
verifies against a brute-force O(n^2) oracle.

``ablation_suite`` trains every requested arm over shared per-seed data,
scores each fold's best checkpoint on the pediatric test split, and
reports per-fold values, seed means, and alignment diagnostics as CSV
plus a text summary.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, data, layers
from .autodiff import Tensor
from .config import ExperimentConfig
from .seeding import derive_rng

__all__ = [
    "EvalError", "auroc", "predict_scores", "embed_inputs",
    "classwise_means", "AlignmentReport", "alignment_report",
    "domain_alignment", "ArmSeedResult", "AblationReport", "ablation_suite",
    "load_arm_checkpoint", "write_plots", "DEFAULT_ARMS", "LADDER_ARMS",
]

#: Arms forming the headline comparison ladder, weakest expected first.
LADDER_ARMS = ("adult_only", "pediatric_only", "joint", "joint_contrastive",
               "triad_full")

#: Everything the report covers by default (ladder plus the single-domain
#: contrastive variants).
DEFAULT_ARMS = ("adult_only", "pediatric_only", "joint",
                "adult_only_contrastive", "pediatric_only_contrastive",
                "joint_contrastive", "triad_full")


class EvalError(ValueError):
    """Invalid evaluation input."""


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------

def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a positive outscores a negative, ties counted half.

    Computed from mid-ranks; every intermediate is a half-integer well
    inside exact float range, so the result matches direct pair counting
    bit for bit.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise EvalError(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise EvalError("labels must be binary")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("AUROC undefined: need at least one positive and "
                        "one negative")
    _, inverse, counts = np.unique(scores, return_inverse=True,
                                   return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    mid = (starts + 1 + ends) / 2.0        # average rank of each tie group
    ranks = mid[inverse]
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# model application (no gradients)
# ---------------------------------------------------------------------------

_CHUNK = 256


def predict_scores(pset: layers.ParameterSet, spec: layers.BackboneSpec,
                   inputs: np.ndarray) -> np.ndarray:
    """Sigmoid classifier scores for a batch of inputs, chunked."""
    parts = []
    for lo in range(0, inputs.shape[0], _CHUNK):
        x = Tensor(inputs[lo:lo + _CHUNK])
        h = layers.backbone_forward(pset, spec, x)
        logits = layers.classifier_forward(pset, spec, h)
        parts.append(logits.sigmoid().data)
    return np.concatenate(parts)


def embed_inputs(pset: layers.ParameterSet, spec: layers.BackboneSpec,
                 inputs: np.ndarray) -> np.ndarray:
    """Unit-norm projection embeddings for a batch of inputs, chunked."""
    parts = []
    for lo in range(0, inputs.shape[0], _CHUNK):
        x = Tensor(inputs[lo:lo + _CHUNK])
        h = layers.backbone_forward(pset, spec, x)
        parts.append(layers.projection_forward(pset, spec, h).data)
    return np.concatenate(parts)


def classwise_means(z: np.ndarray, labels: np.ndarray,
                    num_classes: int = 2) -> list[np.ndarray | None]:
    """Plain per-class mean vectors; ``None`` for absent classes."""
    out: list[np.ndarray | None] = []
    for cls in range(num_classes):
        members = z[np.asarray(labels) == cls]
        out.append(members.mean(axis=0) if members.shape[0] else None)
    return out


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return math.nan
    # clamp the rounding spill so reported values stay inside [-1, 1]
    return float(np.clip(float(a @ b) / denom, -1.0, 1.0))


# ---------------------------------------------------------------------------
# alignment diagnostics
# ---------------------------------------------------------------------------

@dataclass
class AlignmentReport:
    """Per-class cosine similarities between the three paths' classwise
    means, plus the common path's interclass similarity matrix.  Entries
    are ``None``/NaN where a class is absent."""

    sim_cp: list[float | None]
    sim_ca: list[float | None]
    sim_pa: list[float | None]
    interclass: np.ndarray         # C x C, NaN where undefined

    @property
    def mean_cross(self) -> float:
        """Mean of the common-vs-auxiliary entries over available classes."""
        live = [v for v in self.sim_cp + self.sim_ca if v is not None]
        return float(np.mean(live)) if live else math.nan


def alignment_report(w_c: list, w_p: list, w_a: list) -> AlignmentReport:
    """Cosine similarities between classwise means of the three paths.

    Each argument is a per-class list of vectors (``None`` marks an
    absent class, and any pair involving one is masked).
    """
    if not len(w_c) == len(w_p) == len(w_a):
        raise EvalError("classwise mean lists must have equal length")

    def pairwise(left, right):
        return [None if left[c] is None or right[c] is None
                else _cosine(left[c], right[c]) for c in range(len(w_c))]

    n = len(w_c)
    inter = np.full((n, n), math.nan)
    for i in range(n):
        for j in range(n):
            if w_c[i] is not None and w_c[j] is not None:
                inter[i, j] = _cosine(w_c[i], w_c[j])
    return AlignmentReport(sim_cp=pairwise(w_c, w_p),
                           sim_ca=pairwise(w_c, w_a),
                           sim_pa=pairwise(w_p, w_a), interclass=inter)


def domain_alignment(pset: layers.ParameterSet, spec: layers.BackboneSpec,
                     dataset: data.ProcessedDataset,
                     indices: np.ndarray) -> float:
    """Mean cosine between overall and per-domain classwise means, all
    embedded through one path.

    This is the one alignment notion computable for every arm (single-path
    arms included), so cross-arm comparisons use it: higher means the
    path's class clusters look the same regardless of domain.
    """
    indices = np.asarray(indices)
    z = embed_inputs(pset, spec, dataset.inputs(indices))
    labels = dataset.labels[indices]
    domains = dataset.domains[indices]
    w_c = classwise_means(z, labels)
    w_p = classwise_means(z[domains == "P"], labels[domains == "P"])
    w_a = classwise_means(z[domains == "A"], labels[domains == "A"])
    return alignment_report(w_c, w_p, w_a).mean_cross


# ---------------------------------------------------------------------------
# the arm ladder
# ---------------------------------------------------------------------------

def load_arm_checkpoint(run_dir: str, arm_name: str,
                        spec: layers.BackboneSpec, fold: int,
                        kind: str = "best") -> dict[str, layers.ParameterSet]:
    """Rebuild an arm's parameter sets from a saved fold checkpoint."""
    from .training import ARMS
    arm = ARMS[arm_name]
    psets = {path: layers.init_path_params(spec, derive_rng(0, "load", path),
                                           path)
             for path in arm.paths}
    path = os.path.join(run_dir, f"{kind}-fold{fold}.ckpt")
    checkpoint.load_checkpoint(path, psets.values())
    return psets


@dataclass
class ArmSeedResult:
    arm: str
    seed: int
    fold_aurocs: list[float] = field(default_factory=list)
    fold_alignments: list[float] = field(default_factory=list)
    error: str = ""

    @property
    def mean_auroc(self) -> float:
        return float(np.mean(self.fold_aurocs)) if self.fold_aurocs \
            else math.nan

    @property
    def mean_alignment(self) -> float:
        live = [a for a in self.fold_alignments if not math.isnan(a)]
        return float(np.mean(live)) if live else math.nan


@dataclass
class AblationReport:
    rows: list[ArmSeedResult]
    arms: list[str]
    seeds: list[int]

    def arm_rows(self, arm: str) -> list[ArmSeedResult]:
        return [r for r in self.rows if r.arm == arm and not r.error]

    def arm_mean_auroc(self, arm: str) -> float:
        rows = self.arm_rows(arm)
        return float(np.mean([r.mean_auroc for r in rows])) if rows \
            else math.nan

    def arm_mean_alignment(self, arm: str) -> float:
        rows = self.arm_rows(arm)
        live = [r.mean_alignment for r in rows
                if not math.isnan(r.mean_alignment)]
        return float(np.mean(live)) if live else math.nan

    def to_csv(self) -> str:
        lines = ["arm,seed,fold,test_auroc,alignment,error"]
        for row in self.rows:
            if row.error:
                err = row.error.replace(",", ";").replace("\n", " ")
                lines.append(f"{row.arm},{row.seed},,,,{err}")
                continue
            for fold, (score, align) in enumerate(zip(row.fold_aurocs,
                                                      row.fold_alignments)):
                lines.append(f"{row.arm},{row.seed},{fold},{score!r},"
                             f"{align!r},")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = ["arm ladder on the pediatric test split "
                 f"({len(self.seeds)} seed(s))", ""]
        width = max(len(a) for a in self.arms)
        for arm in self.arms:
            rows = self.arm_rows(arm)
            failed = [r for r in self.rows if r.arm == arm and r.error]
            if not rows:
                reason = failed[0].error if failed else "no runs"
                lines.append(f"{arm:<{width}}  FAILED: {reason}")
                continue
            per_seed = ", ".join(f"{r.mean_auroc:.4f}" for r in rows)
            mean = self.arm_mean_auroc(arm)
            align = self.arm_mean_alignment(arm)
            align_text = "" if math.isnan(align) else f"  align {align:.4f}"
            gap = f" ({len(failed)} seed(s) failed)" if failed else ""
            lines.append(f"{arm:<{width}}  mean {mean:.4f}{align_text}  "
                         f"per-seed [{per_seed}]{gap}")
        return "\n".join(lines) + "\n"


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def ablation_suite(base: ExperimentConfig, seeds: list[int], suite_dir: str,
                   arms: tuple[str, ...] = DEFAULT_ARMS,
                   progress=None) -> AblationReport:
    """Train and score every (arm, seed) pair on shared per-seed data.

    Each seed gets one generated dataset reused by all arms, so arms are
    compared on identical samples.  A failing arm is recorded and the
    suite continues.  Writes ``report.csv`` and ``report.txt`` under
    ``suite_dir`` and returns the report.
    """
    from . import training

    os.makedirs(suite_dir, exist_ok=True)
    rows: list[ArmSeedResult] = []
    for seed in seeds:
        cfg_seed = base.replace(seed=seed, run_dir="")
        data_dir = os.path.join(
            suite_dir, f"data-seed{cfg_seed.resolved_data_seed}")
        dataset = training.load_dataset(cfg_seed, data_dir=data_dir)
        test_p = dataset.indices(split="test", domain="P")
        test_all = dataset.indices(split="test")
        if test_p.size == 0:
            raise EvalError("suite needs a pediatric test split "
                            "(generate with test_per_cell > 0)")
        spec = training.backbone_spec_from_config(
            cfg_seed, (1,) + tuple(dataset.input_shape))

        for arm_name in arms:
            if progress is not None:
                progress(f"seed {seed} arm {arm_name}")
            row = ArmSeedResult(arm=arm_name, seed=seed)
            rows.append(row)
            cfg = cfg_seed.replace(
                arm=arm_name,
                run_dir=os.path.join(suite_dir,
                                     f"runs/{arm_name}-seed{seed}"))
            try:
                run_dir = training.train(cfg, dataset=dataset)
                for fold in range(cfg.folds):
                    psets = load_arm_checkpoint(run_dir, arm_name, spec,
                                                fold, kind="best")
                    eval_pset = psets[training.ARMS[arm_name].eval_path]
                    scores = predict_scores(eval_pset, spec,
                                            dataset.inputs(test_p))
                    row.fold_aurocs.append(
                        auroc(scores, dataset.labels[test_p]))
                    row.fold_alignments.append(
                        domain_alignment(eval_pset, spec, dataset, test_all))
                    _atomic_write(
                        os.path.join(run_dir, f"test-scores-fold{fold}.csv"),
                        "id,score,label\n" + "\n".join(
                            f"{dataset.ids[i]},{float(s)!r},"
                            f"{dataset.labels[i]}"
                            for i, s in zip(test_p, scores)) + "\n")
            except Exception as exc:       # record and continue the suite
                row.error = f"{type(exc).__name__}: {exc}"

    report = AblationReport(rows=rows, arms=list(arms), seeds=list(seeds))
    _atomic_write(os.path.join(suite_dir, "report.csv"), report.to_csv())
    _atomic_write(os.path.join(suite_dir, "report.txt"), report.to_text())
    return report


# ---------------------------------------------------------------------------
# optional plots
# ---------------------------------------------------------------------------

def write_plots(suite_dir: str, report: AblationReport) -> list[str]:
    """Render SVG plots from a finished suite's on-disk artifacts.

    Needs matplotlib (an optional extra); raises ``EvalError`` if it is
    not installed.  Uses the first seed's runs.
    """
    try:
        import matplotlib
        matplotlib.use("svg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise EvalError("plots require matplotlib "
                        "(pip install 'triad[plots]')") from None

    seed = report.seeds[0]
    written = []

    def run_dir(arm):
        return os.path.join(suite_dir, f"runs/{arm}-seed{seed}")

    # ROC curves per arm (fold 0 of the first seed)
    fig, ax = plt.subplots(figsize=(5, 4))
    for arm in report.arms:
        path = os.path.join(run_dir(arm), "test-scores-fold0.csv")
        if not os.path.exists(path):
            continue
        rows = [line.split(",") for line
                in open(path).read().splitlines()[1:]]
        scores = np.array([float(r[1]) for r in rows])
        labels = np.array([int(r[2]) for r in rows])
        order = np.argsort(-scores, kind="mergesort")
        tp = np.cumsum(labels[order] == 1) / max((labels == 1).sum(), 1)
        fp = np.cumsum(labels[order] == 0) / max((labels == 0).sum(), 1)
        ax.plot(np.concatenate([[0.0], fp]), np.concatenate([[0.0], tp]),
                label=arm, linewidth=1.2)
    ax.plot([0, 1], [0, 1], linestyle=":", color="gray", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(fontsize=7)
    out = os.path.join(suite_dir, "roc-curves.svg")
    fig.savefig(out, bbox_inches="tight")
    plt.close(fig)
    written.append(out)

    # loss and alignment trajectories from the run logs
    for name, column, fname in (("total loss", "total", "loss-curves.svg"),
                                ("validation AUROC", "val_auroc",
                                 "val-auroc.svg"),
                                ("validation alignment", "val_alignment",
                                 "alignment-curves.svg")):
        fig, ax = plt.subplots(figsize=(5, 4))
        drew = False
        for arm in report.arms:
            log = "steps.csv" if column == "total" else "epochs.csv"
            path = os.path.join(run_dir(arm), log)
            if not os.path.exists(path):
                continue
            lines = open(path).read().splitlines()
            header = lines[0].split(",")
            if column not in header:
                continue
            col = header.index(column)
            fold_col = header.index("fold")
            values = [(r.split(",")) for r in lines[1:]]
            ys = np.array([float(r[col]) for r in values
                           if r[fold_col] == "0"])
            if ys.size == 0 or np.isnan(ys).all():
                continue
            ax.plot(np.arange(ys.size), ys, label=arm, linewidth=1.0)
            drew = True
        ax.set_xlabel("step" if column == "total" else "epoch")
        ax.set_ylabel(name)
        if drew:
            ax.legend(fontsize=7)
        out = os.path.join(suite_dir, fname)
        fig.savefig(out, bbox_inches="tight")
        plt.close(fig)
        written.append(out)
    return written
