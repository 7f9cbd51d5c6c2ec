"""Loss functions for the three-path trainer.

* multi-positive contrastive loss: cross-entropy between a uniform
  ground-truth match distribution and a temperature-scaled softmax over
  candidate similarities, averaged over anchors that have positives;
* focal classification loss over per-path binary logits;
* classwise embedding similarity / dissimilarity losses tying the three
  paths' per-class mean embeddings together;
* the weighted total with a named breakdown.

``contrastive_distribution`` / ``match_distribution`` / ``cross_entropy``
are plain-NumPy single-anchor building blocks.  They double as the
independent oracle for the vectorized, differentiable
``multi_positive_contrastive_loss``, so they must stay loop-based and
graph-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor

__all__ = [
    "LossInputError", "NoPositivesError", "NoValidAnchorsError",
    "EmbeddingBatch", "ClasswiseEmbeddings", "LossBreakdown", "LossWeights",
    "contrastive_distribution", "match_distribution", "cross_entropy",
    "multi_positive_contrastive_loss", "focal_loss",
    "classwise_mean_embeddings", "embedding_similarity_loss",
    "embedding_dissimilarity_loss", "total_loss", "counters",
]

LOG_FLOOR = 1e-12
UNIT_TOL = 1e-6


class LossInputError(ValueError):
    """Loss input violates a precondition (range, norm, shape)."""


class NoPositivesError(LossInputError):
    """An anchor has no matching candidate; the caller must exclude it."""


class NoValidAnchorsError(LossInputError):
    """No anchor in the batch has any positive candidate."""


@dataclass
class _Counters:
    degenerate_class_means: int = 0

    def reset(self) -> None:
        self.degenerate_class_means = 0


#: Warning counters for skipped degenerate terms (safety valves, not the norm).
counters = _Counters()


@dataclass
class EmbeddingBatch:
    """Unit-norm embeddings with labels for one path's batch."""

    z: Tensor                  # N x e, rows unit norm
    labels: np.ndarray         # N binary labels
    path: str = "common"       # "common" | "pediatric" | "adult"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.z.data.ndim != 2:
            raise LossInputError(
                f"embeddings must be N x e, got shape {self.z.data.shape}")
        if self.labels.shape != (self.z.data.shape[0],):
            raise LossInputError(
                f"{self.labels.shape[0] if self.labels.ndim else '?'} labels "
                f"for {self.z.data.shape[0]} embeddings")
        norms = np.linalg.norm(self.z.data, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise LossInputError(
                f"row {worst} has norm {norms[worst]:.8f}, expected unit")


@dataclass
class ClasswiseEmbeddings:
    """Per-class mean embedding for one path; absent classes are masked."""

    means: list[Tensor | None]     # length C, each (e,) or None
    present: np.ndarray            # length C bools
    path: str = "common"


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_cont: float = 1.0
    lambda_emb: float = 1.0

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_cont", "lambda_emb"):
            if getattr(self, name) < 0:
                raise LossInputError(f"{name} must be >= 0")


@dataclass
class LossBreakdown:
    """Scalar loss components (unweighted) plus the weighted total."""

    cont_c: float = 0.0
    cont_p: float = 0.0
    cont_a: float = 0.0
    focal_c: float = 0.0
    focal_p: float = 0.0
    focal_a: float = 0.0
    emb_sim: float = 0.0
    emb_dissim: float = 0.0
    total: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)

    FIELDS = ("cont_c", "cont_p", "cont_a", "focal_c", "focal_p", "focal_a",
              "emb_sim", "emb_dissim", "total")

    def as_row(self) -> list[float]:
        return [getattr(self, name) for name in self.FIELDS]


# ---------------------------------------------------------------------------
# single-anchor building blocks (plain NumPy; also the oracle path)
# ---------------------------------------------------------------------------

def _check_unit(vec: np.ndarray, what: str) -> None:
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > UNIT_TOL:
        raise LossInputError(f"{what} has norm {norm:.8f}, expected unit")


def contrastive_distribution(anchor: np.ndarray, candidates: np.ndarray,
                             tau: float) -> np.ndarray:
    """Softmax over anchor-candidate similarities at temperature ``tau``."""
    if tau <= 0:
        raise LossInputError(f"temperature must be positive, got {tau}")
    anchor = np.asarray(anchor, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or candidates.shape[0] < 1:
        raise LossInputError("need at least one candidate")
    _check_unit(anchor, "anchor")
    for i in range(candidates.shape[0]):
        _check_unit(candidates[i], f"candidate {i}")
    logits = np.empty(candidates.shape[0])
    for i in range(candidates.shape[0]):
        logits[i] = float(anchor @ candidates[i]) / tau
    shifted = logits - logits.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


def match_distribution(anchor_label: int,
                       candidate_labels: np.ndarray) -> np.ndarray:
    """Uniform distribution over candidates sharing the anchor's label."""
    candidate_labels = np.asarray(candidate_labels, dtype=np.int64)
    matches = (candidate_labels == int(anchor_label))
    k = int(matches.sum())
    if k == 0:
        raise NoPositivesError("anchor has no positives")
    return matches.astype(np.float64) / k


def cross_entropy(p: np.ndarray, q: np.ndarray) -> float:
    """H(p, q) with the log argument floored at ``LOG_FLOOR``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LossInputError(f"shape mismatch {p.shape} vs {q.shape}")
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0.0:
            total -= pi * np.log(max(qi, LOG_FLOOR))
    return float(total)


# ---------------------------------------------------------------------------
# batch losses (differentiable)
# ---------------------------------------------------------------------------

def multi_positive_contrastive_loss(batch: EmbeddingBatch,
                                    tau: float) -> Tensor:
    """Mean anchor cross-entropy between match and softmax distributions.

    Every sample is an anchor; its candidates are all other samples in the
    batch (self excluded).  Anchors without positives are skipped.
    """
    if tau <= 0:
        raise LossInputError(f"temperature must be positive, got {tau}")
    n = batch.z.data.shape[0]
    if n < 2:
        raise LossInputError(f"contrastive batch needs N >= 2, got {n}")
    labels = batch.labels
    match = (labels[:, None] == labels[None, :])
    np.fill_diagonal(match, False)
    k = match.sum(axis=1)
    valid = k > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NoValidAnchorsError(
            "no anchor in the batch has a positive candidate")
    target = np.where(valid[:, None], match / np.maximum(k, 1)[:, None], 0.0)

    sims = batch.z.matmul(batch.z.t()) * (1.0 / tau)
    # self-similarity is pushed far below any real logit; its softmax mass
    # underflows to exactly zero and target is zero there as well
    self_mask = Tensor(np.where(np.eye(n, dtype=bool), -1e9, 0.0))
    log_q = (sims + self_mask).log_softmax_rows()
    return (Tensor(target) * log_q).sum() * (-1.0 / n_valid)


def focal_loss(logits: Tensor, targets: np.ndarray, gamma: float,
               alpha: float) -> Tensor:
    """Mean focal loss of per-sample logits against binary targets.

    With s = sigmoid(logit): p_t = s if y=1 else 1-s, the class weight is
    alpha for positives and 1-alpha for negatives, and each sample
    contributes -alpha_t * (1 - p_t)**gamma * log(p_t).
    """
    if gamma < 0:
        raise LossInputError(f"gamma must be >= 0, got {gamma}")
    if not 0.0 < alpha < 1.0:
        raise LossInputError(f"alpha must be in (0, 1), got {alpha}")
    targets = np.asarray(targets, dtype=np.float64)
    if logits.data.ndim != 1 or targets.shape != logits.data.shape:
        raise LossInputError(
            f"logits {logits.data.shape} vs targets {targets.shape}")
    if not np.isin(targets, (0.0, 1.0)).all():
        raise LossInputError("targets must be binary")
    probs = logits.sigmoid()
    y = Tensor(targets)
    p_t = probs * y + (1.0 - probs) * (1.0 - targets)
    alpha_t = Tensor(np.where(targets == 1.0, alpha, 1.0 - alpha))
    losses = -1.0 * alpha_t * (1.0 - p_t) ** gamma * p_t.log(floor=LOG_FLOOR)
    return losses.mean()


def classwise_mean_embeddings(batch: EmbeddingBatch,
                              num_classes: int = 2) -> ClasswiseEmbeddings:
    """Arithmetic mean embedding per class; absent classes masked out."""
    if num_classes < 2:
        raise LossInputError(f"need >= 2 classes, got {num_classes}")
    means: list[Tensor | None] = []
    present = np.zeros(num_classes, dtype=bool)
    for cls in range(num_classes):
        idx = np.flatnonzero(batch.labels == cls)
        if idx.size:
            means.append(batch.z.take_rows(idx).mean(axis=0))
            present[cls] = True
        else:
            means.append(None)
    return ClasswiseEmbeddings(means=means, present=present, path=batch.path)


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable cosine similarity of two vectors (no re-normalizing)."""
    num = (a * b).sum()
    return num / ((a * a).sum().sqrt() * (b * b).sum().sqrt())


def _mean_ok(w: ClasswiseEmbeddings, cls: int) -> bool:
    mean = w.means[cls]
    if mean is None:
        return False
    if float(np.linalg.norm(mean.data)) < LOG_FLOOR:
        counters.degenerate_class_means += 1
        return False
    return True


def embedding_similarity_loss(w_c: ClasswiseEmbeddings,
                              w_p: ClasswiseEmbeddings,
                              w_a: ClasswiseEmbeddings,
                              mixed_sign: bool = False) -> Tensor:
    """Pull the common path's classwise means toward both auxiliary paths'.

    Per class present in all three paths the default form adds
    ``2 - SIM(c, a) - SIM(c, p)``.  With ``mixed_sign`` the pediatric term
    enters with a plus sign instead (a sign-flipped variant retained for
    comparison runs; it rewards divergence from the pediatric path).
    """
    num_classes = len(w_c.means)
    total = as_tensor(0.0)
    for cls in range(num_classes):
        if not (_mean_ok(w_c, cls) and _mean_ok(w_p, cls)
                and _mean_ok(w_a, cls)):
            continue
        sim_a = _cosine(w_c.means[cls], w_a.means[cls])
        sim_p = _cosine(w_c.means[cls], w_p.means[cls])
        if mixed_sign:
            total = total + (2.0 - sim_a + sim_p)
        else:
            total = total + (2.0 - sim_a - sim_p)
    return total


def embedding_dissimilarity_loss(w_c: ClasswiseEmbeddings) -> Tensor:
    """Hinged cosine between distinct classwise means of the common path.

    Sums max(0, SIM) over ordered pairs of present classes; with fewer
    than two present classes there is nothing to separate and the loss
    is zero.
    """
    usable = [cls for cls in range(len(w_c.means)) if _mean_ok(w_c, cls)]
    total = as_tensor(0.0)
    if len(usable) < 2:
        return total
    for i in usable:
        for j in usable:
            if i != j:
                total = total + _cosine(w_c.means[j], w_c.means[i]).relu()
    return total


def total_loss(components: dict[str, Tensor | None],
               weights: LossWeights) -> tuple[LossBreakdown, Tensor]:
    """Weighted sum of the loss components that are present.

    Returns the breakdown (components recorded unweighted) plus the total
    as a graph tensor for the backward pass.  Missing components count as
    zero, and a group whose weight is exactly zero is left out of the graph
    entirely, so zero-weight runs are bit-identical to runs that never
    computed those components.
    """
    def group(names: list[str]) -> Tensor | None:
        live = [components[n] for n in names if components.get(n) is not None]
        if not live:
            return None
        acc = live[0]
        for term in live[1:]:
            acc = acc + term
        return acc

    focal = group(["focal_c", "focal_p", "focal_a"])
    cont = group(["cont_c", "cont_p", "cont_a"])
    emb = group(["emb_sim", "emb_dissim"])
    total = as_tensor(0.0)
    if focal is not None and weights.lambda_cls != 0.0:
        total = total + weights.lambda_cls * focal
    if cont is not None and weights.lambda_cont != 0.0:
        total = total + weights.lambda_cont * cont
    if emb is not None and weights.lambda_emb != 0.0:
        total = total + weights.lambda_emb * emb

    values = {name: (t.item() if t is not None else 0.0)
              for name, t in components.items()}
    breakdown = LossBreakdown(total=total.item(), weights=weights,
                              **{k: values.get(k, 0.0)
                                 for k in LossBreakdown.FIELDS if k != "total"})
    return breakdown, total
