"""Central finite-difference verification of analytic gradients.

``standard_checks`` names one check per layer operation and per loss;
the command-line ``gradcheck`` subcommand runs each a few times and the
acceptance test runs each at 100 random points.  Builders that involve a
kinked function (relu, the dissimilarity hinge) resample until every
kink argument clears a margin, since central differences straddling a
kink measure the average of the two slopes rather than either one.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor

__all__ = ["GradcheckResult", "gradcheck", "standard_checks",
           "run_standard"]


@dataclass
class GradcheckResult:
    """Per-coordinate comparison of analytic vs central-difference gradients.

    ``rel_errors[i] = |analytic_i - central_i| / max(1, |central_i|)``.
    Coordinates where either side came out non-finite are listed in
    ``bad_coords`` and force ``max_rel_error`` to inf.
    """

    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    bad_coords: list[int]

    def __float__(self) -> float:
        return self.max_rel_error


def gradcheck(fn: Callable[[Tensor], Tensor], point: np.ndarray,
              epsilon: float = 1e-5) -> GradcheckResult:
    """Check d(fn)/d(point) against central differences, coordinate-wise.

    ``fn`` maps a leaf tensor to a scalar tensor and must be evaluable at
    every ``point +- epsilon`` single-coordinate perturbation.
    """
    point = np.asarray(point, dtype=np.float64)
    leaf = Tensor(point.copy(), requires_grad=True)
    out = fn(leaf)
    out.backward()
    analytic = (leaf.grad if leaf.grad is not None
                else np.zeros_like(point)).reshape(-1).copy()

    flat = point.reshape(-1)
    numeric = np.zeros_like(flat)
    bad: list[int] = []
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + epsilon
        hi = fn(Tensor(bumped.reshape(point.shape))).item()
        bumped[i] = flat[i] - epsilon
        lo = fn(Tensor(bumped.reshape(point.shape))).item()
        numeric[i] = (hi - lo) / (2.0 * epsilon)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            bad.append(i)
    if not np.isfinite(analytic).all():
        bad.extend(int(i) for i in np.flatnonzero(~np.isfinite(analytic))
                   if int(i) not in bad)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    max_err = float("inf") if bad else float(rel.max()) if rel.size else 0.0
    return GradcheckResult(max_rel_error=max_err, rel_errors=rel,
                           analytic=analytic, numeric=numeric,
                           bad_coords=sorted(bad))


# ---------------------------------------------------------------------------
# named standard checks
# ---------------------------------------------------------------------------
#
# Each builder takes an rng and returns (fn, point) for ``gradcheck``.
# Outputs reduce to a scalar through a fixed random linear functional so
# no coordinate's gradient is masked by symmetry.

def _functional(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _conv_parts(rng: np.random.Generator):
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3)) * 0.5
    b = rng.normal(size=(3,)) * 0.1
    return x, w, b


def _check_conv_input(rng):
    x, w, b = _conv_parts(rng)
    wt, bt = Tensor(w), Tensor(b)

    def fn(leaf):
        out = leaf.conv2d(wt, bt, stride=2, padding=1).tanh()
        return (out * direction).sum()

    probe = Tensor(x).conv2d(wt, bt, stride=2, padding=1)
    direction = _functional(rng, probe.data.shape)
    return fn, x


def _check_conv_weight(rng):
    x, w, b = _conv_parts(rng)
    xt, bt = Tensor(x), Tensor(b)

    def fn(leaf):
        out = xt.conv2d(leaf, bt, stride=1, padding=1).tanh()
        return (out * direction).sum()

    probe = xt.conv2d(Tensor(w), bt, stride=1, padding=1)
    direction = _functional(rng, probe.data.shape)
    return fn, w


def _check_conv_bias(rng):
    x, w, b = _conv_parts(rng)
    xt, wt = Tensor(x), Tensor(w)

    def fn(leaf):
        out = xt.conv2d(wt, leaf, stride=2, padding=1).tanh()
        return (out * direction).sum()

    probe = xt.conv2d(wt, Tensor(b), stride=2, padding=1)
    direction = _functional(rng, probe.data.shape)
    return fn, b


def _check_linear_input(rng):
    w = Tensor(rng.normal(size=(5, 4)))
    b = Tensor(rng.normal(size=(4,)))
    direction = _functional(rng, (3, 4))

    def fn(leaf):
        return ((leaf @ w + b).tanh() * direction).sum()

    return fn, rng.normal(size=(3, 5))


def _check_linear_weight(rng):
    x = Tensor(rng.normal(size=(3, 5)))
    b = Tensor(rng.normal(size=(4,)))
    direction = _functional(rng, (3, 4))

    def fn(leaf):
        return ((x @ leaf + b).tanh() * direction).sum()

    return fn, rng.normal(size=(5, 4))


_KINK_MARGIN = 1e-3


def _check_relu(rng):
    w = Tensor(rng.normal(size=(6, 5)))
    b = Tensor(rng.normal(size=(5,)) * 0.1)
    direction = _functional(rng, (4, 5))
    while True:
        x = rng.normal(size=(4, 6))
        pre = x @ w.data + b.data
        if np.abs(pre).min() > _KINK_MARGIN:
            break

    def fn(leaf):
        return ((leaf @ w + b).relu() * direction).sum()

    return fn, x


def _check_tanh(rng):
    direction = _functional(rng, (4, 6))

    def fn(leaf):
        return (leaf.tanh() * direction).sum()

    return fn, rng.normal(size=(4, 6)) * 2.0


def _check_sigmoid(rng):
    direction = _functional(rng, (4, 6))

    def fn(leaf):
        return (leaf.sigmoid() * direction).sum()

    return fn, rng.normal(size=(4, 6)) * 3.0


def _check_exp_log_sqrt(rng):
    direction = _functional(rng, (3, 4))

    def fn(leaf):
        y = leaf.sigmoid() + 0.1
        return ((y.log() + y.sqrt() + (leaf * 0.3).exp())
                * direction).sum()

    return fn, rng.normal(size=(3, 4))


def _check_global_avg_pool(rng):
    direction = _functional(rng, (2, 3))

    def fn(leaf):
        return (leaf.global_avg_pool() * direction).sum()

    return fn, rng.normal(size=(2, 3, 4, 4))


def _check_l2_normalize(rng):
    direction = _functional(rng, (4, 5))
    while True:
        x = rng.normal(size=(4, 5))
        if np.linalg.norm(x, axis=1).min() > 0.5:
            break

    def fn(leaf):
        return (leaf.l2_normalize_rows() * direction).sum()

    return fn, x


def _check_log_softmax(rng):
    direction = _functional(rng, (4, 6))

    def fn(leaf):
        return (leaf.log_softmax_rows() * direction).sum()

    return fn, rng.normal(size=(4, 6)) * 2.0


def _check_reshape_gather(rng):
    rows = Tensor(np.array([2, 0, 1, 0], dtype=np.int64))
    direction = _functional(rng, (4, 6))

    def fn(leaf):
        flat = leaf.reshape((3, 6))
        return (flat.take_rows(rows.data) * direction).sum()

    return fn, rng.normal(size=(3, 2, 3))


def _check_backbone_projection(rng):
    from . import layers
    spec = layers.BackboneSpec(mode="conv", input_size=8, in_channels=1,
                               channels=(3, 4), kernel=3, stride=2,
                               nonlinearity="tanh", embed_dim=5)
    pset = layers.init_path_params(spec, rng, "check")
    direction = _functional(rng, (2, 5))

    def fn(leaf):
        h = layers.backbone_forward(pset, spec, leaf)
        z = layers.projection_forward(pset, spec, h)
        return (z * direction).sum()

    return fn, rng.normal(size=(2, 1, 8, 8)) * 0.5


def _check_contrastive(rng):
    from .losses import EmbeddingBatch, multi_positive_contrastive_loss
    labels = np.array([0, 0, 1, 1, 0, 1], dtype=np.int64)

    def fn(leaf):
        batch = EmbeddingBatch(z=leaf.l2_normalize_rows(), labels=labels,
                               path="common")
        return multi_positive_contrastive_loss(batch, tau=0.3)

    while True:
        x = rng.normal(size=(6, 4))
        if np.linalg.norm(x, axis=1).min() > 0.5:
            break
    return fn, x


def _focal_check(gamma):
    def build(rng):
        from .losses import focal_loss
        targets = np.array([1, 0, 1, 0, 1, 1, 0, 0], dtype=np.int64)

        def fn(leaf):
            return focal_loss(leaf, targets, gamma=gamma, alpha=0.25)

        return fn, rng.normal(size=(8,)) * 2.0
    return build


def _means_from_rows(leaf):
    return [leaf.take_rows(np.array([i])).reshape((leaf.data.shape[1],))
            for i in range(leaf.data.shape[0])]


def _classwise(rows, path):
    from .losses import ClasswiseEmbeddings
    return ClasswiseEmbeddings(means=list(rows),
                               present=np.ones(len(rows), dtype=bool),
                               path=path)


def _emb_sim_check(mixed_sign):
    def build(rng):
        from .losses import embedding_similarity_loss

        def fn(leaf):
            rows = _means_from_rows(leaf)
            return embedding_similarity_loss(
                _classwise(rows[0:2], "common"),
                _classwise(rows[2:4], "pediatric"),
                _classwise(rows[4:6], "adult"), mixed_sign=mixed_sign)

        while True:
            x = rng.normal(size=(6, 4))
            if np.linalg.norm(x, axis=1).min() > 0.5:
                break
        return fn, x
    return build


def _check_emb_dissim(rng):
    from .losses import embedding_dissimilarity_loss

    def fn(leaf):
        return embedding_dissimilarity_loss(
            _classwise(_means_from_rows(leaf), "common"))

    # keep the hinge argument (the pairwise cosine) clear of its kink
    while True:
        x = rng.normal(size=(2, 4))
        norms = np.linalg.norm(x, axis=1)
        if norms.min() < 0.5:
            continue
        cos = float(x[0] @ x[1]) / float(norms[0] * norms[1])
        if abs(cos) > 0.05:
            break
    return fn, x


_STANDARD_CHECKS: dict[str, Callable] = {
    "conv2d_input": _check_conv_input,
    "conv2d_weight": _check_conv_weight,
    "conv2d_bias": _check_conv_bias,
    "linear_input": _check_linear_input,
    "linear_weight": _check_linear_weight,
    "relu": _check_relu,
    "tanh": _check_tanh,
    "sigmoid": _check_sigmoid,
    "exp_log_sqrt": _check_exp_log_sqrt,
    "global_avg_pool": _check_global_avg_pool,
    "l2_normalize_rows": _check_l2_normalize,
    "log_softmax_rows": _check_log_softmax,
    "reshape_gather": _check_reshape_gather,
    "backbone_projection": _check_backbone_projection,
    "contrastive_loss": _check_contrastive,
    "focal_loss_gamma2": _focal_check(2.0),
    "focal_loss_gamma0": _focal_check(0.0),
    "embedding_similarity": _emb_sim_check(False),
    "embedding_similarity_mixed": _emb_sim_check(True),
    "embedding_dissimilarity": _check_emb_dissim,
}


def standard_checks() -> dict[str, Callable]:
    """Named builders covering every layer operation and every loss."""
    return dict(_STANDARD_CHECKS)


def run_standard(name: str, points: int, seed: int = 0,
                 epsilon: float = 1e-5) -> float:
    """Worst max-relative-error of a named check over random points."""
    builder = _STANDARD_CHECKS[name]
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    worst = 0.0
    for _ in range(points):
        fn, point = builder(rng)
        worst = max(worst, gradcheck(fn, point, epsilon=epsilon)
                    .max_rel_error)
    return worst
