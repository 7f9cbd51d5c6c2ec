"""Parameterized layers: backbone, projection head, classifier.

Three disjoint per-path parameter sets (common / pediatric / adult) are
built from one :class:`BackboneSpec`.  The conv backbone is a small stack
of stride-2 convolutions followed by global average pooling; a dense-only
vector mode exists for fast property tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

__all__ = [
    "BackboneSpec", "ParameterSet", "ShapeError", "DegenerateEmbeddingError",
    "init_path_params", "backbone_forward", "projection_forward",
    "classifier_forward",
]


class ShapeError(ValueError):
    """Input shape incompatible with the layer's parameters."""


class DegenerateEmbeddingError(ValueError):
    """A projection-head row collapsed to (near) zero norm."""


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture of one path (backbone + projection head + classifier).

    ``feature_dim`` is the pooled representation width d; in conv mode it
    always equals the last stage's channel count.
    """

    mode: str = "conv"                      # "conv" | "vector"
    input_size: int = 32                    # H == W for conv mode
    in_channels: int = 1
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    stride: int = 2
    nonlinearity: str = "relu"
    embed_dim: int = 16                     # projection-head output width e
    vector_dim: int = 16                    # vector-mode input width
    hidden: int = 32                        # vector-mode hidden width
    vector_feature_dim: int = 32            # vector-mode output width d

    def __post_init__(self):
        if self.mode not in ("conv", "vector"):
            raise ValueError(f"unknown backbone mode {self.mode!r}")
        if self.nonlinearity not in ("relu", "tanh"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.mode == "conv" and not self.channels:
            raise ValueError("conv mode needs at least one stage")

    @property
    def feature_dim(self) -> int:
        return (self.channels[-1] if self.mode == "conv"
                else self.vector_feature_dim)


@dataclass
class ParameterSet:
    """Named parameter tensors for one path, plus AdamW moments.

    Shapes are fixed at creation; names are unique.  The three paths hold
    disjoint instances (no sharing).
    """

    name: str
    params: dict[str, Tensor] = field(default_factory=dict)
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.opt_m[name] = np.zeros_like(t.data)
        self.opt_v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def grads_finite(self) -> bool:
        return all(t.grad is None or np.isfinite(t.grad).all()
                   for t in self.params.values())


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


def init_path_params(spec: BackboneSpec, rng: np.random.Generator,
                     name: str) -> ParameterSet:
    """Fresh backbone + head + classifier parameters for one path.

    Creation order is fixed, so a given rng stream always produces the
    same values regardless of what other paths exist.
    """
    pset = ParameterSet(name)
    if spec.mode == "conv":
        prev = spec.in_channels
        for i, width in enumerate(spec.channels):
            fan = prev * spec.kernel * spec.kernel
            pset.add(f"bb.conv{i}.w",
                     _uniform_fan_in(rng, (width, prev, spec.kernel,
                                           spec.kernel), fan))
            pset.add(f"bb.conv{i}.b", _uniform_fan_in(rng, (width,), fan))
            prev = width
    else:
        pset.add("bb.fc0.w", _uniform_fan_in(
            rng, (spec.hidden, spec.vector_dim), spec.vector_dim))
        pset.add("bb.fc0.b", _uniform_fan_in(
            rng, (spec.hidden,), spec.vector_dim))
        pset.add("bb.fc1.w", _uniform_fan_in(
            rng, (spec.vector_feature_dim, spec.hidden), spec.hidden))
        pset.add("bb.fc1.b", _uniform_fan_in(
            rng, (spec.vector_feature_dim,), spec.hidden))
    d = spec.feature_dim
    pset.add("head.fc0.w", _uniform_fan_in(rng, (d, d), d))
    pset.add("head.fc0.b", _uniform_fan_in(rng, (d,), d))
    pset.add("head.fc1.w", _uniform_fan_in(rng, (spec.embed_dim, d), d))
    pset.add("head.fc1.b", _uniform_fan_in(rng, (spec.embed_dim,), d))
    pset.add("clf.w", _uniform_fan_in(rng, (1, d), d))
    pset.add("clf.b", _uniform_fan_in(rng, (1,), d))
    return pset


def _nonlin(spec: BackboneSpec, t: Tensor) -> Tensor:
    return t.relu() if spec.nonlinearity == "relu" else t.tanh()


def _dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x.matmul(w.t()) + b


def backbone_forward(pset: ParameterSet, spec: BackboneSpec,
                     images) -> Tensor:
    """Pooled representation h (B x d) of a batch of inputs."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if spec.mode == "conv":
        if x.data.ndim != 4:
            raise ShapeError(
                f"expected B x C x H x W input, got rank {x.data.ndim}")
        b, c, h, w = x.data.shape
        if c != spec.in_channels:
            raise ShapeError(f"channel dim {c} != spec in_channels "
                             f"{spec.in_channels}")
        if h != spec.input_size or w != spec.input_size:
            raise ShapeError(f"spatial dims {h}x{w} != spec input size "
                             f"{spec.input_size}x{spec.input_size}")
        pad = spec.kernel // 2
        for i in range(len(spec.channels)):
            x = x.conv2d(pset[f"bb.conv{i}.w"], pset[f"bb.conv{i}.b"],
                         spec.stride, pad)
            x = _nonlin(spec, x)
        return x.global_avg_pool()
    if x.data.ndim != 2:
        raise ShapeError(
            f"expected B x {spec.vector_dim} input, got rank {x.data.ndim}")
    if x.data.shape[1] != spec.vector_dim:
        raise ShapeError(f"feature dim {x.data.shape[1]} != spec vector_dim "
                         f"{spec.vector_dim}")
    h1 = _nonlin(spec, _dense(x, pset["bb.fc0.w"], pset["bb.fc0.b"]))
    return _dense(h1, pset["bb.fc1.w"], pset["bb.fc1.b"])


def projection_forward(pset: ParameterSet, spec: BackboneSpec,
                       h: Tensor) -> Tensor:
    """Unit-norm embeddings z (B x e) from pooled representations."""
    if h.data.ndim != 2 or h.data.shape[1] != spec.feature_dim:
        raise ShapeError(f"projection input width "
                         f"{h.data.shape[-1] if h.data.ndim else '?'} != "
                         f"feature dim {spec.feature_dim}")
    z = _nonlin(spec, _dense(h, pset["head.fc0.w"], pset["head.fc0.b"]))
    z = _dense(z, pset["head.fc1.w"], pset["head.fc1.b"])
    try:
        return z.l2_normalize_rows()
    except Exception as exc:
        raise DegenerateEmbeddingError(str(exc)) from None


def classifier_forward(pset: ParameterSet, spec: BackboneSpec,
                       h: Tensor) -> Tensor:
    """One real logit per sample; the sigmoid lives in the loss."""
    if h.data.ndim != 2 or h.data.shape[1] != spec.feature_dim:
        raise ShapeError(f"classifier input width "
                         f"{h.data.shape[-1] if h.data.ndim else '?'} != "
                         f"feature dim {spec.feature_dim}")
    logits = _dense(h, pset["clf.w"], pset["clf.b"])
    return logits.reshape(h.data.shape[0])
