"""Synthetic two-domain datasets, preprocessing, sampling, and fold splits.

The generator produces a desk-scale stand-in for a pair of chest-radiograph
collections from two populations (domains P and A): grayscale canvases with
two jittered elliptical "lung" regions, a mirror-symmetric class pattern
whose strength is set by ``separation``, and a domain-specific nuisance
whose strength is set by ``shift``.  ``shift=0`` makes the two domains
statistically identical; ``separation=0`` removes all label signal.

Everything randomized is keyed by purpose-tagged RNG streams derived from
the dataset seed, so output bytes depend only on the seed and the sample's
identity, never on generation order or worker scheduling.

On-disk layout: a ``manifest.txt`` of whitespace-separated ``key:value``
tokens (one record per line) next to a ``blobs/`` directory of TBLOB1
files (magic, u8 rank, u32 little-endian extents, float64 row-major).
"""

from __future__ import annotations

import dataclasses
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_rng

__all__ = [
    "DataError", "BlobError", "ManifestError",
    "LabeledSample", "Dataset", "GeneratorConfig", "AugmentPolicy",
    "FoldAssignment", "ProcessedDataset",
    "write_blob", "read_blob", "generate_synthetic", "ingest_manifest",
    "bbox_crop", "bilinear_resize", "resize_normalize", "augment",
    "BalancedBatchSampler", "ClassBalancedSampler", "stratified_kfold",
    "preprocess",
]

BLOB_MAGIC = b"TBLOB1"
DOMAINS = ("P", "A")


class DataError(ValueError):
    """Invalid data, configuration, or preprocessing input."""


class BlobError(DataError):
    """A blob file failed to decode."""


class ManifestError(DataError):
    """A manifest failed to parse or validate; message itemizes problems."""


# ---------------------------------------------------------------------------
# blob files
# ---------------------------------------------------------------------------

def write_blob(path: str, array: np.ndarray) -> None:
    """Write ``array`` as a TBLOB1 file (atomic rename on completion)."""
    # asarray, not ascontiguousarray: the latter promotes rank 0 to rank 1
    array = np.asarray(array, dtype=np.float64, order="C")
    if array.ndim > 255:
        raise BlobError(f"rank {array.ndim} exceeds the format limit")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<B", array.ndim))
        for extent in array.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(array.tobytes())
    os.replace(tmp, path)


def read_blob(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(BLOB_MAGIC)] != BLOB_MAGIC:
        raise BlobError(f"{path}: bad magic {raw[:len(BLOB_MAGIC)]!r}")
    offset = len(BLOB_MAGIC)
    if len(raw) < offset + 1:
        raise BlobError(f"{path}: truncated before rank byte")
    rank = raw[offset]
    offset += 1
    header_end = offset + 4 * rank
    if len(raw) < header_end:
        raise BlobError(f"{path}: truncated extent header")
    shape = struct.unpack("<" + "I" * rank, raw[offset:header_end])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = header_end + 8 * count
    if len(raw) < expected:
        raise BlobError(f"{path}: truncated payload "
                        f"({len(raw) - header_end} of {8 * count} bytes)")
    if len(raw) > expected:
        raise BlobError(f"{path}: {len(raw) - expected} trailing bytes")
    flat = np.frombuffer(raw, dtype="<f8", count=count, offset=header_end)
    return flat.reshape(shape).astype(np.float64)


# ---------------------------------------------------------------------------
# samples and datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledSample:
    id: str
    label: int                    # 1 = condition present
    domain: str                   # "P" | "A"
    split: str                    # "train" | "test"
    image: np.ndarray | None = None    # (C, H, W) in image mode
    mask: np.ndarray | None = None     # (H, W) foreground mask
    vector: np.ndarray | None = None   # (d,) in vector mode


@dataclass
class Dataset:
    """In-memory dataset: validated samples plus the generator config echo."""

    samples: list[LabeledSample]
    config: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def mode(self) -> str:
        return self.config.get("mode", "image")


@dataclass(frozen=True)
class GeneratorConfig:
    n_per_cell: int = 200          # training samples per (domain, class) cell
    test_per_cell: int = 0         # extra held-out test samples per cell
    mode: str = "image"            # "image" | "vector"
    shift: float = 0.6             # domain-nuisance strength, >= 0
    separation: float = 1.0        # class-signal strength, >= 0
    noise: float = 0.3             # per-pixel (or per-coordinate) noise sd
    amp_spread: float = 0.25       # lognormal sigma of per-sample signal amplitude
    seed: int = 0
    canvas_size: int = 40          # raw canvas before crop/resize (image mode)
    vector_dim: int = 16

    def __post_init__(self):
        if self.mode not in ("image", "vector"):
            raise DataError(f"mode must be image or vector, got {self.mode!r}")
        if self.n_per_cell < 4:
            raise DataError(f"n_per_cell must be >= 4, got {self.n_per_cell}")
        if self.test_per_cell < 0:
            raise DataError("test_per_cell must be >= 0")
        if self.shift < 0:
            raise DataError(f"shift must be >= 0, got {self.shift}")
        if self.separation < 0:
            raise DataError(f"separation must be >= 0, got {self.separation}")
        if self.noise < 0:
            raise DataError(f"noise must be >= 0, got {self.noise}")
        if self.amp_spread < 0:
            raise DataError(f"amp_spread must be >= 0, got {self.amp_spread}")
        if self.canvas_size < 8:
            raise DataError("canvas_size must be >= 8")
        if self.vector_dim < 2:
            raise DataError("vector_dim must be >= 2")


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, size: int, coarse: int = 5,
                  standardize: bool = True) -> np.ndarray:
    """Coarse white noise bilinearly upsampled into a smooth random field."""
    grid = rng.normal(size=(coarse, coarse))
    fine = bilinear_resize(grid[None, :, :], size, size)[0]
    if standardize:
        fine = (fine - fine.mean()) / max(fine.std(), 1e-9)
    return fine


def _bump(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float,
          sigma: float) -> np.ndarray:
    return np.exp(-(((yy - cy) ** 2) + ((xx - cx) ** 2)) / (2.0 * sigma ** 2))


def _class_pattern(seed: int, size: int) -> np.ndarray:
    """Mirror-symmetric multi-bump pattern shared by every positive sample.

    Symmetry about the vertical midline keeps horizontal flipping
    label-preserving.  Three bump pairs rather than one keep the
    per-seed task difficulty close to its average: a single pair can
    land on an unusually clean or unusually cluttered spot, while a
    mixture rarely does everywhere at once.
    """
    rng = derive_rng(seed, "class")
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, size),
                         np.linspace(0.0, 1.0, size), indexing="ij")
    pattern = np.zeros((size, size))
    for _ in range(3):
        cy = rng.uniform(0.38, 0.65)
        dx = rng.uniform(0.10, 0.23)
        sigma = rng.uniform(0.06, 0.10)
        amp = float(rng.lognormal(mean=0.0, sigma=0.3))
        pattern = pattern + amp * (_bump(yy, xx, cy, 0.5 - dx, sigma)
                                   + _bump(yy, xx, cy, 0.5 + dx, sigma))
    return pattern / pattern.max()


def _domain_fields(seed: int, domain: str, size: int):
    rng = derive_rng(seed, "domain", domain)
    modulation = _smooth_field(rng, size)       # reshapes the class pattern
    nuisance = _smooth_field(rng, size)         # class-independent structure
    sign = 1.0 if domain == "P" else -1.0
    return modulation, nuisance, sign


def _lung_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, size),
                         np.linspace(0.0, 1.0, size), indexing="ij")
    mask = np.zeros((size, size), dtype=bool)
    for side in (-1.0, 1.0):
        cx = 0.5 + side * (0.21 + rng.uniform(-0.02, 0.02))
        cy = 0.52 + rng.uniform(-0.03, 0.03)
        ax = 0.15 + rng.uniform(-0.02, 0.02)
        ay = 0.30 + rng.uniform(-0.03, 0.03)
        mask |= ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    return mask


def _image_sample(cfg: GeneratorConfig, pattern: np.ndarray, fields: dict,
                  split: str, domain: str, label: int, index: int):
    rng = derive_rng(cfg.seed, "sample", split, domain, label, index)
    size = cfg.canvas_size
    modulation, nuisance, sign = fields[domain]

    mask = _lung_mask(rng, size)
    image = np.where(mask, 0.45, 0.05)
    image = image + 0.08 * _smooth_field(rng, size, coarse=7)
    if label == 1:
        amp = float(rng.lognormal(mean=0.0, sigma=cfg.amp_spread))
        signal = pattern * (1.0 + cfg.shift * modulation)
        image = image + cfg.separation * 0.5 * amp * signal * mask
    image = image + cfg.shift * (0.25 * nuisance + 0.3 * sign)
    image = image + rng.normal(size=(size, size)) * cfg.noise
    return image[None, :, :], mask.astype(np.float64)


def _vector_sample(cfg: GeneratorConfig, basis: dict, split: str, domain: str,
                   label: int, index: int) -> np.ndarray:
    rng = derive_rng(cfg.seed, "sample", split, domain, label, index)
    direction, domain_dirs, domain_means = basis
    x = cfg.shift * domain_means[domain].copy()
    if label == 1:
        amp = float(rng.lognormal(mean=0.0, sigma=cfg.amp_spread))
        x = x + cfg.separation * amp * (direction
                                        + cfg.shift * domain_dirs[domain])
    return x + rng.normal(size=cfg.vector_dim) * cfg.noise


def _vector_basis(cfg: GeneratorConfig):
    rng = derive_rng(cfg.seed, "class")
    direction = rng.normal(size=cfg.vector_dim)
    direction /= np.linalg.norm(direction)
    domain_dirs, domain_means = {}, {}
    for domain in DOMAINS:
        drng = derive_rng(cfg.seed, "domain", domain)
        raw = drng.normal(size=cfg.vector_dim)
        raw -= (raw @ direction) * direction      # nuisance orthogonal to signal
        domain_dirs[domain] = raw / np.linalg.norm(raw)
        domain_means[domain] = drng.normal(size=cfg.vector_dim) * 0.5
    return direction, domain_dirs, domain_means


def _sample_id(split: str, domain: str, label: int, index: int) -> str:
    return f"{split}-{domain}{label}-{index:04d}"


def generate_synthetic(cfg: GeneratorConfig, out_dir: str) -> str:
    """Generate the dataset under ``out_dir`` and return the manifest path.

    Writes ``blobs/`` first and the manifest last, so a manifest on disk
    implies a complete dataset.  Byte output is a pure function of ``cfg``.
    """
    blob_dir = os.path.join(out_dir, "blobs")
    os.makedirs(blob_dir, exist_ok=True)

    if cfg.mode == "image":
        pattern = _class_pattern(cfg.seed, cfg.canvas_size)
        fields = {d: _domain_fields(cfg.seed, d, cfg.canvas_size)
                  for d in DOMAINS}
    else:
        basis = _vector_basis(cfg)

    lines = ["type:config " + " ".join(
        f"{key}:{_format_value(value)}"
        for key, value in sorted(dataclasses.asdict(cfg).items()))]

    for split, count in (("train", cfg.n_per_cell),
                         ("test", cfg.test_per_cell)):
        for domain in DOMAINS:
            for label in (0, 1):
                for index in range(count):
                    sid = _sample_id(split, domain, label, index)
                    tokens = ["type:sample", f"id:{sid}", f"split:{split}",
                              f"domain:{domain}", f"label:{label}"]
                    if cfg.mode == "image":
                        image, mask = _image_sample(cfg, pattern, fields,
                                                    split, domain, label,
                                                    index)
                        write_blob(os.path.join(blob_dir, sid + ".blob"),
                                   image)
                        write_blob(os.path.join(blob_dir, sid + ".mask.blob"),
                                   mask)
                        tokens.append(f"blob:blobs/{sid}.blob")
                        tokens.append(f"mask:blobs/{sid}.mask.blob")
                    else:
                        vec = _vector_sample(cfg, basis, split, domain,
                                             label, index)
                        tokens.append("vec:" + ",".join(repr(float(v))
                                                        for v in vec))
                    lines.append(" ".join(tokens))

    manifest_path = os.path.join(out_dir, "manifest.txt")
    tmp = manifest_path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest_path)
    return manifest_path


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# manifest ingestion
# ---------------------------------------------------------------------------

def _parse_tokens(line: str, lineno: int, problems: list[str],
                  path: str) -> dict[str, str] | None:
    fields: dict[str, str] = {}
    for token in line.split():
        if ":" not in token:
            problems.append(f"{path}:{lineno}: token {token!r} lacks ':'")
            return None
        key, value = token.split(":", 1)
        if key in fields:
            problems.append(f"{path}:{lineno}: duplicate key {key!r}")
            return None
        fields[key] = value
    return fields


def ingest_manifest(path: str) -> Dataset:
    """Parse and validate a manifest; raise ``ManifestError`` listing every
    problem found (missing blobs, bad shapes, duplicate ids, ...)."""
    with open(path) as fh:
        raw_lines = fh.read().splitlines()
    base = os.path.dirname(path)
    problems: list[str] = []
    config: dict[str, str] = {}
    samples: list[LabeledSample] = []
    seen_ids: set[str] = set()
    image_shape: tuple[int, ...] | None = None
    vector_dim: int | None = None

    for lineno, line in enumerate(raw_lines, start=1):
        if not line.strip():
            continue
        fields = _parse_tokens(line, lineno, problems, path)
        if fields is None:
            continue
        kind = fields.pop("type", None)
        if kind == "config":
            config.update(fields)
            continue
        if kind != "sample":
            problems.append(f"{path}:{lineno}: unknown record type {kind!r}")
            continue

        missing = [k for k in ("id", "split", "domain", "label")
                   if k not in fields]
        if missing:
            problems.append(f"{path}:{lineno}: missing keys {missing}")
            continue
        sid = fields["id"]
        if sid in seen_ids:
            problems.append(f"{path}:{lineno}: duplicate id {sid!r}")
            continue
        seen_ids.add(sid)
        if fields["domain"] not in DOMAINS:
            problems.append(f"{path}:{lineno}: id {sid!r} has domain "
                            f"{fields['domain']!r}, expected P or A")
            continue
        if fields["label"] not in ("0", "1"):
            problems.append(f"{path}:{lineno}: id {sid!r} has label "
                            f"{fields['label']!r}, expected 0 or 1")
            continue
        sample = LabeledSample(id=sid, label=int(fields["label"]),
                               domain=fields["domain"], split=fields["split"])

        if "vec" in fields:
            try:
                vec = np.array([float(v) for v in fields["vec"].split(",")])
            except ValueError:
                problems.append(f"{path}:{lineno}: id {sid!r} has an "
                                "unparseable inline vector")
                continue
            if vector_dim is None:
                vector_dim = vec.size
            elif vec.size != vector_dim:
                problems.append(f"{path}:{lineno}: id {sid!r} vector length "
                                f"{vec.size} != {vector_dim}")
                continue
            sample.vector = vec
        elif "blob" in fields:
            blob_path = os.path.join(base, fields["blob"])
            try:
                image = read_blob(blob_path)
            except (OSError, BlobError) as exc:
                problems.append(f"{path}:{lineno}: id {sid!r}: {exc}")
                continue
            if image.ndim != 3:
                problems.append(f"{path}:{lineno}: id {sid!r} image rank "
                                f"{image.ndim}, expected 3")
                continue
            if image_shape is None:
                image_shape = image.shape
            elif image.shape != image_shape:
                problems.append(f"{path}:{lineno}: id {sid!r} image shape "
                                f"{image.shape} != {image_shape}")
                continue
            sample.image = image
            if "mask" in fields:
                mask_path = os.path.join(base, fields["mask"])
                try:
                    mask = read_blob(mask_path)
                except (OSError, BlobError) as exc:
                    problems.append(f"{path}:{lineno}: id {sid!r}: {exc}")
                    continue
                if mask.shape != image.shape[1:]:
                    problems.append(f"{path}:{lineno}: id {sid!r} mask shape "
                                    f"{mask.shape} != {image.shape[1:]}")
                    continue
                sample.mask = mask
        else:
            problems.append(f"{path}:{lineno}: id {sid!r} has neither a blob "
                            "path nor an inline vector")
            continue
        samples.append(sample)

    if not samples and not problems:
        problems.append(f"{path}: no sample records")
    if problems:
        shown = "\n  ".join(problems[:20])
        extra = len(problems) - 20
        tail = f"\n  ... and {extra} more" if extra > 0 else ""
        raise ManifestError(f"{len(problems)} manifest problem(s):\n"
                            f"  {shown}{tail}")
    return Dataset(samples=samples, config=config)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def bbox_crop(image: np.ndarray, mask: np.ndarray,
              pad_fraction: float = 0.0005) -> np.ndarray:
    """Crop to the smallest box covering the mask, padded on each side.

    Padding is ``pad_fraction`` of the box dimension per side, rounded to
    whole pixels and clipped to the image bounds; the default keeps the
    crop essentially tight (a fraction of a pixel at desk scale).
    """
    if pad_fraction < 0:
        raise DataError(f"pad_fraction must be >= 0, got {pad_fraction}")
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None, :, :]
    if image.ndim != 3:
        raise DataError(f"image must be (C, H, W) or (H, W), got "
                        f"{image.shape}")
    mask = np.asarray(mask)
    if mask.shape != image.shape[1:]:
        raise DataError(f"mask shape {mask.shape} does not match image "
                        f"spatial size {image.shape[1:]}")
    rows = np.flatnonzero((mask > 0).any(axis=1))
    cols = np.flatnonzero((mask > 0).any(axis=0))
    if rows.size == 0:
        raise DataError("no foreground: mask has no positive pixels")
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    pad_r = int(round(pad_fraction * (r1 - r0 + 1)))
    pad_c = int(round(pad_fraction * (c1 - c0 + 1)))
    r0 = max(r0 - pad_r, 0)
    r1 = min(r1 + pad_r, image.shape[1] - 1)
    c0 = max(c0 - pad_c, 0)
    c1 = min(c1 + pad_c, image.shape[2] - 1)
    out = image[:, r0:r1 + 1, c0:c1 + 1]
    return out[0] if squeeze else out


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of a (C, H, W) array, half-pixel centers.

    Resizing to the input size reproduces the input exactly.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DataError(f"image must be (C, H, W), got {image.shape}")
    _, in_h, in_w = image.shape

    def axis_index(n_in: int, n_out: int):
        if n_in == 1:
            return np.zeros(n_out, dtype=np.intp), np.zeros(n_out)
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.minimum(src.astype(np.intp), n_in - 2)
        return lo, src - lo

    row_lo, row_w = axis_index(in_h, out_h)
    col_lo, col_w = axis_index(in_w, out_w)
    # the upper neighbour is clamped so a 1-pixel axis (weight 0) stays
    # in bounds; elsewhere lo <= n_in - 2 makes the clamp a no-op
    row_hi = np.minimum(row_lo + 1, in_h - 1)
    col_hi = np.minimum(col_lo + 1, in_w - 1)
    rows = (image[:, row_lo, :] * (1.0 - row_w)[None, :, None]
            + image[:, row_hi, :] * row_w[None, :, None])
    out = (rows[:, :, col_lo] * (1.0 - col_w)[None, None, :]
           + rows[:, :, col_hi] * col_w[None, None, :])
    return out


def resize_normalize(image: np.ndarray, target_size: int,
                     mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Bilinear-resize to ``target_size`` square, then (x - mean) / std."""
    if target_size < 2:
        raise DataError(f"target_size must be >= 2, got {target_size}")
    if std <= 0:
        raise DataError(f"std must be > 0, got {std}")
    resized = bilinear_resize(image, target_size, target_size)
    return (resized - mean) / std


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    brightness: float = 0.2        # additive delta drawn from [-b, +b]
    contrast: float = 0.2          # factor drawn from [1 - c, 1 + c]

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise DataError("flip_prob must be in [0, 1]")
        if self.brightness < 0 or self.contrast < 0:
            raise DataError("brightness and contrast ranges must be >= 0")

    @property
    def is_identity(self) -> bool:
        return (self.flip_prob == 0.0 and self.brightness == 0.0
                and self.contrast == 0.0)


def augment(image: np.ndarray, policy: AugmentPolicy,
            rng: np.random.Generator) -> np.ndarray:
    """Apply flip, then brightness, then contrast about the image mean.

    All three draws are consumed unconditionally so the stream position
    never depends on the policy values.
    """
    image = np.asarray(image, dtype=np.float64)
    do_flip = rng.random() < policy.flip_prob
    delta = rng.uniform(-policy.brightness, policy.brightness)
    factor = 1.0 + rng.uniform(-policy.contrast, policy.contrast)
    out = image[..., ::-1] if do_flip else image
    out = out + delta
    center = out.mean()
    return center + factor * (out - center)


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------

def _cell_stream(indices: np.ndarray, need: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Per-epoch index stream for one cell: a shuffled pass over the cell,
    truncated (drop-last) or extended with replacement to ``need`` draws."""
    perm = rng.permutation(indices)
    if need <= perm.size:
        return perm[:need]
    extras = rng.choice(indices, size=need - perm.size, replace=True)
    return rng.permutation(np.concatenate([perm, extras]))


def _cells_by_label(labels: np.ndarray, what: str) -> dict[int, np.ndarray]:
    labels = np.asarray(labels)
    cells = {cls: np.flatnonzero(labels == cls) for cls in (0, 1)}
    for cls, idx in cells.items():
        if idx.size == 0:
            raise DataError(f"{what} has no class-{cls} samples")
    return cells


class BalancedBatchSampler:
    """Step stream for two-domain training: every batch carries
    ``batch_size/2`` samples per domain, ``batch_size/4`` per
    (domain, class) cell.  Steps per epoch follow the largest cell
    (drop-last); smaller cells are topped up with replacement.
    """

    def __init__(self, labels_p: np.ndarray, labels_a: np.ndarray,
                 batch_size: int, seed: int):
        if batch_size % 4 != 0 or batch_size < 4:
            raise DataError(
                f"batch_size must be a positive multiple of 4, got "
                f"{batch_size}")
        self.cells_p = _cells_by_label(labels_p, "pediatric set")
        self.cells_a = _cells_by_label(labels_a, "adult set")
        self.quota = batch_size // 4
        self.seed = seed
        largest = max(idx.size for cells in (self.cells_p, self.cells_a)
                      for idx in cells.values())
        self.steps_per_epoch = max(largest // self.quota, 1)

    def epoch(self, epoch_index: int):
        """Yield ``(indices_p, indices_a)`` pairs for one epoch."""
        need = self.steps_per_epoch * self.quota
        streams = {}
        for domain, cells in (("P", self.cells_p), ("A", self.cells_a)):
            for cls, idx in cells.items():
                rng = derive_rng(self.seed, "sampler", domain, cls,
                                 epoch_index)
                streams[domain, cls] = _cell_stream(idx, need, rng)
        for step in range(self.steps_per_epoch):
            lo, hi = step * self.quota, (step + 1) * self.quota
            batch_p = np.concatenate([streams["P", 0][lo:hi],
                                      streams["P", 1][lo:hi]])
            batch_a = np.concatenate([streams["A", 0][lo:hi],
                                      streams["A", 1][lo:hi]])
            yield batch_p, batch_a


class ClassBalancedSampler:
    """Single-domain counterpart: full batches with ``batch_size/2`` per
    class, same per-cell stream rules as the two-domain sampler."""

    def __init__(self, labels: np.ndarray, batch_size: int, seed: int,
                 domain: str):
        if batch_size % 2 != 0 or batch_size < 2:
            raise DataError(
                f"batch_size must be a positive multiple of 2, got "
                f"{batch_size}")
        self.cells = _cells_by_label(labels, f"domain-{domain} set")
        self.quota = batch_size // 2
        self.seed = seed
        self.domain = domain
        largest = max(idx.size for idx in self.cells.values())
        self.steps_per_epoch = max(largest // self.quota, 1)

    def epoch(self, epoch_index: int):
        need = self.steps_per_epoch * self.quota
        streams = {
            cls: _cell_stream(idx, need,
                              derive_rng(self.seed, "sampler", self.domain,
                                         cls, epoch_index))
            for cls, idx in self.cells.items()}
        for step in range(self.steps_per_epoch):
            lo, hi = step * self.quota, (step + 1) * self.quota
            yield np.concatenate([streams[0][lo:hi], streams[1][lo:hi]])


# ---------------------------------------------------------------------------
# fold assignment
# ---------------------------------------------------------------------------

@dataclass
class FoldAssignment:
    k: int
    fold: np.ndarray               # per-sample fold index in [0, k)

    def val_mask(self, fold_index: int) -> np.ndarray:
        return self.fold == fold_index

    def train_mask(self, fold_index: int) -> np.ndarray:
        return self.fold != fold_index


def stratified_kfold(labels: np.ndarray, k: int, seed: int) -> FoldAssignment:
    """Per-class shuffled round-robin assignment into ``k`` folds."""
    labels = np.asarray(labels)
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    fold = np.full(labels.size, -1, dtype=np.int64)
    rng = derive_rng(seed, "kfold")
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.size < k:
            raise DataError(f"class {cls} has {members.size} members, "
                            f"fewer than k={k}")
        perm = rng.permutation(members)
        fold[perm] = np.arange(perm.size) % k
    return FoldAssignment(k=k, fold=fold)


# ---------------------------------------------------------------------------
# processed datasets
# ---------------------------------------------------------------------------

class ProcessedDataset:
    """Model-ready arrays with an access audit on content reads.

    ``inputs()`` is the only route to sample content; it counts every read
    per sample so tests can prove an arm never touched the other domain.
    Metadata (labels, domains, splits) is freely readable.
    """

    def __init__(self, x: np.ndarray, labels: np.ndarray,
                 domains: np.ndarray, splits: np.ndarray, ids: list[str],
                 mode: str):
        n = x.shape[0]
        if not (labels.shape == domains.shape == splits.shape == (n,)):
            raise DataError("metadata arrays must align with inputs")
        self._x = x
        self.labels = labels.astype(np.int64)
        self.domains = domains
        self.splits = splits
        self.ids = list(ids)
        self.mode = mode
        self.read_counts = np.zeros(n, dtype=np.int64)

    def __len__(self) -> int:
        return self._x.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self._x.shape[1:]

    def inputs(self, indices) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.intp)
        np.add.at(self.read_counts, indices, 1)
        return self._x[indices]

    def reset_read_counts(self) -> None:
        self.read_counts[:] = 0

    def indices(self, split: str | None = None, domain: str | None = None,
                label: int | None = None) -> np.ndarray:
        keep = np.ones(len(self), dtype=bool)
        if split is not None:
            keep &= self.splits == split
        if domain is not None:
            keep &= self.domains == domain
        if label is not None:
            keep &= self.labels == label
        return np.flatnonzero(keep)


def preprocess(dataset: Dataset, target_size: int = 32,
               pad_fraction: float = 0.0005, mean: float = 0.0,
               std: float = 1.0) -> ProcessedDataset:
    """Crop (by mask), resize, and normalize every image-mode sample;
    vector-mode samples pass through normalization only."""
    if not dataset.samples:
        raise DataError("dataset is empty")
    xs, labels, domains, splits, ids = [], [], [], [], []
    for sample in dataset.samples:
        if sample.vector is not None:
            xs.append((sample.vector - mean) / std)
        else:
            image = sample.image
            if sample.mask is not None:
                image = bbox_crop(image, sample.mask, pad_fraction)
            xs.append(resize_normalize(image, target_size, mean, std))
        labels.append(sample.label)
        domains.append(sample.domain)
        splits.append(sample.split)
        ids.append(sample.id)
    mode = "vector" if dataset.samples[0].vector is not None else "image"
    return ProcessedDataset(x=np.stack(xs), labels=np.array(labels),
                            domains=np.array(domains), splits=np.array(splits),
                            ids=ids, mode=mode)
