"""Deterministic paired visual/tactile synthetic data.

Every sample is rendered from a class latent.  The class id ``k`` is
split into a *group* ``k // 2`` and a *parity* ``k % 2``:

* the visual image carries the parity strongly (shape colour) and the
  group only weakly (shape outline, swapped for a random one on a
  fraction of samples);
* the tactile image carries the group strongly (grating frequency band)
  and the parity weakly (a one-cycle frequency offset that is muddied by
  per-sample frequency jitter); the contact blob is a nuisance.

Either modality alone is therefore informative but incomplete, and the
fused pair is close to fully determined.  Grating frequency is strictly
increasing in the class id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, SplitError

# parity colours (RGB) and tactile gel tint
_PALETTE = np.array([[0.85, 0.25, 0.2], [0.2, 0.35, 0.85]])
_SHAPES = ("disk", "square", "triangle", "ring", "cross", "diamond")


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    num_classes: int = 4
    image_side: int = 64
    channels: int = 3
    samples_per_class: int = 50
    domain_shift: float = 0.0
    noise_sigma: float = 0.05
    patch_size: int = 8
    shape_swap_prob: float = 0.3
    freq_jitter: float = 1.0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", "num_classes")
        if self.image_side <= 0 or self.patch_size <= 0:
            raise ConfigError("image_side and patch_size must be positive", "image_side")
        if self.image_side % self.patch_size:
            raise ConfigError(
                f"image_side {self.image_side} not divisible by patch_size {self.patch_size}",
                "image_side",
            )
        if self.channels < 1:
            raise ConfigError("channels must be >= 1", "channels")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1", "samples_per_class")
        if not 0.0 <= self.domain_shift <= 1.0:
            raise ConfigError("domain_shift must lie in [0, 1]", "domain_shift")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0", "noise_sigma")
        return self


@dataclass(frozen=True)
class VisuoTactilePair:
    visual: np.ndarray
    tactile: np.ndarray
    label: int
    domain: str


def grating_frequency(label, side):
    """Nominal tactile grating frequency (cycles per image side) of a class."""
    base = max(2.0, side / 16.0)
    return base + 4.0 * (label // 2) + (label % 2)


def _coords(side):
    ax = (np.arange(side) + 0.5) / side
    return np.meshgrid(ax, ax, indexing="ij")


def _shape_mask(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(kind)


def _channel_colors(rgb, channels):
    if channels == 3:
        return rgb
    return np.resize(rgb, channels)


def render_pair(cfg, label, index, domain_shift=None):
    """Render one sample; pure function of (cfg.seed, label, index, shift)."""
    shift = cfg.domain_shift if domain_shift is None else float(domain_shift)
    side, ch = cfg.image_side, cfg.channels
    rng = np.random.default_rng([cfg.seed, label, index])
    yy, xx = _coords(side)
    group, parity = label // 2, label % 2
    n_groups = (cfg.num_classes + 1) // 2

    # latent draws happen in a fixed order so that domain_shift never
    # changes which random numbers feed which attribute
    shape_idx = group % len(_SHAPES)
    swap = rng.random() < cfg.shape_swap_prob
    swap_to = int(rng.integers(0, min(len(_SHAPES), max(n_groups, 2))))
    cy, cx = rng.uniform(0.3, 0.7, size=2)
    radius = rng.uniform(0.16, 0.24)
    color_jit = rng.normal(0.0, 0.04, size=3)
    vis_noise = rng.normal(0.0, 1.0, size=(ch, side, side))
    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    fjit = rng.uniform(-cfg.freq_jitter, cfg.freq_jitter)
    by, bx = rng.uniform(0.25, 0.75, size=2)
    bsig = rng.uniform(0.1, 0.16)
    depth = rng.uniform(0.05, 0.2)
    tac_noise = rng.normal(0.0, 1.0, size=(ch, side, side))

    if swap:
        shape_idx = swap_to
    kind = _SHAPES[shape_idx]

    # visual: parity colour, group shape, palette rotated by the domain shift
    rgb = _PALETTE[parity] + color_jit
    rgb = np.roll(rgb, 1) * shift + rgb * (1.0 - shift)
    colors = _channel_colors(np.clip(rgb, 0.0, 1.0), ch)
    mask = _shape_mask(kind, yy, xx, cy, cx, radius)
    visual = np.full((ch, side, side), 0.5)
    visual[:, mask] = colors[:, None]
    visual += cfg.noise_sigma * vis_noise

    # tactile: oriented grating + contact blob; domain shift offsets the phase
    freq = grating_frequency(label, side) + fjit
    u = np.cos(theta) * yy + np.sin(theta) * xx
    grating = np.sin(2 * np.pi * freq * u + phase + np.pi * shift)
    blob = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * bsig**2))
    tint = _channel_colors(np.array([0.45, 0.5, 0.55]), ch)
    tactile = tint[:, None, None] + 0.18 * grating[None]
    tactile = tactile + depth * blob[None] + cfg.noise_sigma * tac_noise

    domain = "source" if shift == 0 else f"shift{shift:g}"
    return VisuoTactilePair(
        visual=np.clip(visual, 0.0, 1.0).astype(np.float32),
        tactile=np.clip(tactile, 0.0, 1.0).astype(np.float32),
        label=int(label),
        domain=domain,
    )


def generate_dataset(cfg):
    """All K x samples_per_class pairs, ordered by (class, index)."""
    cfg.validate()
    return [
        render_pair(cfg, k, i)
        for k in range(cfg.num_classes)
        for i in range(cfg.samples_per_class)
    ]


def split(dataset, train_fraction, seed):
    """Label-stratified random split into (train, test)."""
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_class = {}
    for i, pair in enumerate(dataset):
        by_class.setdefault(pair.label, []).append(i)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < 2:
            raise SplitError(f"class {label} has fewer than 2 samples")
        idx = rng.permutation(idx)
        n_train = int(round(train_fraction * len(idx)))
        n_train = min(max(n_train, 1), len(idx) - 1)
        train_idx.extend(idx[:n_train].tolist())
        test_idx.extend(idx[n_train:].tolist())
    train_idx.sort()
    test_idx.sort()
    return [dataset[i] for i in train_idx], [dataset[i] for i in test_idx]


def stack(pairs):
    """Batch arrays (visual [B,ch,s,s], tactile [B,ch,s,s], labels [B])."""
    visual = np.stack([p.visual for p in pairs])
    tactile = np.stack([p.tactile for p in pairs])
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    return visual, tactile, labels


# -- binary container ---------------------------------------------------------

DATASET_MAGIC = b"VTPE"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def dump_dataset(dataset, path, num_classes=None):
    """Write pairs as ``VTPE`` header + float32 visual block + float32
    tactile block + u32 labels + u32-length-prefixed UTF-8 domain tags."""
    if not dataset:
        raise FormatError("cannot dump an empty dataset")
    ch, side, _ = dataset[0].visual.shape
    k = num_classes if num_classes is not None else max(p.label for p in dataset) + 1
    visual, tactile, labels = stack(dataset)
    tags = "\n".join(p.domain for p in dataset).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, k, side, ch, len(dataset)))
        fh.write(visual.astype("<f4").tobytes())
        fh.write(tactile.astype("<f4").tobytes())
        fh.write(labels.astype("<u4").tobytes())
        fh.write(struct.pack("<I", len(tags)))
        fh.write(tags)


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated dataset header")
    magic, version, k, side, ch, count = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    off = _HEADER.size
    n = count * ch * side * side
    need = off + 8 * n + 4 * count + 4
    if len(raw) < need:
        raise FormatError("truncated dataset body")
    visual = np.frombuffer(raw, "<f4", n, off).reshape(count, ch, side, side)
    off += 4 * n
    tactile = np.frombuffer(raw, "<f4", n, off).reshape(count, ch, side, side)
    off += 4 * n
    labels = np.frombuffer(raw, "<u4", count, off)
    off += 4 * count
    (tag_len,) = struct.unpack_from("<I", raw, off)
    tags = raw[off + 4 : off + 4 + tag_len].decode("utf-8").split("\n")
    pairs = [
        VisuoTactilePair(
            visual=visual[i].astype(np.float32),
            tactile=tactile[i].astype(np.float32),
            label=int(labels[i]),
            domain=tags[i],
        )
        for i in range(count)
    ]
    return pairs, int(k)
