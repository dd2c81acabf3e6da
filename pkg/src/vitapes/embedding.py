"""Patch tokenisation and the positional-encoding bank.

A modality image ``[ch, side, side]`` is cut into non-overlapping square
patches in raster order (row-major over the patch grid); each patch is
flattened channel-major, so element ``(c, y, x)`` of a patch lands at
column ``c * p * p + y * p + x``.  Batched inputs carry one extra leading
axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import AuditError, ConfigError, ShapeError

SCHEMES = ("learnable", "sinusoidal", "off")


@dataclass(frozen=True)
class TokenizerConfig:
    patch_size: int = 8
    embed_dim: int = 64
    visual_side: int = 64
    tactile_side: int = 64
    channels: int = 3

    def validate(self):
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive", "embed_dim")
        for name in ("visual_side", "tactile_side"):
            side = getattr(self, name)
            if side <= 0 or side % self.patch_size:
                raise ConfigError(
                    f"{name}={side} is not divisible by patch_size={self.patch_size}", name
                )
        return self

    @property
    def n_visual(self):
        return (self.visual_side // self.patch_size) ** 2

    @property
    def n_tactile(self):
        return (self.tactile_side // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch_size**2

    def grid(self, modality):
        side = self.visual_side if modality == "visual" else self.tactile_side
        return side // self.patch_size


def patchify(image, patch_size):
    """[..., ch, s, s] -> [..., N, ch * p * p] in raster patch order."""
    image = np.asarray(image)
    *lead, ch, h, w = image.shape
    if h != w:
        raise ShapeError(f"expected square images, got {h}x{w}")
    if h % patch_size:
        raise ShapeError(f"side {h} is not divisible by patch size {patch_size}")
    g = h // patch_size
    x = image.reshape(*lead, ch, g, patch_size, g, patch_size)
    k = len(lead)
    x = x.transpose(*range(k), k + 1, k + 3, k, k + 2, k + 4)
    return np.ascontiguousarray(x.reshape(*lead, g * g, ch * patch_size * patch_size))


def unpatchify(patches, patch_size, channels):
    """Exact inverse of :func:`patchify`."""
    patches = np.asarray(patches)
    *lead, n, dim = patches.shape
    g = int(round(np.sqrt(n)))
    if g * g != n or dim != channels * patch_size**2:
        raise ShapeError(f"cannot unpatchify {patches.shape} with patch {patch_size}, ch {channels}")
    k = len(lead)
    x = patches.reshape(*lead, g, g, channels, patch_size, patch_size)
    x = x.transpose(*range(k), k + 2, k, k + 3, k + 1, k + 4)
    return np.ascontiguousarray(x.reshape(*lead, channels, g * patch_size, g * patch_size))


@ag.dual
def embed_tokens(patches, weight):
    """Tokens = patches @ W  ([..., N, P] @ [P, D])."""
    p, w = ag.as_tensor(patches), ag.as_tensor(weight)
    if w.ndim != 2 or p.shape[-1] != w.shape[0]:
        raise ShapeError(f"patch dim {p.shape[-1]} does not match projection {w.shape}")
    return ag.matmul(p, w)


@ag.dual
def add_modal_pe(tokens, pe):
    t, e = ag.as_tensor(tokens), ag.as_tensor(pe)
    if t.shape[-2:] != e.shape:
        raise ShapeError(f"token block {t.shape} and PE {e.shape} disagree")
    return ag.add(t, e)


@dataclass
class PatchProjection:
    W_visual: ag.Tensor | None
    W_tactile: ag.Tensor | None


def init_patch_projection(cfg, seed, modality="both", dtype=np.float64):
    rng = np.random.default_rng([seed, 11])
    std = 1.0 / np.sqrt(cfg.patch_dim)
    wv = rng.normal(0.0, std, size=(cfg.patch_dim, cfg.embed_dim)).astype(dtype)
    wt = rng.normal(0.0, std, size=(cfg.patch_dim, cfg.embed_dim)).astype(dtype)
    return PatchProjection(
        W_visual=ag.parameter(wv, "patch.W_visual") if modality != "touch_only" else None,
        W_tactile=ag.parameter(wt, "patch.W_tactile") if modality != "vision_only" else None,
    )


def sinusoidal_table(n_rows, dim, start=0):
    """Interleaved sin/cos table: row p, columns (2i, 2i+1) hold
    sin(p * w_i), cos(p * w_i) with w_i = 10000 ** (-2i / dim)."""
    pos = np.arange(start, start + n_rows, dtype=np.float64)[:, None]
    i = np.arange((dim + 1) // 2, dtype=np.float64)[None, :]
    angle = pos * np.power(10000.0, -2.0 * i / dim)
    table = np.empty((n_rows, dim))
    table[:, 0::2] = np.sin(angle)[:, : (dim + 1) // 2]
    table[:, 1::2] = np.cos(angle)[:, : dim // 2]
    return table


@dataclass
class PeBank:
    """Visual, tactile and global PE tables; a table is None when its scheme is 'off'."""

    pe_visual: ag.Tensor | None
    pe_tactile: ag.Tensor | None
    pe_global: ag.Tensor | None
    schemes: dict
    cls_slots: int = 0

    def tables(self):
        out = {}
        for name in ("visual", "tactile", "global"):
            t = getattr(self, f"pe_{name}")
            if t is not None:
                out[name] = t
        return out

    @property
    def learnable(self):
        return {k: v == "learnable" for k, v in self.schemes.items()}


def _normalize_schemes(scheme):
    if isinstance(scheme, str):
        schemes = {"visual": scheme, "tactile": scheme, "global": scheme}
    else:
        schemes = dict(scheme)
    for key in ("visual", "tactile", "global"):
        value = schemes.setdefault(key, "learnable")
        if value not in SCHEMES:
            raise ConfigError(f"unknown PE scheme {value!r} for {key}", f"pe_{key}")
    return schemes


def init_pe_bank(
    cfg,
    scheme="learnable",
    seed=0,
    use_cls=False,
    modality="both",
    global_index="concatenated",
    init_std=1.0,
    dtype=np.float64,
    check_distinct=True,
):
    """Create the PE bank.

    ``scheme`` is one scheme for all tables or a mapping per table.
    Learnable tables are i.i.d. N(0, init_std^2); sinusoidal tables are
    fixed.  ``global_index`` picks whether the sinusoid index of the
    global table runs over the concatenated sequence or restarts for the
    tactile block.
    """
    cfg.validate()
    schemes = _normalize_schemes(scheme)
    if global_index not in ("concatenated", "per_modality"):
        raise ConfigError(f"unknown global_index {global_index!r}", "global_index")
    c = 1 if use_cls else 0
    nv = cfg.n_visual if modality != "touch_only" else 0
    nt = cfg.n_tactile if modality != "vision_only" else 0
    d = cfg.embed_dim
    rng = np.random.default_rng([seed, 23])
    # always draw all three so that disabling one table never changes the others
    draws = {
        "visual": rng.normal(0.0, init_std, size=(cfg.n_visual, d)),
        "tactile": rng.normal(0.0, init_std, size=(cfg.n_tactile, d)),
        "global": rng.normal(0.0, init_std, size=(c + cfg.n_visual + cfg.n_tactile, d)),
    }
    rows = {"visual": nv, "tactile": nt, "global": c + nv + nt}

    def build(name):
        kind = schemes[name]
        n = rows[name]
        if kind == "off" or n == 0:
            return None
        if kind == "learnable":
            if name == "global":
                full = draws["global"]
                keep = list(range(c))
                if nv:
                    keep += list(range(c, c + cfg.n_visual))
                if nt:
                    keep += list(range(c + cfg.n_visual, c + cfg.n_visual + cfg.n_tactile))
                table = full[keep]
            else:
                table = draws[name]
            if check_distinct:
                _assert_rows_distinct(table, name)
            return ag.parameter(table.astype(dtype), f"pe.{name}")
        if name == "global" and global_index == "per_modality":
            parts = []
            if c:
                parts.append(sinusoidal_table(c, d))
            if nv:
                parts.append(sinusoidal_table(nv, d, start=c))
            if nt:
                parts.append(sinusoidal_table(nt, d, start=c))
            table = np.concatenate(parts)
        else:
            table = sinusoidal_table(n, d)
        return ag.Tensor(table.astype(dtype), name=f"pe.{name}")

    return PeBank(
        pe_visual=build("visual"),
        pe_tactile=build("tactile"),
        pe_global=build("global"),
        schemes=schemes,
        cls_slots=c,
    )


def _assert_rows_distinct(table, name):
    uniq = np.unique(table, axis=0)
    if uniq.shape[0] != table.shape[0]:
        raise AuditError(f"PE table {name} has duplicated rows at initialisation")


@dataclass
class CosineAudit:
    matrix: np.ndarray
    max_off_diagonal: float
    min_off_diagonal: float
    mean_off_diagonal: float
    collapsed: bool
    labels: list


def cosine_matrix(rows):
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise AuditError(f"PE row {int(zero[0])} has zero norm; cosine undefined", row=int(zero[0]))
    unit = rows / norms[:, None]
    m = unit @ unit.T
    np.fill_diagonal(m, 1.0)
    return m


def pe_uniqueness_audit(bank, tables=("visual", "tactile", "global"), tol=1e-6):
    """Cosine similarity between every pair of PE rows across the given tables."""
    if isinstance(bank, PeBank):
        present = bank.tables()
        blocks = [(name, present[name].data) for name in tables if name in present]
    else:
        blocks = [("rows", np.asarray(bank))]
    if not blocks:
        raise AuditError("no PE tables to audit")
    labels = [f"{name}[{i}]" for name, blk in blocks for i in range(blk.shape[0])]
    rows = np.concatenate([blk for _, blk in blocks])
    m = cosine_matrix(rows)
    if rows.shape[0] < 2:
        return CosineAudit(m, 0.0, 0.0, 0.0, False, labels)
    off = m[~np.eye(m.shape[0], dtype=bool)]
    mx = float(off.max())
    return CosineAudit(
        matrix=m,
        max_off_diagonal=mx,
        min_off_diagonal=float(off.min()),
        mean_off_diagonal=float(off.mean()),
        collapsed=mx >= 1.0 - tol,
        labels=labels,
    )


def export_pe_csv(table, path):
    table = np.asarray(table.data if isinstance(table, ag.Tensor) else table)
    with open(path, "w") as fh:
        fh.write("token," + ",".join(f"d{j}" for j in range(table.shape[1])) + "\n")
        for i, row in enumerate(table):
            fh.write(f"{i}," + ",".join(f"{v:.8g}" for v in row) + "\n")


def write_pgm(matrix, path):
    """8-bit binary PGM heatmap, min-max scaled."""
    m = np.asarray(matrix.data if isinstance(matrix, ag.Tensor) else matrix, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    scaled = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
