"""Cross-modal fusion: concatenate, project through the monotone head, add the global PE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import InversionUnsupportedError, NumericError, ShapeError

VARIANTS = ("wide", "square_theory")


@dataclass
class ProjectionHead:
    """g(x) = LeakyReLU(x @ W1) @ Wg, applied to every token row."""

    W1: ag.Tensor
    Wg: ag.Tensor
    alpha: float = 0.01
    variant: str = "wide"

    @property
    def embed_dim(self):
        return self.W1.shape[0]

    @property
    def hidden_dim(self):
        return self.W1.shape[1]


def init_projection_head(embed_dim, variant="wide", seed=0, hidden_dim=None,
                         alpha=0.01, dtype=np.float64):
    if variant not in VARIANTS:
        raise ValueError(f"unknown head variant {variant!r}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("leaky slope must lie in (0, 1]")
    if variant == "square_theory":
        hidden = embed_dim
    else:
        hidden = hidden_dim if hidden_dim is not None else 2 * embed_dim
    rng = np.random.default_rng([seed, 37])
    w1 = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(embed_dim, hidden))
    wg = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, embed_dim))
    return ProjectionHead(
        W1=ag.parameter(w1.astype(dtype), "head.W1"),
        Wg=ag.parameter(wg.astype(dtype), "head.Wg"),
        alpha=float(alpha),
        variant=variant,
    )


@ag.dual
def fuse(tokens_visual, tokens_tactile):
    """Row-wise concatenation: visual rows first, then tactile rows."""
    v, t = ag.as_tensor(tokens_visual), ag.as_tensor(tokens_tactile)
    if v.shape[-1] != t.shape[-1]:
        raise ShapeError(f"token widths differ: {v.shape[-1]} vs {t.shape[-1]}")
    if v.shape[-2] == 0 or t.shape[-2] == 0:
        raise ShapeError("each modality must contribute at least one token")
    return ag.concat([v, t], axis=-2)


@ag.dual
def project(tokens, head):
    x = ag.as_tensor(tokens)
    if x.shape[-1] != head.W1.shape[0]:
        raise ShapeError(f"token width {x.shape[-1]} does not match head input {head.W1.shape[0]}")
    h = ag.leaky_relu(ag.matmul(x, head.W1), head.alpha)
    y = ag.matmul(h, head.Wg)
    if not np.isfinite(y.data).all():
        raise NumericError("projection head produced non-finite values")
    return y


@ag.dual
def add_global_pe(projected, bank, cls_token=None):
    """Prepend the CLS row (if any) and add the global PE to all C+N rows."""
    x = ag.as_tensor(projected)
    c = bank.cls_slots
    if (cls_token is not None) != (c == 1):
        raise ShapeError(f"PE bank expects {c} CLS slot(s) but cls_token is "
                         f"{'present' if cls_token is not None else 'absent'}")
    if cls_token is not None:
        cls = ag.as_tensor(cls_token)
        if x.ndim == 3:
            cls = ag.add(cls, np.zeros((x.shape[0], 1, x.shape[-1]), dtype=x.dtype))
        x = ag.concat([cls, x], axis=-2)
    pe = bank.pe_global
    if pe is None:
        return x
    if pe.shape[0] != x.shape[-2]:
        raise ShapeError(f"global PE has {pe.shape[0]} rows, sequence has {x.shape[-2]}")
    return ag.add(x, pe)


@dataclass
class RankReport:
    matrix: str
    singular_values: np.ndarray
    min_sigma: float
    rank_deficient: bool
    condition: float


def singular_values(matrix):
    try:
        return np.linalg.svd(np.asarray(matrix, dtype=np.float64), compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc


def head_rank_audit(head, tol=1e-6):
    """Spectrum of the head's final matrix Wg (D values in both variants)."""
    wg = head.Wg.data if isinstance(head.Wg, ag.Tensor) else np.asarray(head.Wg)
    s = singular_values(wg)
    smin = float(s[-1]) if s.size else 0.0
    return RankReport(
        matrix="Wg",
        singular_values=s,
        min_sigma=smin,
        rank_deficient=smin <= tol * max(float(s[0]), 1.0),
        condition=float(s[0] / smin) if smin > 0 else float("inf"),
    )


def _leaky_inverse(z, alpha):
    return np.where(z >= 0, z, z / alpha)


def invert_fusion(x_global, head, bank, tol=1e-6):
    """Recover the concatenated modal tokens from the fused sequence.

    Only defined for the square head with both matrices full rank.
    """
    if head.variant != "square_theory" or head.W1.shape[0] != head.W1.shape[1]:
        raise InversionUnsupportedError("inversion needs the square_theory head")
    w1 = np.asarray(head.W1.data, dtype=np.float64)
    wg = np.asarray(head.Wg.data, dtype=np.float64)
    for name, w in (("W1", w1), ("Wg", wg)):
        s = singular_values(w)
        if s[-1] <= tol:
            raise InversionUnsupportedError(f"{name} is rank deficient (min sigma {s[-1]:.3g})")
    x = np.asarray(x_global.data if isinstance(x_global, ag.Tensor) else x_global, dtype=np.float64)
    if bank.pe_global is not None:
        x = x - bank.pe_global.data
    x = x[..., bank.cls_slots:, :]
    # right-multiplication by an inverse == solving the transposed system
    z = np.linalg.solve(wg.T, np.swapaxes(x, -1, -2))
    h = _leaky_inverse(np.swapaxes(z, -1, -2), head.alpha)
    return np.swapaxes(np.linalg.solve(w1.T, np.swapaxes(h, -1, -2)), -1, -2)


class SingularValueLog:
    """CSV log of head spectra: epoch, sigma_1..sigma_D, min_sigma."""

    def __init__(self, path, dim):
        self.path = path
        self.dim = dim
        with open(path, "w") as fh:
            cols = ",".join(f"sigma_{i + 1}" for i in range(dim))
            fh.write(f"epoch,{cols},min_sigma\n")

    def append(self, epoch, report):
        vals = ",".join(f"{v:.10g}" for v in report.singular_values)
        with open(self.path, "a") as fh:
            fh.write(f"{epoch},{vals},{report.min_sigma:.10g}\n")
