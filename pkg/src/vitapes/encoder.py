"""Pre-norm transformer encoder over the fused visuotactile sequence.

The model is a flat dict of named :class:`~vitapes.autograd.Tensor`
parameters plus a :class:`ModelConfig`.  Sequences are laid out as
``[CLS?] + visual tokens (raster order) + tactile tokens (raster order)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autograd as ag
from .embedding import PatchProjection, PeBank, TokenizerConfig, init_pe_bank, patchify
from .errors import ConfigError, NumericError, ShapeError
from .fusion import ProjectionHead, add_global_pe, fuse, init_projection_head, project

MODALITIES = ("both", "vision_only", "touch_only")


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    heads: int = 2
    embed_dim: int = 64
    mlp_ratio: float = 4.0

    def validate(self, allow_empty=False):
        if self.depth < (0 if allow_empty else 1):
            raise ConfigError("depth must be >= 1", "depth")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}", "heads")
        return self

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def mlp_dim(self):
        return int(round(self.mlp_ratio * self.embed_dim))


@dataclass(frozen=True)
class ModelConfig:
    name: str = "desk"
    embed_dim: int = 64
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    patch_size: int = 8
    visual_side: int = 64
    tactile_side: int = 64
    channels: int = 3
    head_variant: str = "wide"
    head_hidden: int | None = None
    leaky_slope: float = 0.01
    use_cls: bool = False
    pool: str = "mean"
    pe_visual: str = "learnable"
    pe_tactile: str = "learnable"
    pe_global: str = "learnable"
    global_index: str = "concatenated"
    pe_init_std: float = 1.0
    modality: str = "both"
    num_classes: int = 4
    dtype: str = "float32"
    ln_eps: float = 1e-5
    pixel_mean: float = 0.5         # inputs are standardised before patchify
    pixel_std: float = 0.25

    @property
    def tokenizer(self):
        return TokenizerConfig(self.patch_size, self.embed_dim, self.visual_side,
                               self.tactile_side, self.channels)

    @property
    def encoder(self):
        return EncoderConfig(self.depth, self.heads, self.embed_dim, self.mlp_ratio)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def cls_slots(self):
        return 1 if self.use_cls else 0

    @property
    def n_visual(self):
        return self.tokenizer.n_visual if self.modality != "touch_only" else 0

    @property
    def n_tactile(self):
        return self.tokenizer.n_tactile if self.modality != "vision_only" else 0

    @property
    def hidden_dim(self):
        if self.head_variant == "square_theory":
            return self.embed_dim
        return self.head_hidden if self.head_hidden is not None else 2 * self.embed_dim

    def validate(self, allow_empty=False):
        self.tokenizer.validate()
        self.encoder.validate(allow_empty=allow_empty)
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}", "modality")
        if self.pool not in ("mean", "cls"):
            raise ConfigError(f"unknown pool mode {self.pool!r}", "pool")
        if self.pool == "cls" and not self.use_cls:
            raise ConfigError("pool='cls' requires use_cls=true", "pool")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", "num_classes")
        if not self.pixel_std > 0:
            raise ConfigError("pixel_std must be positive", "pixel_std")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}", "dtype")
        return self

    def to_dict(self):
        return asdict(self)


# named variants; minimal/moderate/balanced share d=384 and differ in depth and heads
NAMED_CONFIGS = {
    "theory_micro": dict(embed_dim=8, depth=1, heads=1, mlp_ratio=1.0, patch_size=2,
                         visual_side=4, tactile_side=4, channels=2,
                         head_variant="square_theory", dtype="float64", pixel_mean=0.0, pixel_std=1.0),
    "desk": dict(embed_dim=64, depth=2, heads=2, visual_side=32, tactile_side=32),
    "balanced_micro": dict(embed_dim=32, depth=4, heads=4, visual_side=32, tactile_side=32),
    "scale_micro": dict(embed_dim=32, depth=1, heads=1, visual_side=32, tactile_side=32),
    "minimal": dict(embed_dim=384, depth=3, heads=3, head_hidden=768),
    "moderate": dict(embed_dim=384, depth=6, heads=6, head_hidden=768),
    "balanced": dict(embed_dim=384, depth=12, heads=12, head_hidden=768),
    "extended": dict(embed_dim=768, depth=12, heads=12, head_hidden=768),
    "full_scale": dict(embed_dim=384, depth=12, heads=12, head_hidden=768, patch_size=16,
                       visual_side=224, tactile_side=224),
}


def named_config(name, **overrides):
    if name not in NAMED_CONFIGS:
        raise ConfigError(f"unknown model config {name!r}; known: {sorted(NAMED_CONFIGS)}", "model.name")
    base = dict(NAMED_CONFIGS[name])
    base.update(overrides)
    return ModelConfig(name=name, **base)


class EncoderModel:
    """Parameter container for the full visuotactile encoder."""

    def __init__(self, cfg, params, seed=0):
        self.cfg = cfg
        self.params = params
        self.seed = seed

    # structured views -------------------------------------------------------
    @property
    def patch(self):
        return PatchProjection(self.params.get("patch.W_visual"), self.params.get("patch.W_tactile"))

    @property
    def bank(self):
        c = self.cfg
        return PeBank(
            pe_visual=self.params.get("pe.visual"),
            pe_tactile=self.params.get("pe.tactile"),
            pe_global=self.params.get("pe.global"),
            schemes={"visual": c.pe_visual, "tactile": c.pe_tactile, "global": c.pe_global},
            cls_slots=c.cls_slots,
        )

    @property
    def head(self):
        return ProjectionHead(self.params["head.W1"], self.params["head.Wg"],
                              self.cfg.leaky_slope, self.cfg.head_variant)

    @property
    def cls(self):
        return self.params.get("cls")

    # parameter bookkeeping ----------------------------------------------------
    def parameters(self, prefix=None):
        return [t for n, t in self.params.items()
                if t.requires_grad and (prefix is None or n.startswith(prefix))]

    def named_parameters(self):
        return [(n, t) for n, t in self.params.items() if t.requires_grad]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def num_parameters(self, trainable_only=True, include=None):
        total = 0
        for n, t in self.params.items():
            if trainable_only and not t.requires_grad:
                continue
            if include is not None and not any(n.startswith(p) for p in include):
                continue
            total += t.data.size
        return total

    def state_dict(self):
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state, strict=True):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if strict and (missing or extra):
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, arr in state.items():
            if n not in self.params:
                continue
            if self.params[n].shape != arr.shape:
                raise ShapeError(f"{n}: expected {self.params[n].shape}, got {arr.shape}")
            self.params[n].data = np.array(arr, dtype=self.params[n].dtype)

    def fingerprint(self):
        """Short hash of config + parameter bytes."""
        h = hashlib.sha256(json.dumps(self.cfg.to_dict(), sort_keys=True).encode())
        for n in sorted(self.params):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()[:16]

    def clone(self):
        params = {n: ag.Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
                  for n, t in self.params.items()}
        return EncoderModel(self.cfg, params, self.seed)


def _dense(rng, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def init_block(p, d, m, rng, dt):
    params = {}
    params[p + "ln1.g"] = ag.parameter(np.ones(d, dt), p + "ln1.g")
    params[p + "ln1.b"] = ag.parameter(np.zeros(d, dt), p + "ln1.b")
    for w in ("q", "k", "v", "o"):
        params[p + f"attn.W{w}"] = ag.parameter(_dense(rng, d, d, dt), p + f"attn.W{w}")
        params[p + f"attn.b{w}"] = ag.parameter(np.zeros(d, dt), p + f"attn.b{w}")
    params[p + "ln2.g"] = ag.parameter(np.ones(d, dt), p + "ln2.g")
    params[p + "ln2.b"] = ag.parameter(np.zeros(d, dt), p + "ln2.b")
    params[p + "mlp.W1"] = ag.parameter(_dense(rng, d, m, dt), p + "mlp.W1")
    params[p + "mlp.b1"] = ag.parameter(np.zeros(m, dt), p + "mlp.b1")
    params[p + "mlp.W2"] = ag.parameter(_dense(rng, m, d, dt), p + "mlp.W2")
    params[p + "mlp.b2"] = ag.parameter(np.zeros(d, dt), p + "mlp.b2")
    return params


def build_model(cfg, seed=0, allow_empty=False):
    """Initialise every parameter deterministically from ``seed``."""
    cfg.validate(allow_empty=allow_empty)
    dt = cfg.np_dtype
    tok = cfg.tokenizer
    d = cfg.embed_dim
    params = {}

    from .embedding import init_patch_projection

    proj = init_patch_projection(tok, seed, cfg.modality, dt)
    if proj.W_visual is not None:
        params["patch.W_visual"] = proj.W_visual
    if proj.W_tactile is not None:
        params["patch.W_tactile"] = proj.W_tactile

    bank = init_pe_bank(
        tok,
        {"visual": cfg.pe_visual, "tactile": cfg.pe_tactile, "global": cfg.pe_global},
        seed=seed, use_cls=cfg.use_cls, modality=cfg.modality,
        global_index=cfg.global_index, init_std=cfg.pe_init_std, dtype=dt,
    )
    for name, table in bank.tables().items():
        params[f"pe.{name}"] = table

    head = init_projection_head(d, cfg.head_variant, seed, cfg.hidden_dim, cfg.leaky_slope, dt)
    params["head.W1"] = head.W1
    params["head.Wg"] = head.Wg

    if cfg.use_cls:
        rng = np.random.default_rng([seed, 41])
        params["cls"] = ag.parameter(rng.normal(0.0, 0.02, size=(1, d)).astype(dt), "cls")

    m = cfg.encoder.mlp_dim
    for i in range(cfg.depth):
        params.update(init_block(f"blocks.{i}.", d, m, np.random.default_rng([seed, 100 + i]), dt))

    params["norm.g"] = ag.parameter(np.ones(d, dt), "norm.g")
    params["norm.b"] = ag.parameter(np.zeros(d, dt), "norm.b")
    rng = np.random.default_rng([seed, 53])
    k = cfg.num_classes
    params["classifier.W"] = ag.parameter(rng.normal(0.0, 0.02, size=(d, k)).astype(dt), "classifier.W")
    params["classifier.b"] = ag.parameter(np.zeros(k, dt), "classifier.b")
    return EncoderModel(cfg, params, seed)


def count_parameters(cfg):
    """Closed-form count of trainable parameters built by :func:`build_model`."""
    d = cfg.embed_dim
    m = cfg.encoder.mlp_dim
    p = cfg.tokenizer.patch_dim
    nv, nt, c = cfg.n_visual, cfg.n_tactile, cfg.cls_slots
    total = 0
    total += p * d * ((nv > 0) + (nt > 0))
    total += d * nv * (cfg.pe_visual == "learnable")
    total += d * nt * (cfg.pe_tactile == "learnable")
    total += d * (c + nv + nt) * (cfg.pe_global == "learnable")
    total += 2 * d * cfg.hidden_dim
    total += c * d
    total += cfg.depth * (4 * d * d + 2 * d * m + 9 * d + m)
    total += 2 * d
    total += d * cfg.num_classes + cfg.num_classes
    return total


# -- attention -----------------------------------------------------------------

@ag.dual
def attention(q, k, v, mask=None, return_weights=False):
    """softmax(q k^T / sqrt(d_k) + mask) v over the last two axes.

    ``mask`` is an additive array broadcastable to the score matrix
    (use ``-np.inf`` to forbid a key).
    """
    q, k, v = ag.as_tensor(q), ag.as_tensor(k), ag.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    for t in (q, k, v):
        if np.isnan(t.data).any():
            raise NumericError("NaN in attention input")
    dk = q.shape[-1]
    scores = ag.mul(ag.matmul(q, ag.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dk))
    if mask is not None:
        scores = ag.add(scores, np.asarray(mask, dtype=scores.dtype))
    w = ag.softmax(scores)
    out = ag.matmul(w, v)
    return (out, w) if return_weights else out


@dataclass
class AttentionTrace:
    """Post-softmax weights per layer, each [B, heads, T, T]."""

    weights: list
    cls_slots: int
    n_visual: int
    n_tactile: int

    def spans(self):
        c, nv, nt = self.cls_slots, self.n_visual, self.n_tactile
        return {"cls": slice(0, c), "vis": slice(c, c + nv), "tac": slice(c + nv, c + nv + nt)}

    def blocks(self, layer, head, sample=0):
        w = self.weights[layer][sample, head]
        s = self.spans()
        return {
            "vv": w[s["vis"], s["vis"]],
            "vt": w[s["vis"], s["tac"]],
            "tv": w[s["tac"], s["vis"]],
            "tt": w[s["tac"], s["tac"]],
            "cls_row": w[s["cls"], :],
            "cls_col": w[:, s["cls"]],
        }


def cross_attention_mass(trace):
    """Mean (over query rows and samples) attention mass landing in each
    modality key block; one dict per (layer, head)."""
    s = trace.spans()
    rows = []
    for layer, w in enumerate(trace.weights):
        for h in range(w.shape[1]):
            wh = w[:, h]
            entry = {"layer": layer, "head": h}
            for key, (qs, ks) in {
                "vv": (s["vis"], s["vis"]), "vt": (s["vis"], s["tac"]),
                "tv": (s["tac"], s["vis"]), "tt": (s["tac"], s["tac"]),
            }.items():
                block = wh[:, qs, ks]
                entry[key] = float(block.sum(axis=-1).mean()) if block.shape[1] else 0.0
            rows.append(entry)
    return rows


def write_attention_mass_csv(rows, path):
    with open(path, "w") as fh:
        fh.write("layer,head,vv,vt,tv,tt\n")
        for r in rows:
            fh.write(f"{r['layer']},{r['head']},{r['vv']:.8g},{r['vt']:.8g},{r['tv']:.8g},{r['tt']:.8g}\n")


def transformer_block(params, p, x, heads, eps, capture=None):
    """One pre-norm block; parameter names are ``p + 'ln1.g'`` etc."""
    b, t, d = x.shape
    dk = d // heads
    h = ag.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], eps)

    def split(w):
        y = ag.add(ag.matmul(h, params[p + f"attn.W{w}"]), params[p + f"attn.b{w}"])
        return ag.transpose(ag.reshape(y, (b, t, heads, dk)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    out, w = attention(q, k, v, return_weights=True)
    out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (b, t, d))
    out = ag.add(ag.matmul(out, params[p + "attn.Wo"]), params[p + "attn.bo"])
    x = ag.add(x, out)
    h = ag.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], eps)
    h = ag.gelu(ag.add(ag.matmul(h, params[p + "mlp.W1"]), params[p + "mlp.b1"]))
    h = ag.add(ag.matmul(h, params[p + "mlp.W2"]), params[p + "mlp.b2"])
    if capture is not None:
        capture.append(w.data.copy())
    return ag.add(x, h)


def encoder_forward(model, x_global, trace=False, n_visual=None, n_tactile=None):
    """Run the L transformer blocks; returns (tokens, AttentionTrace | None).

    Accepts a single sequence [T, D] or a batch [B, T, D].  ``n_visual``
    and ``n_tactile`` describe the block layout for the trace when the
    sequence is a masked subset.
    """
    cfg = model.cfg
    x = ag.as_tensor(x_global)
    single = x.ndim == 2
    if single:
        x = ag.reshape(x, (1,) + x.shape)
    if x.shape[-1] != cfg.embed_dim:
        raise ShapeError(f"token width {x.shape[-1]} != embed_dim {cfg.embed_dim}")
    nv = cfg.n_visual if n_visual is None else n_visual
    nt = cfg.n_tactile if n_tactile is None else n_tactile
    if x.shape[1] != cfg.cls_slots + nv + nt:
        raise ShapeError(f"sequence has {x.shape[1]} rows, expected {cfg.cls_slots + nv + nt}")
    capture = [] if trace else None
    for i in range(cfg.depth):
        x = transformer_block(model.params, f"blocks.{i}.", x, cfg.heads, cfg.ln_eps, capture)
    if single:
        x = ag.reshape(x, x.shape[1:])
    tr = AttentionTrace(capture, cfg.cls_slots, nv, nt) if trace else None
    if not isinstance(x_global, ag.Tensor):
        x = x.data
    return x, tr


@ag.dual
def pool(tokens, mode="mean", cls_slots=0):
    """CLS row (mode 'cls') or mean over the non-CLS rows (mode 'mean')."""
    t = ag.as_tensor(tokens)
    if mode == "cls":
        if cls_slots != 1:
            raise ConfigError("cls pooling requested but the sequence has no CLS token", "pool")
        return t[(Ellipsis, 0, slice(None))]
    if mode != "mean":
        raise ConfigError(f"unknown pool mode {mode!r}", "pool")
    body = t[(Ellipsis, slice(cls_slots, None), slice(None))] if cls_slots else t
    return ag.mean(body, axis=-2)


# -- full forward paths ------------------------------------------------------------

def standardize(images, cfg):
    x = np.asarray(images, dtype=cfg.np_dtype)
    if cfg.pixel_mean == 0.0 and cfg.pixel_std == 1.0:
        return x
    return ((x - cfg.pixel_mean) / cfg.pixel_std).astype(cfg.np_dtype, copy=False)


def modal_tokens(model, visual, tactile):
    """Patchify + embed + modal PE; returns (X_vis_modal, X_tac_modal),
    either of which is None when that modality is disabled."""
    cfg = model.cfg
    dt = cfg.np_dtype
    out = []
    for name, img, w_key, pe_key in (
        ("visual", visual, "patch.W_visual", "pe.visual"),
        ("tactile", tactile, "patch.W_tactile", "pe.tactile"),
    ):
        w = model.params.get(w_key)
        if w is None:
            out.append(None)
            continue
        if img is None:
            raise ShapeError(f"{name} input required by modality={cfg.modality}")
        patches = patchify(standardize(img, cfg), cfg.patch_size)
        x = ag.matmul(ag.Tensor(patches), w)
        pe = model.params.get(pe_key)
        if pe is not None:
            x = ag.add(x, pe)
        out.append(x)
    return out[0], out[1]


def fused_sequence(model, xv, xt, keep_visual=None, keep_tactile=None):
    """Modal tokens -> concat -> g -> (+CLS) -> +global PE.

    ``keep_*`` are per-sample index arrays [B, n] selecting visible
    tokens (MAE); the global PE rows follow the kept positions.
    """
    cfg = model.cfg
    c = cfg.cls_slots
    parts, pe_idx = [], []
    batch = (xv if xv is not None else xt).shape[0]
    if xv is not None:
        if keep_visual is not None:
            xv = ag.gather_rows(xv, keep_visual)
            pe_idx.append(c + np.asarray(keep_visual))
        else:
            pe_idx.append(np.broadcast_to(c + np.arange(cfg.n_visual), (batch, cfg.n_visual)))
        parts.append(xv)
    if xt is not None:
        if keep_tactile is not None:
            xt = ag.gather_rows(xt, keep_tactile)
            pe_idx.append(c + cfg.n_visual + np.asarray(keep_tactile))
        else:
            pe_idx.append(np.broadcast_to(c + cfg.n_visual + np.arange(cfg.n_tactile), (batch, cfg.n_tactile)))
        parts.append(xt)
    x = fuse(*parts) if len(parts) == 2 else parts[0]
    x = project(x, model.head)
    if keep_visual is None and keep_tactile is None:
        return add_global_pe(x, model.bank, model.cls)
    if c:
        cls = ag.add(model.cls, np.zeros((batch, 1, cfg.embed_dim), dtype=cfg.np_dtype))
        x = ag.concat([cls, x], axis=1)
        pe_idx.insert(0, np.zeros((batch, 1), dtype=np.intp))
    pe = model.params.get("pe.global")
    if pe is None:
        return x
    idx = np.concatenate(pe_idx, axis=1)
    return ag.add(x, ag.getitem(pe, idx))


def embed_pair(model, visual, tactile, keep_visual=None, keep_tactile=None):
    """Images [B, ch, s, s] -> fused sequence X_global [B, C+N', D]."""
    xv, xt = modal_tokens(model, visual, tactile)
    return fused_sequence(model, xv, xt, keep_visual, keep_tactile)


def features(model, visual, tactile, trace=False):
    """Pooled, layer-normed encoder representation [B, D]."""
    x = embed_pair(model, visual, tactile)
    out, tr = encoder_forward(model, x, trace=trace)
    out = ag.layer_norm(out, model.params["norm.g"], model.params["norm.b"], model.cfg.ln_eps)
    pooled = pool(out, model.cfg.pool, model.cfg.cls_slots)
    return (pooled, tr) if trace else pooled


def logits(model, visual, tactile):
    z = features(model, visual, tactile)
    return ag.add(ag.matmul(z, model.params["classifier.W"]), model.params["classifier.b"])


def config_replace(cfg, **kw):
    return replace(cfg, **kw)
