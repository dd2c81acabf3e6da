"""Training and evaluation objectives.

Masked-autoencoder pretraining, supervised cross-entropy, linear probing
of a frozen encoder, zero-shot prototype classification and the
evaluation-time tactile masking sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import stack
from .embedding import patchify, sinusoidal_table
from .encoder import (encoder_forward, features, fused_sequence, init_block, logits, modal_tokens, standardize,
                      transformer_block)
from .errors import ConfigError, DataError, InvariantViolationError, NumericError, ObjectiveError
from .optim import AdamW


# -- masked autoencoding ---------------------------------------------------------

@dataclass(frozen=True)
class MaeConfig:
    mask_ratio: float = 0.75
    decoder: str = "shallow_transformer"
    decoder_depth: int = 2
    decoder_dim: int = 32
    decoder_heads: int = 2
    masked_only: bool = True

    def validate(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}", "mae.mask_ratio")
        if self.decoder not in ("linear", "shallow_transformer"):
            raise ConfigError(f"unknown decoder {self.decoder!r}", "mae.decoder")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError("decoder_dim must be divisible by decoder_heads", "mae.decoder_heads")
        return self


def mask_count(n_tokens, ratio):
    """round(ratio * N) with halves rounded up."""
    return int(np.floor(ratio * n_tokens + 0.5))


def mae_mask(n_tokens, ratio, rng):
    """Uniform masking without replacement; returns (visible, masked), both sorted."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}", "mae.mask_ratio")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    k = mask_count(n_tokens, ratio)
    if k >= n_tokens:
        raise ConfigError(f"ratio {ratio} would mask all {n_tokens} tokens", "mae.mask_ratio")
    perm = rng.permutation(n_tokens)
    return np.sort(perm[k:]), np.sort(perm[:k])


def batch_masks(batch, n_tokens, ratio, rng):
    vis, msk = zip(*(mae_mask(n_tokens, ratio, rng) for _ in range(batch)))
    return np.stack(vis), np.stack(msk)


def add_mae_decoder(model, cfg, seed=0):
    """Attach decoder parameters (prefixed ``decoder.``) to ``model``."""
    cfg.validate()
    mc = model.cfg
    dt = mc.np_dtype
    d, dd = mc.embed_dim, cfg.decoder_dim
    rng = np.random.default_rng([seed, 71])
    n_total = mc.cls_slots + mc.n_visual + mc.n_tactile
    p = model.params
    lim = np.sqrt(6.0 / (d + dd))
    p["decoder.embed.W"] = ag.parameter(rng.uniform(-lim, lim, (d, dd)).astype(dt), "decoder.embed.W")
    p["decoder.embed.b"] = ag.parameter(np.zeros(dd, dt), "decoder.embed.b")
    p["decoder.mask_token"] = ag.parameter(rng.normal(0, 0.02, (1, 1, dd)).astype(dt), "decoder.mask_token")
    # fixed sinusoidal decoder positions, as in the reference MAE
    p["decoder.pe"] = ag.Tensor(sinusoidal_table(n_total, dd).astype(dt), name="decoder.pe")
    if cfg.decoder == "shallow_transformer":
        for i in range(cfg.decoder_depth):
            p.update(init_block(f"decoder.blocks.{i}.", dd, 4 * dd, np.random.default_rng([seed, 200 + i]), dt))
        p["decoder.norm.g"] = ag.parameter(np.ones(dd, dt), "decoder.norm.g")
        p["decoder.norm.b"] = ag.parameter(np.zeros(dd, dt), "decoder.norm.b")
    pdim = mc.tokenizer.patch_dim
    for name, n in (("visual", mc.n_visual), ("tactile", mc.n_tactile)):
        if n:
            lim = np.sqrt(6.0 / (dd + pdim))
            p[f"decoder.out_{name}.W"] = ag.parameter(rng.uniform(-lim, lim, (dd, pdim)).astype(dt),
                                                      f"decoder.out_{name}.W")
            p[f"decoder.out_{name}.b"] = ag.parameter(np.zeros(pdim, dt), f"decoder.out_{name}.b")
    model.mae_cfg = cfg
    return model


def has_decoder(model):
    return "decoder.embed.W" in model.params


@dataclass
class MaeOutput:
    pred_visual: ag.Tensor | None
    pred_tactile: ag.Tensor | None
    target_visual: np.ndarray | None
    target_tactile: np.ndarray | None
    mask_visual: np.ndarray | None
    mask_tactile: np.ndarray | None


def mae_forward(model, visual, tactile, cfg, rng):
    """Encode visible tokens only, decode every position, predict pixels."""
    mc = model.cfg
    p = model.params
    b = (visual if visual is not None else tactile).shape[0]
    xv, xt = modal_tokens(model, visual if mc.n_visual else None, tactile if mc.n_tactile else None)
    keep_v = mask_v = keep_t = mask_t = None
    if xv is not None:
        keep_v, mask_v = batch_masks(b, mc.n_visual, cfg.mask_ratio, rng)
    if xt is not None:
        keep_t, mask_t = batch_masks(b, mc.n_tactile, cfg.mask_ratio, rng)
    x = fused_sequence(model, xv, xt, keep_v, keep_t)
    nv_keep = keep_v.shape[1] if keep_v is not None else 0
    nt_keep = keep_t.shape[1] if keep_t is not None else 0
    z, _ = encoder_forward(model, x, n_visual=nv_keep, n_tactile=nt_keep)
    z = ag.layer_norm(z, p["norm.g"], p["norm.b"], mc.ln_eps)
    z = ag.add(ag.matmul(z, p["decoder.embed.W"]), p["decoder.embed.b"])

    # scatter visible tokens back into full-length sequences filled with the mask token
    c = mc.cls_slots
    pieces = []
    if c:
        pieces.append(z[(slice(None), slice(0, c), slice(None))])
    off = c
    for keep, n in ((keep_v, mc.n_visual), (keep_t, mc.n_tactile)):
        if keep is None:
            continue
        vis = z[(slice(None), slice(off, off + keep.shape[1]), slice(None))]
        pieces.append(ag.scatter_rows(vis, keep, n, p["decoder.mask_token"]))
        off += keep.shape[1]
    y = ag.concat(pieces, axis=1) if len(pieces) > 1 else pieces[0]
    y = ag.add(y, p["decoder.pe"])
    if cfg.decoder == "shallow_transformer":
        for i in range(cfg.decoder_depth):
            y = transformer_block(p, f"decoder.blocks.{i}.", y, cfg.decoder_heads, mc.ln_eps)
        y = ag.layer_norm(y, p["decoder.norm.g"], p["decoder.norm.b"], mc.ln_eps)

    out = {}
    off = c
    for name, n, img in (("visual", mc.n_visual, visual), ("tactile", mc.n_tactile, tactile)):
        if not n:
            out[name] = (None, None)
            continue
        seg = y[(slice(None), slice(off, off + n), slice(None))]
        pred = ag.add(ag.matmul(seg, p[f"decoder.out_{name}.W"]), p[f"decoder.out_{name}.b"])
        target = patchify(standardize(img, mc), mc.patch_size)
        out[name] = (pred, target)
        off += n
    return MaeOutput(out["visual"][0], out["tactile"][0], out["visual"][1], out["tactile"][1],
                     mask_v, mask_t)


@ag.dual
def masked_mse(pred, target, masked_idx):
    """Mean squared error over the masked rows of each sample.

    pred/target [B, N, P]; masked_idx [B, k].  ``pred`` may be a Tensor.
    """
    sel_p = ag.gather_rows(pred, masked_idx)
    sel_t = np.asarray(target)[np.arange(target.shape[0])[:, None], masked_idx]
    diff = ag.sub(sel_p, sel_t)
    return ag.mean(ag.square(diff))


def mae_loss(model, batch, cfg, rng):
    """Pixel MSE on masked patches (or all patches when masked_only=False),
    pooled over both modalities and averaged over the batch."""
    visual, tactile = batch[0], batch[1]
    out = mae_forward(model, visual, tactile, cfg, rng)
    terms, weights = [], []
    for pred, target, mask in ((out.pred_visual, out.target_visual, out.mask_visual),
                               (out.pred_tactile, out.target_tactile, out.mask_tactile)):
        if pred is None:
            continue
        if cfg.masked_only:
            if mask.shape[1] == 0:
                raise ObjectiveError("masked-only MAE loss with an empty mask")
            terms.append(masked_mse(pred, target, mask))
            weights.append(mask.size)
        else:
            terms.append(ag.mean(ag.square(ag.sub(pred, target))))
            weights.append(target.shape[0] * target.shape[1])
    total = float(sum(weights))
    loss = None
    for t, w in zip(terms, weights):
        part = ag.mul(t, w / total)
        loss = part if loss is None else ag.add(loss, part)
    return loss


# -- supervised ----------------------------------------------------------------------

def check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    return labels


def supervised_loss(model, batch):
    visual, tactile, labels = batch
    labels = check_labels(labels, model.cfg.num_classes)
    return ag.cross_entropy(logits(model, visual, tactile), labels)


# -- frozen-encoder evaluation ---------------------------------------------------------

def mask_tactile_patches(tactile, ratio, patch_size, rng):
    """Zero round(ratio * N_tactile) randomly chosen patches per image.

    Returns (masked copy, per-image count of zeroed pixels).
    """
    tactile = np.array(tactile, copy=True)
    b, ch, side, _ = tactile.shape
    g = side // patch_size
    n = g * g
    k = int(np.floor(ratio * n + 0.5))
    counts = np.zeros(b, dtype=np.int64)
    if k == 0:
        return tactile, counts
    for i in range(b):
        for idx in rng.permutation(n)[:k]:
            r, c = divmod(int(idx), g)
            tactile[i, :, r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size] = 0
        counts[i] = k * patch_size * patch_size
    return tactile, counts


def extract_features(model, pairs, batch_size=64, tactile_mask_ratio=0.0, rng=None):
    """Pooled representations of ``pairs`` as float64 [n, D] (no tape)."""
    mc = model.cfg
    out = []
    with ag.no_grad():
        for start in range(0, len(pairs), batch_size):
            v, t, _ = stack(pairs[start:start + batch_size])
            if tactile_mask_ratio > 0:
                t, _ = mask_tactile_patches(t, tactile_mask_ratio, mc.patch_size, rng)
            z = features(model, v if mc.n_visual else None, t if mc.n_tactile else None)
            out.append(np.asarray(z.data, dtype=np.float64))
    return np.concatenate(out)


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 300
    lr: float = 1e-2
    weight_decay: float = 0.0
    standardize: bool = True
    frozen: bool = True


@dataclass
class LinearProbe:
    W: np.ndarray
    b: np.ndarray
    mu: np.ndarray
    sd: np.ndarray

    def logits(self, feats):
        return ((feats - self.mu) / self.sd) @ self.W + self.b

    def predict(self, feats):
        return np.argmax(self.logits(feats), axis=1)


def fit_probe(feats, labels, num_classes, cfg=ProbeConfig(), seed=0):
    """Full-batch softmax regression on fixed features."""
    feats = np.asarray(feats, dtype=np.float64)
    labels = check_labels(labels, num_classes)
    if cfg.standardize:
        mu = feats.mean(axis=0)
        sd = feats.std(axis=0) + 1e-6
    else:
        mu = np.zeros(feats.shape[1])
        sd = np.ones(feats.shape[1])
    x = (feats - mu) / sd
    rng = np.random.default_rng([seed, 97])
    w = ag.parameter(rng.normal(0, 0.01, (x.shape[1], num_classes)), "probe.W")
    b = ag.parameter(np.zeros(num_classes), "probe.b")
    opt = AdamW([("probe.W", w), ("probe.bias", b)], lr=cfg.lr, weight_decay=cfg.weight_decay)
    xt = ag.Tensor(x)
    for _ in range(cfg.epochs):
        opt.zero_grad()
        loss = ag.cross_entropy(ag.add(ag.matmul(xt, w), b), labels)
        loss.backward()
        opt.step()
    return LinearProbe(w.data.copy(), b.data.copy(), mu, sd)


def confusion_matrix(y_true, y_pred, num_classes):
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return m


@dataclass
class AccuracyReport:
    accuracy: float
    confusion: np.ndarray
    n: int
    extra: dict = field(default_factory=dict)


def _report(y_true, y_pred, k, **extra):
    cm = confusion_matrix(y_true, y_pred, k)
    return AccuracyReport(float(np.trace(cm) / max(cm.sum(), 1)), cm, int(cm.sum()), extra)


def _assert_unchanged(model, before):
    after = model.fingerprint()
    if after != before:
        raise InvariantViolationError("frozen encoder parameters changed during evaluation")


def linear_probe(model, train, test, cfg=ProbeConfig(), seed=0):
    """Train a linear classifier on frozen pooled features; report test top-1."""
    before = model.fingerprint()
    k = model.cfg.num_classes
    f_train = extract_features(model, train)
    f_test = extract_features(model, test)
    y_train = np.array([p.label for p in train])
    y_test = np.array([p.label for p in test])
    probe = fit_probe(f_train, y_train, k, cfg, seed)
    _assert_unchanged(model, before)
    rep = _report(y_test, probe.predict(f_test), k,
                  train_accuracy=float(np.mean(probe.predict(f_train) == y_train)))
    rep.extra["probe"] = probe
    return rep


def prototypes(ref_feats, ref_labels, num_classes):
    ref_labels = np.asarray(ref_labels)
    protos = np.zeros((num_classes, ref_feats.shape[1]))
    for k in range(num_classes):
        sel = ref_feats[ref_labels == k]
        if sel.shape[0] == 0:
            raise DataError(f"class {k} has no reference samples")
        protos[k] = sel.mean(axis=0)
    return protos


def cosine_predict(query_feats, protos):
    """argmax cosine similarity; ties go to the lowest class id."""
    qn = np.linalg.norm(query_feats, axis=1)
    pn = np.linalg.norm(protos, axis=1)
    if (qn == 0).any() or (pn == 0).any():
        raise NumericError("zero-norm embedding in cosine classification")
    sims = (query_feats / qn[:, None]) @ (protos / pn[:, None]).T
    return np.argmax(sims, axis=1), sims


def zero_shot(model, reference, query):
    before = model.fingerprint()
    k = model.cfg.num_classes
    f_ref = extract_features(model, reference)
    f_q = extract_features(model, query)
    _assert_unchanged(model, before)
    protos = prototypes(f_ref, [p.label for p in reference], k)
    pred, _ = cosine_predict(f_q, protos)
    return _report(np.array([p.label for p in query]), pred, k)


@dataclass
class SweepPoint:
    ratio: float
    mean_acc: float
    std_acc: float
    seeds: tuple
    accs: tuple


def tactile_masking_sweep(model, probe, test, ratios=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0), seeds=(0, 1, 2, 3, 4),
                          train=None, probe_cfg=ProbeConfig()):
    """Top-1 accuracy when a fraction of tactile patches is zeroed.

    With ``train`` given, a fresh probe is fitted per (ratio, seed) on
    equally masked training features, so masking is part of the probing
    protocol; otherwise the supplied ``probe`` is reused unchanged.
    """
    before = model.fingerprint()
    k = model.cfg.num_classes
    y = np.array([p.label for p in test])
    y_train = None if train is None else np.array([p.label for p in train])
    points = []
    for ratio in ratios:
        if not 0.0 <= ratio <= 1.0:
            raise ConfigError(f"masking ratio {ratio} outside [0, 1]", "sweep.ratios")
        accs = []
        for s in seeds:
            rng = np.random.default_rng([s, int(round(ratio * 1000))])
            use = probe
            if train is not None:
                f_tr = extract_features(model, train, tactile_mask_ratio=ratio, rng=rng)
                use = fit_probe(f_tr, y_train, k, probe_cfg, seed=s)
            f = extract_features(model, test, tactile_mask_ratio=ratio, rng=rng)
            accs.append(float(np.mean(use.predict(f) == y)))
        points.append(SweepPoint(float(ratio), float(np.mean(accs)), float(np.std(accs)),
                                 tuple(seeds), tuple(accs)))
    _assert_unchanged(model, before)
    return points


def write_sweep_csv(points, path):
    with open(path, "w") as fh:
        fh.write("ratio,mean_acc,std_acc,seeds\n")
        for p in points:
            seeds = " ".join(str(s) for s in p.seeds)
            fh.write(f"{p.ratio:g},{p.mean_acc:.6f},{p.std_acc:.6f},{seeds}\n")
