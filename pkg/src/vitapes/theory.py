"""Executable checks of the architecture's structural guarantees.

Strict checks (``status`` pass/fail) are assertions that hold exactly for
this architecture: permutation equivariance, square-head injectivity,
explicit inversion, row-stochastic attention and gradient correctness.
Diagnostic checks only report a number.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .embedding import pe_uniqueness_audit, unpatchify
from .encoder import build_model, encoder_forward, fused_sequence, modal_tokens, named_config
from .errors import ConfigError, InversionUnsupportedError
from .fusion import head_rank_audit, invert_fusion, project, singular_values
from .optim import no_decay


@dataclass
class VerifyReport:
    check: str
    status: str                      # pass | fail | diagnostic
    evidence: dict = field(default_factory=dict)
    fingerprint: str = ""
    seed: int = 0

    @property
    def passed(self):
        return self.status == "pass"

    def to_json(self):
        return json.dumps({"check": self.check, "status": self.status, "evidence": _plain(self.evidence),
                           "fingerprint": self.fingerprint, "seed": self.seed}, sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def write_reports(reports, path, mode="w"):
    with open(path, mode) as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def read_reports(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def micro_model(seed=0, **overrides):
    """theory_micro: D=8, one block, one head, N = 4 + 4, square head, float64."""
    return build_model(named_config("theory_micro", **overrides), seed)


def _random_images(model, n, rng):
    c = model.cfg
    v = rng.standard_normal((n, c.channels, c.visual_side, c.visual_side))
    t = rng.standard_normal((n, c.channels, c.tactile_side, c.tactile_side))
    return v, t


def fused_output(model, visual, tactile):
    """The fused sequence entering the encoder, as an array [B, C+N, D]."""
    with ag.no_grad():
        xv, xt = modal_tokens(model, visual, tactile)
        return fused_sequence(model, xv, xt).data


# -- injectivity -----------------------------------------------------------------------

def injectivity_collision_search(model, num_pairs=10_000, seed=0, strict=None, threshold=1e-9,
                                 batch=2_000):
    """Look for distinct inputs with (numerically) identical fused outputs."""
    if strict is None:
        strict = model.cfg.head_variant == "square_theory"
    if strict and model.cfg.head_variant != "square_theory":
        raise ConfigError("strict injectivity needs the square_theory head", "head_variant")
    rng = np.random.default_rng([seed, 301])
    collisions, min_diff = 0, math.inf
    first = None
    done = 0
    while done < num_pairs:
        n = min(batch, num_pairs - done)
        v1, t1 = _random_images(model, n, rng)
        v2, t2 = _random_images(model, n, rng)
        o1, o2 = fused_output(model, v1, t1), fused_output(model, v2, t2)
        diff = np.abs(o1 - o2).reshape(n, -1).max(axis=1)
        same_input = np.logical_and(
            np.all((v1 == v2).reshape(n, -1), axis=1), np.all((t1 == t2).reshape(n, -1), axis=1))
        hit = (diff <= threshold) & ~same_input
        if hit.any() and first is None:
            i = int(np.flatnonzero(hit)[0])
            first = {"visual_a": v1[i], "tactile_a": t1[i], "visual_b": v2[i], "tactile_b": t2[i]}
        collisions += int(hit.sum())
        min_diff = min(min_diff, float(diff[~same_input].min()) if (~same_input).any() else math.inf)
        done += n

    # single-pixel probe: a 1e-3 bump must move the output
    v, t = _random_images(model, 1, rng)
    base = fused_output(model, v, t)
    v2 = v.copy()
    v2[0, 0, 0, 0] += 1e-3
    pixel_delta = float(np.abs(fused_output(model, v2, t) - base).max())

    ok = collisions == 0 and pixel_delta > 0
    evidence = {"num_pairs": num_pairs, "collisions": collisions, "min_max_abs_diff": min_diff,
                "pixel_delta": pixel_delta, "threshold": threshold}
    if first is not None:
        evidence["colliding_pair"] = first
    status = ("pass" if ok else "fail") if strict else "diagnostic"
    return VerifyReport("injectivity", status, evidence, model.fingerprint(), seed)


# -- equivariance ------------------------------------------------------------------------

def grid_permutation(grid, shift):
    """Token index map of a cyclic (dr, dc) shift: shifted[i] = tokens[perm[i]]."""
    dr, dc = shift
    r, c = np.divmod(np.arange(grid * grid), grid)
    return ((r - dr) % grid) * grid + (c - dc) % grid


def sequence_permutation(cfg, shift):
    """Row permutation of the whole sequence; the CLS slot stays fixed."""
    tok = cfg.tokenizer
    c = cfg.cls_slots
    parts = [np.arange(c)]
    if cfg.n_visual:
        parts.append(c + grid_permutation(tok.grid("visual"), shift))
    if cfg.n_tactile:
        parts.append(c + cfg.n_visual + grid_permutation(tok.grid("tactile"), shift))
    return np.concatenate(parts).astype(np.intp)


def _check_shift(shift):
    if len(shift) != 2:
        raise ConfigError(f"shift must be a pair (dr, dc), got {shift!r}", "shift")
    out = []
    for s in shift:
        if isinstance(s, (bool, np.bool_)) or not float(s).is_integer():
            raise ConfigError(f"shift components must be integers, got {shift!r}", "shift")
        out.append(int(s))
    return tuple(out)


def _encode(model, x):
    out, _ = encoder_forward(model, x)
    return out


def equivariance_check(model, shift=(1, 1), mode="permutation", seed=0, num_samples=4, tol=1e-6):
    """Compare encode(permute(x)) with permute(encode(x)).

    ``permutation``: the permutation acts on the PE-enriched modal tokens
    and the global PE rows travel with their tokens (strict).
    ``input_shift``: raw patch grids are rolled before the full pipeline,
    PEs stay attached to slots (diagnostic).
    """
    shift = _check_shift(shift)
    if mode not in ("permutation", "input_shift"):
        raise ConfigError(f"unknown equivariance mode {mode!r}", "mode")
    cfg = model.cfg
    perm = sequence_permutation(cfg, shift)
    rng = np.random.default_rng([seed, 302])
    v, t = _random_images(model, num_samples, rng)
    c = cfg.cls_slots
    with ag.no_grad():
        if mode == "permutation":
            xv, xt = modal_tokens(model, v, t)
            modal = np.concatenate([a.data for a in (xv, xt) if a is not None], axis=1)
            body_perm = perm[c:] - c
            pe = model.params.get("pe.global")

            def pipeline(tokens, pe_rows):
                x = project(tokens, model.head)
                if c:
                    x = np.concatenate([np.broadcast_to(model.cls.data, (x.shape[0], 1, x.shape[2])), x], axis=1)
                if pe_rows is not None:
                    x = x + pe_rows
                return _encode(model, x)

            pe_data = None if pe is None else pe.data
            ref = pipeline(modal, pe_data)[:, perm]
            got = pipeline(modal[:, body_perm], None if pe is None else pe_data[perm])
        else:
            p = cfg.patch_size
            sv = np.roll(v, (shift[0] * p, shift[1] * p), axis=(-2, -1))
            st = np.roll(t, (shift[0] * p, shift[1] * p), axis=(-2, -1))
            ref = _encode(model, fused_output(model, v, t))[:, perm]
            got = _encode(model, fused_output(model, sv, st))
    dev = float(np.abs(ref - got).max())
    evidence = {"mode": mode, "shift": list(shift), "max_abs_deviation": dev, "tol": tol}
    if mode == "permutation":
        status = "pass" if dev < tol else "fail"
    else:
        status = "diagnostic"
    return VerifyReport(f"equivariance_{mode}", status, evidence, model.fingerprint(), seed)


def constant_pe_model(model, value=0.1):
    """Copy of ``model`` whose PE tables have all rows equal (shift-invariant PEs)."""
    m = model.clone()
    for name in ("pe.visual", "pe.tactile", "pe.global"):
        if name in m.params:
            t = m.params[name]
            row = np.full(t.shape[1], value, dtype=t.dtype) + np.linspace(0, value, t.shape[1]).astype(t.dtype)
            t.data = np.broadcast_to(row, t.shape).copy()
    return m


# -- inversion / information preservation -------------------------------------------------

def unembed(tokens, weight):
    """Recover patches from tokens = patches @ W (W square or full row rank)."""
    w = np.asarray(weight, dtype=np.float64)
    s = singular_values(w)
    if w.shape[0] > w.shape[1] or s[-1] <= 1e-10 * max(s[0], 1.0):
        raise InversionUnsupportedError(f"patch projection {w.shape} is not left-invertible")
    if w.shape[0] == w.shape[1]:
        return np.swapaxes(np.linalg.solve(w.T, np.swapaxes(tokens, -1, -2)), -1, -2)
    return tokens @ np.linalg.pinv(w)


def reconstruct_inputs(model, x_global, tol=1e-10):
    """Full inverse of the fusion pipeline: fused sequence -> (visual, tactile) images."""
    cfg = model.cfg
    modal = invert_fusion(x_global, model.head, model.bank, tol)
    nv = cfg.n_visual
    out = []
    for name, lo, n, side in (("visual", 0, nv, cfg.visual_side), ("tactile", nv, cfg.n_tactile, cfg.tactile_side)):
        if not n:
            out.append(None)
            continue
        tokens = modal[..., lo:lo + n, :]
        pe = model.params.get(f"pe.{name}")
        if pe is not None:
            tokens = tokens - pe.data
        patches = unembed(tokens, model.params[f"patch.W_{name}"].data)
        out.append(unpatchify(patches, cfg.patch_size, cfg.channels) * cfg.pixel_std + cfg.pixel_mean)
    return out[0], out[1]


def entropy_preservation_check(model, num_samples=100, seed=0, tol=1e-5):
    """Round-trip witness of information preservation: max relative error of
    images reconstructed from the fused sequence."""
    rng = np.random.default_rng([seed, 303])
    v, t = _random_images(model, num_samples, rng)
    x = fused_output(model, v, t)
    rv, rt = reconstruct_inputs(model, x)
    errs = []
    for i in range(num_samples):
        a = np.concatenate([v[i].ravel(), t[i].ravel()])
        b = np.concatenate([rv[i].ravel(), rt[i].ravel()])
        norm = np.linalg.norm(a)
        e = np.linalg.norm(a - b)
        errs.append(e / norm if norm > 0 else e)
    worst = float(max(errs))
    status = "pass" if worst < tol else "fail"
    return VerifyReport("entropy_preservation", status,
                        {"num_samples": num_samples, "max_rel_error": worst, "tol": tol},
                        model.fingerprint(), seed)


# -- attention ----------------------------------------------------------------------------

def attention_rows_check(model, seed=0, num_samples=4, tol=1e-6):
    from .encoder import features

    rng = np.random.default_rng([seed, 304])
    v, t = _random_images(model, num_samples, rng)
    with ag.no_grad():
        _, trace = features(model, v, t, trace=True)
    dev = max(float(np.abs(w.sum(axis=-1) - 1.0).max()) for w in trace.weights)
    neg = min(float(w.min()) for w in trace.weights)
    ok = dev < tol and neg >= 0.0
    return VerifyReport("attention_row_stochastic", "pass" if ok else "fail",
                        {"max_row_sum_deviation": dev, "min_weight": neg, "tol": tol},
                        model.fingerprint(), seed)


# -- training-time audits ------------------------------------------------------------------

class AssumptionAudit:
    """Epoch hook recording PE uniqueness and head rank every ``stride`` epochs."""

    def __init__(self, stride=1, jsonl_path=None, sv_log=None, seed=0, tables=("visual", "tactile", "global")):
        self.stride = max(int(stride), 1)
        self.jsonl_path = jsonl_path
        self.sv_log = sv_log
        self.seed = seed
        self.tables = tables
        self.reports = []

    def audit(self, model, epoch):
        evidence = {"epoch": epoch}
        bank = model.bank
        if bank.tables():
            pe = pe_uniqueness_audit(bank, self.tables)
            evidence.update(max_off_diagonal_cosine=pe.max_off_diagonal,
                            mean_off_diagonal_cosine=pe.mean_off_diagonal, collapsed=pe.collapsed)
        rank = head_rank_audit(model.head)
        evidence.update(min_sigma=rank.min_sigma, max_sigma=float(rank.singular_values[0]),
                        condition=rank.condition)
        rep = VerifyReport("assumption_audit", "diagnostic", evidence, model.fingerprint(), self.seed)
        self.reports.append(rep)
        if self.jsonl_path is not None:
            write_reports([rep], self.jsonl_path, mode="a")
        if self.sv_log is not None:
            self.sv_log.append(epoch, rank)
        return rep

    def __call__(self, model, epoch, history=None):
        if (epoch + 1) % self.stride == 0:
            self.audit(model, epoch)

    def series(self, key):
        return [r.evidence[key] for r in self.reports if key in r.evidence]


def assumption_audit_loop(stride=1, jsonl_path=None, sv_log=None, seed=0):
    return AssumptionAudit(stride, jsonl_path, sv_log, seed)


# -- gradients ----------------------------------------------------------------------------

@dataclass
class GradProblem:
    loss: object            # () -> scalar Tensor
    params: list            # [(name, Tensor)] in float64


def numeric_gradient(loss_fn, tensor, step=1e-5):
    g = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = g.reshape(-1)
    with ag.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = float(loss_fn().data)
            flat[i] = old - step
            fm = float(loss_fn().data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * step)
    return g


def relative_error(a, n):
    a, n = np.ravel(a), np.ravel(n)
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def gradient_check(make_problem, name="gradient", seed=0, step=1e-5, tol=1e-4, max_retries=3,
                   kink_margin=None):
    """Central-difference check of every parameter coordinate.

    ``make_problem(seed)`` returns a :class:`GradProblem` in float64.  If a
    LeakyReLU input lies within ``kink_margin`` of zero the finite
    difference straddles the kink; the problem is resampled (new seed) up
    to ``max_retries`` times before the result is downgraded to diagnostic.
    """
    kink_margin = 10 * step if kink_margin is None else kink_margin
    attempt_seed = seed
    for attempt in range(max_retries + 1):
        prob = make_problem(attempt_seed)
        for _, p in prob.params:
            if p.data.dtype != np.float64:
                raise ConfigError("gradient checks require float64 parameters", "dtype")
            p.grad = None
        with ag.kink_monitor() as kinks:
            loss = prob.loss()
        near_kink = bool(kinks) and min(kinks) < kink_margin
        if near_kink and attempt < max_retries:
            attempt_seed += 1000
            continue
        loss.backward()
        analytic = np.concatenate([
            (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for _, p in prob.params])
        numeric = np.concatenate([numeric_gradient(prob.loss, p, step).ravel() for _, p in prob.params])
        err = relative_error(analytic, numeric)
        per = {}
        off = 0
        for n, p in prob.params:
            k = p.data.size
            per[n] = relative_error(analytic[off:off + k], numeric[off:off + k])
            off += k
        evidence = {"rel_error": err, "tol": tol, "num_params": int(analytic.size),
                    "attempts": attempt + 1, "near_kink": near_kink,
                    "worst_param": max(per, key=per.get) if per else None}
        if near_kink:
            status = "diagnostic"
        else:
            status = "pass" if err < tol else "fail"
        return VerifyReport(name, status, evidence, "", seed)
    raise AssertionError("unreachable")


def linear_problem(seed, n_in=6, n_out=4, batch=5):
    rng = np.random.default_rng([seed, 401])
    x = rng.standard_normal((batch, n_in))
    target = rng.standard_normal((batch, n_out))
    w = ag.parameter(rng.standard_normal((n_in, n_out)), "W")
    b = ag.parameter(rng.standard_normal(n_out), "b")

    def loss():
        y = ag.add(ag.matmul(x, w), b)
        return ag.sum_(ag.mul(y, target))

    return GradProblem(loss, [("W", w), ("b", b)])


def attention_problem(seed, tokens=5, dim=4, heads=1):
    """One pre-norm transformer block on a random sequence."""
    from .encoder import init_block, transformer_block

    rng = np.random.default_rng([seed, 402])
    x = rng.standard_normal((2, tokens, dim))
    target = rng.standard_normal((2, tokens, dim))
    params = init_block("b.", dim, dim, rng, np.float64)
    for k in params:
        if no_decay(k):
            params[k].data = params[k].data + rng.normal(0, 0.1, params[k].shape)

    def loss():
        y = transformer_block(params, "b.", ag.Tensor(x), heads, 1e-5)
        return ag.mean(ag.square(ag.sub(y, target)))

    return GradProblem(loss, sorted(params.items()))


def pipeline_problem(seed, model_seed=0, batch=3, **overrides):
    """Full micro pipeline: images -> fused sequence -> encoder -> pool -> logits -> CE."""
    from .encoder import logits

    model = micro_model(model_seed + seed, **overrides)
    rng = np.random.default_rng([seed, 403])
    v, t = _random_images(model, batch, rng)
    labels = rng.integers(0, model.cfg.num_classes, batch)
    # non-trivial norm / bias values so every parameter has a generic gradient
    for n, p in model.named_parameters():
        if no_decay(n) or n.startswith("classifier"):
            p.data = p.data + rng.normal(0, 0.1, p.shape)

    def loss():
        return ag.cross_entropy(logits(model, v, t), labels)

    return GradProblem(loss, model.named_parameters())


# -- battery -----------------------------------------------------------------------------

def verify_battery(seed=0, num_pairs=10_000, num_samples=100, shifts=((1, 0), (0, 1), (1, 1)),
                   gradients=True):
    """Every strict check at micro scale, plus the input-shift diagnostics."""
    model = micro_model(seed)
    reports = [
        injectivity_collision_search(model, num_pairs, seed),
        entropy_preservation_check(model, num_samples, seed),
        attention_rows_check(model, seed),
    ]
    for s in shifts:
        reports.append(equivariance_check(model, s, "permutation", seed))
    for s in shifts:
        reports.append(equivariance_check(model, s, "input_shift", seed))
    const = constant_pe_model(model)
    rep = equivariance_check(const, shifts[-1], "input_shift", seed)
    rep.check = "equivariance_input_shift_constant_pe"
    rep.status = "pass" if rep.evidence["max_abs_deviation"] < rep.evidence["tol"] else "fail"
    reports.append(rep)
    if gradients:
        reports.append(gradient_check(linear_problem, "gradient_linear", seed, tol=1e-8))
        reports.append(gradient_check(attention_problem, "gradient_attention_block", seed))
        reports.append(gradient_check(pipeline_problem, "gradient_pipeline", seed))
    return reports
