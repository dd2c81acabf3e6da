import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vitapes import autograd as ag
from vitapes.encoder import (AttentionTrace, attention, build_model, count_parameters, cross_attention_mass,
                             embed_pair, encoder_forward, features, logits, named_config, pool,
                             write_attention_mass_csv)
from vitapes.errors import ConfigError, NumericError, ShapeError


def micro(**kw):
    return named_config("theory_micro", **kw)


def test_attention_single_token(rng):
    q, k, v = rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    assert np.allclose(attention(q, k, v), v)


def test_attention_zero_query_gives_column_mean(rng):
    v = rng.normal(size=(5, 2))
    out = attention(np.zeros((5, 2)), rng.normal(size=(5, 2)), v)
    assert np.allclose(out, np.broadcast_to(v.mean(0), (5, 2)))


def test_attention_hand_example():
    q = k = np.array([[1.0], [0.0]])
    v = np.array([[2.0], [4.0]])
    out, w = attention(q, k, v, return_weights=True)
    assert np.allclose(w[0], [0.7311, 0.2689], atol=1e-4)
    assert abs(out[0, 0] - 2.5379) < 1e-3
    e = math.exp(1.0)
    assert abs(out[0, 0] - (2 * e + 4) / (e + 1)) < 1e-12


def test_attention_errors():
    with pytest.raises(NumericError):
        attention(np.array([[np.nan]]), np.ones((1, 1)), np.ones((1, 1)))
    with pytest.raises(ShapeError):
        attention(np.ones((2, 3)), np.ones((2, 2)), np.ones((2, 2)))


def _ln(x, g, b, eps):
    mu = sum(x) / len(x)
    var = sum((xi - mu) ** 2 for xi in x) / len(x)
    return [(xi - mu) / math.sqrt(var + eps) * gi + bi for xi, gi, bi in zip(x, g, b)]


def _mv(x, w, b):
    return [sum(x[i] * w[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]


def loop_block(params, x, eps):
    """Scalar re-implementation of one single-head pre-norm block."""
    P = {k: v.data.tolist() for k, v in params.items()}
    h = [_ln(row, P["blocks.0.ln1.g"], P["blocks.0.ln1.b"], eps) for row in x]
    q = [_mv(r, P["blocks.0.attn.Wq"], P["blocks.0.attn.bq"]) for r in h]
    k = [_mv(r, P["blocks.0.attn.Wk"], P["blocks.0.attn.bk"]) for r in h]
    v = [_mv(r, P["blocks.0.attn.Wv"], P["blocks.0.attn.bv"]) for r in h]
    d = len(x[0])
    out = []
    for i in range(len(x)):
        s = [sum(a * b for a, b in zip(q[i], k[j])) / math.sqrt(d) for j in range(len(x))]
        m = max(s)
        e = [math.exp(si - m) for si in s]
        z = sum(e)
        ctx = [sum(e[j] / z * v[j][c] for j in range(len(x))) for c in range(d)]
        out.append(_mv(ctx, P["blocks.0.attn.Wo"], P["blocks.0.attn.bo"]))
    x = [[a + b for a, b in zip(r, o)] for r, o in zip(x, out)]
    res = []
    for r in x:
        h = _ln(r, P["blocks.0.ln2.g"], P["blocks.0.ln2.b"], eps)
        u = _mv(h, P["blocks.0.mlp.W1"], P["blocks.0.mlp.b1"])
        u = [0.5 * a * (1 + math.erf(a / math.sqrt(2))) for a in u]
        y = _mv(u, P["blocks.0.mlp.W2"], P["blocks.0.mlp.b2"])
        res.append([a + b for a, b in zip(r, y)])
    return res


def test_single_block_matches_loop_oracle(rng):
    cfg = micro(visual_side=2, tactile_side=4, use_cls=False)
    model = build_model(cfg, seed=5)
    # move biases and norm gains off their init values so they are exercised
    for n, t in model.params.items():
        if n.startswith("blocks.") and t.ndim == 1:
            t.data[:] += rng.normal(scale=0.1, size=t.shape)
    x = rng.normal(size=(3, 8))
    out, _ = encoder_forward(model, x, n_visual=1, n_tactile=2)
    ref = np.array(loop_block(model.params, x.tolist(), cfg.ln_eps))
    assert np.max(np.abs(out - ref)) < 1e-10


def test_depth_zero_is_identity(rng):
    model = build_model(micro(depth=0), allow_empty=True)
    x = rng.normal(size=(8, 8))
    out, _ = encoder_forward(model, x)
    assert np.array_equal(out, x)
    with pytest.raises(ConfigError):
        build_model(micro(depth=0))


def test_encoder_shape_errors(rng):
    model = build_model(micro())
    with pytest.raises(ShapeError):
        encoder_forward(model, rng.normal(size=(7, 8)))
    with pytest.raises(ShapeError):
        encoder_forward(model, rng.normal(size=(8, 6)))


def test_trace_rows_stochastic(rng):
    cfg = named_config("desk", visual_side=16, tactile_side=16, use_cls=True, pool="cls")
    model = build_model(cfg, seed=0)
    v, t = rng.uniform(size=(2, 3, 16, 16)), rng.uniform(size=(2, 3, 16, 16))
    _, tr = features(model, v, t, trace=True)
    assert len(tr.weights) == cfg.depth
    for w in tr.weights:
        assert w.shape == (2, cfg.heads, 9, 9)
        assert np.abs(w.sum(-1) - 1).max() < 1e-6 and w.min() >= 0
    b = tr.blocks(0, 1, sample=1)
    assert b["vt"].shape == (4, 4) and b["cls_row"].shape == (1, 9)


def test_mass_masked_block_is_zero(rng):
    scores = rng.normal(size=(1, 1, 6, 6))
    mask = np.zeros((6, 6))
    mask[:, 3:] = -np.inf
    _, w = attention(scores, scores, scores, mask=mask, return_weights=True)
    rows = cross_attention_mass(AttentionTrace([w], 0, 3, 3))
    assert rows[0]["vt"] == 0 and rows[0]["tt"] == 0
    assert rows[0]["vv"] == pytest.approx(1.0) and rows[0]["tv"] == pytest.approx(1.0)


def test_mass_uniform_counts():
    w = np.full((1, 1, 7, 7), 1 / 7)
    r = cross_attention_mass(AttentionTrace([w], 1, 2, 4))[0]
    assert r["vt"] == pytest.approx(4 / 7) and r["tv"] == pytest.approx(2 / 7)


def test_mass_summation_oracle(rng):
    raw = rng.uniform(size=(3, 2, 7, 7))
    w = raw / raw.sum(-1, keepdims=True)
    tr = AttentionTrace([w, w[:, ::-1]], 1, 2, 4)
    rows = cross_attention_mass(tr)
    assert len(rows) == 4
    for r in rows:
        ww = tr.weights[r["layer"]][:, r["head"]]
        tot = 0.0
        for s in range(3):
            for i in range(1, 3):
                for j in range(3, 7):
                    tot += ww[s, i, j]
        assert r["vt"] == pytest.approx(tot / (3 * 2), abs=1e-12)


def test_mass_csv(tmp_path):
    w = np.full((1, 1, 4, 4), 0.25)
    path = tmp_path / "m.csv"
    write_attention_mass_csv(cross_attention_mass(AttentionTrace([w], 0, 2, 2)), path)
    assert path.read_text().splitlines() == ["layer,head,vv,vt,tv,tt", "0,0,0.5,0.5,0.5,0.5"]


def test_pool_modes():
    assert np.array_equal(pool(np.array([[1.0, 2.0]])), [1.0, 2.0])
    assert np.array_equal(pool(np.array([[1.0, 3.0], [3.0, 1.0]])), [2.0, 2.0])
    x = np.array([[-7.0, 7.0], [1.0, 1.0], [3.0, 3.0]])
    assert np.array_equal(pool(x, "cls", 1), [-7.0, 7.0])
    assert np.array_equal(pool(x, "mean", 1), [2.0, 2.0])
    with pytest.raises(ConfigError):
        pool(x, "cls", 0)


@given(st.integers(0, 10**6))
def test_stack_permutation_equivariance(seed):
    r = np.random.default_rng(seed)
    model = build_model(micro(use_cls=True), seed=seed % 7)
    x = r.normal(size=(9, 8))
    perm = np.concatenate([[0], 1 + r.permutation(8)])
    a, _ = encoder_forward(model, x[perm])
    b, _ = encoder_forward(model, x)
    assert np.max(np.abs(a - b[perm])) < 1e-6


def test_encoder_gradients_fd(rng):
    cfg = micro(embed_dim=4, heads=1, patch_size=1, visual_side=1, tactile_side=1, channels=1)
    model = build_model(cfg, seed=3)
    block = [t for n, t in model.named_parameters() if n.startswith("blocks.")]
    assert sum(t.data.size for t in block) <= 200
    for t in block:
        t.data += rng.normal(scale=0.1, size=t.shape)
    x = rng.normal(size=(2, 4))
    target = rng.normal(size=(2, 4))

    def loss():
        out, _ = encoder_forward(model, ag.Tensor(x))
        d = ag.sub(out, target)
        return ag.sum_(ag.mul(d, d))

    model.zero_grad()
    loss().backward()
    worst = 0.0
    for p in block:
        for idx in np.ndindex(p.shape):
            old = p.data[idx]
            p.data[idx] = old + 1e-5
            up = float(loss().data)
            p.data[idx] = old - 1e-5
            dn = float(loss().data)
            p.data[idx] = old
            num = (up - dn) / 2e-5
            ana = p.grad[idx]
            worst = max(worst, abs(num - ana) / max(abs(num) + abs(ana), 1e-6))
    assert worst < 1e-4


def test_parameter_count_micro_hand_count():
    cfg = micro()
    # patch 2*8*8, PEs (4+4+8)*8, head 2*64, block 4*(64+8)+2*(8+8)+(64+8)+(64+8),
    # final norm 16, classifier 8*4+4
    hand = 128 + 128 + 128 + (288 + 32 + 144) + 16 + 36
    assert count_parameters(cfg) == hand == 900
    assert build_model(cfg).num_parameters() == hand


@pytest.mark.parametrize("name", ["desk", "scale_micro", "balanced_micro", "minimal", "moderate"])
def test_parameter_count_formula_matches_built(name):
    cfg = named_config(name)
    assert build_model(cfg).num_parameters() == count_parameters(cfg)


def test_parameter_count_ablations():
    for kw in (dict(modality="vision_only"), dict(pe_global="sinusoidal"), dict(pe_visual="off"),
               dict(use_cls=True, pool="cls")):
        cfg = named_config("desk", **kw)
        assert build_model(cfg).num_parameters() == count_parameters(cfg), kw


def test_named_configs():
    m = named_config("minimal")
    assert (m.embed_dim, m.depth, m.heads) == (384, 3, 3)
    assert (named_config("moderate").depth, named_config("balanced").depth) == (6, 12)
    assert named_config("full_scale").tokenizer.n_visual == 196
    with pytest.raises(ConfigError):
        named_config("huge")
    with pytest.raises(ConfigError):
        named_config("desk", heads=3).validate()
    with pytest.raises(ConfigError):
        named_config("desk", pool="cls").validate()


def test_modalities_disable_branches(rng):
    v, t = rng.uniform(size=(2, 3, 32, 32)), rng.uniform(size=(2, 3, 32, 32))
    vis = build_model(named_config("desk", modality="vision_only"))
    assert "patch.W_tactile" not in vis.params and "pe.tactile" not in vis.params
    assert embed_pair(vis, v, None).shape == (2, 16, 64)
    touch = build_model(named_config("desk", modality="touch_only"))
    assert logits(touch, None, t).shape == (2, 4)
    with pytest.raises(ShapeError):
        embed_pair(touch, v, None)


def test_float32_forward_close_to_float64(rng):
    v, t = rng.uniform(size=(2, 3, 32, 32)), rng.uniform(size=(2, 3, 32, 32))
    a = features(build_model(named_config("desk"), 1), v, t).data
    b = features(build_model(named_config("desk", dtype="float64"), 1), v, t).data
    assert a.dtype == np.float32 and b.dtype == np.float64
    assert np.max(np.abs(a - b)) < 1e-3
