import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vitapes import autograd as ag
from vitapes.embedding import TokenizerConfig, init_pe_bank
from vitapes.errors import InversionUnsupportedError, NumericError, ShapeError
from vitapes.fusion import (ProjectionHead, SingularValueLog, add_global_pe, fuse, head_rank_audit,
                            init_projection_head, invert_fusion, project)


def head_from(w1, wg, alpha=0.01, variant="square_theory"):
    return ProjectionHead(ag.Tensor(np.asarray(w1, float)), ag.Tensor(np.asarray(wg, float)), alpha, variant)


def test_fuse_shape_and_order(rng):
    v, t = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))
    out = fuse(v, t)
    assert out.shape == (5, 3)
    assert np.array_equal(out[:2], v) and np.array_equal(out[2:], t)


def test_fuse_index_oracle(rng):
    v, t = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    out = fuse(v, t)
    for i in range(6):
        src = v[i] if i < 4 else t[i - 4]
        assert np.array_equal(out[i], src)


def test_fuse_preconditions():
    with pytest.raises(ShapeError):
        fuse(np.zeros((2, 3)), np.zeros((0, 3)))
    with pytest.raises(ShapeError):
        fuse(np.zeros((2, 3)), np.zeros((2, 4)))


@given(st.integers(0, 10**6))
def test_fuse_collision_search(seed):
    r = np.random.default_rng(seed)
    v1, t1 = r.normal(size=(3, 2)), r.normal(size=(2, 2))
    v2, t2 = v1.copy(), t1.copy()
    (v2 if seed % 2 else t2)[r.integers(0, 2), r.integers(0, 2)] += 1e-9
    assert not np.array_equal(fuse(v1, t1), fuse(v2, t2))


def test_project_trivial_cases(rng):
    h = head_from(np.eye(4), np.eye(4))
    x = np.abs(rng.normal(size=(3, 4)))
    assert np.array_equal(project(x, h), x)
    rand = init_projection_head(4, "wide", seed=1)
    assert np.array_equal(project(np.zeros((2, 4)), rand), np.zeros((2, 4)))


def test_project_scalar_loop_oracle(rng):
    head = init_projection_head(3, "wide", seed=2, alpha=0.1)
    x = rng.normal(size=(1, 3))
    w1, wg = head.W1.data, head.Wg.data
    out = []
    for j in range(3):
        s = 0.0
        for k in range(w1.shape[1]):
            z = sum(x[0, i] * w1[i, k] for i in range(3))
            s += (z if z >= 0 else 0.1 * z) * wg[k, j]
        out.append(s)
    assert np.max(np.abs(project(x, head)[0] - out)) < 1e-12


def test_project_overflow_is_numeric_error():
    h = head_from(np.eye(2) * 1e200, np.eye(2) * 1e200)
    with np.errstate(over="ignore"):
        with pytest.raises(NumericError):
            project(np.ones((1, 2)), h)


def test_project_row_independence(rng):
    head = init_projection_head(5, "wide", seed=0)
    x = rng.normal(size=(7, 5))
    perm = rng.permutation(7)
    assert np.array_equal(project(x[perm], head), project(x, head)[perm])


def test_project_gradients_fd(rng):
    head = init_projection_head(3, "square_theory", seed=4, alpha=0.2)
    x = ag.parameter(rng.normal(size=(4, 3)), "x")
    params = [x, head.W1, head.Wg]

    def loss():
        y = project(x, head)
        return ag.sum_(ag.mul(y, y))

    for p in params:
        p.grad = None
    loss().backward()
    for p in params:
        num = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            old = p.data[idx]
            p.data[idx] = old + 1e-5
            up = float(loss().data)
            p.data[idx] = old - 1e-5
            dn = float(loss().data)
            p.data[idx] = old
            num[idx] = (up - dn) / 2e-5
        rel = np.abs(num - p.grad) / np.maximum(np.abs(num) + np.abs(p.grad), 1e-8)
        assert rel.max() < 1e-4


def test_global_pe_identity_and_cls(rng):
    cfg = TokenizerConfig(patch_size=2, embed_dim=3, visual_side=4, tactile_side=4)
    bank = init_pe_bank(cfg, seed=0)
    bank.pe_global.data[:] = 0
    x = rng.normal(size=(8, 3))
    assert np.array_equal(add_global_pe(x, bank), x)
    cbank = init_pe_bank(cfg, seed=0, use_cls=True)
    cls = rng.normal(size=(1, 3))
    out = add_global_pe(x, cbank, cls)
    assert out.shape == (9, 3)
    assert np.array_equal(out[0], cls[0] + cbank.pe_global.data[0])
    oracle = np.concatenate([cls, x]) + cbank.pe_global.data
    assert np.array_equal(out, oracle)
    with pytest.raises(ShapeError):
        add_global_pe(x, cbank)
    with pytest.raises(ShapeError):
        add_global_pe(x[:5], bank)


def test_global_pe_batched(rng):
    cfg = TokenizerConfig(patch_size=2, embed_dim=3, visual_side=4, tactile_side=4)
    bank = init_pe_bank(cfg, seed=0, use_cls=True)
    x = rng.normal(size=(2, 8, 3))
    cls = rng.normal(size=(1, 3))
    out = add_global_pe(x, bank, cls)
    assert out.shape == (2, 9, 3)
    assert np.array_equal(out[1, 0], cls[0] + bank.pe_global.data[0])


def test_rank_audit_identity_and_diag():
    r = head_rank_audit(head_from(np.eye(4), np.eye(4)))
    assert np.allclose(r.singular_values, 1) and not r.rank_deficient
    r = head_rank_audit(head_from(np.eye(4), np.diag([2, 1, 0.5, 0])))
    assert np.allclose(r.singular_values, [2, 1, 0.5, 0]) and r.rank_deficient


def test_rank_audit_eigen_oracle(rng):
    wg = rng.normal(size=(6, 4))
    r = head_rank_audit(head_from(np.zeros((4, 6)), wg, variant="wide"))
    eig = np.sqrt(np.sort(np.linalg.eigvalsh(wg.T @ wg))[::-1])
    assert np.max(np.abs(r.singular_values - eig)) < 1e-8
    assert (np.diff(r.singular_values) <= 0).all()


def test_invert_round_trip(rng):
    cfg = TokenizerConfig(patch_size=2, embed_dim=8, visual_side=4, tactile_side=4)
    bank = init_pe_bank(cfg, seed=0, use_cls=True)
    head = init_projection_head(8, "square_theory", seed=0)
    for _ in range(1000 // 50):
        x = rng.normal(size=(50, 8, 8))
        g = add_global_pe(project(x, head), bank, np.ones((1, 8)))
        assert np.max(np.abs(invert_fusion(g, head, bank) - x)) < 1e-6


def test_invert_alpha_one_is_linear(rng):
    cfg = TokenizerConfig(patch_size=2, embed_dim=4, visual_side=2, tactile_side=2)
    bank = init_pe_bank(cfg, seed=1)
    head = init_projection_head(4, "square_theory", seed=1, alpha=1.0)
    x = rng.normal(size=(2, 4))
    g = add_global_pe(project(x, head), bank)
    lin = (g - bank.pe_global.data) @ np.linalg.inv(head.Wg.data) @ np.linalg.inv(head.W1.data)
    assert np.allclose(invert_fusion(g, head, bank), lin, atol=1e-12)


def test_invert_refuses_bad_heads():
    cfg = TokenizerConfig(patch_size=2, embed_dim=4, visual_side=2, tactile_side=2)
    bank = init_pe_bank(cfg)
    with pytest.raises(InversionUnsupportedError):
        invert_fusion(np.zeros((2, 4)), init_projection_head(4, "wide"), bank)
    with pytest.raises(InversionUnsupportedError):
        invert_fusion(np.zeros((2, 4)), head_from(np.eye(4), np.diag([1, 1, 1, 0.0])), bank)


def test_head_variants():
    assert init_projection_head(6).hidden_dim == 12
    assert init_projection_head(6, hidden_dim=10).hidden_dim == 10
    assert init_projection_head(6, "square_theory", hidden_dim=10).hidden_dim == 6
    with pytest.raises(ValueError):
        init_projection_head(6, "bilinear")
    with pytest.raises(ValueError):
        init_projection_head(6, alpha=0.0)


def test_singular_value_log(tmp_path):
    log = SingularValueLog(tmp_path / "sv.csv", 2)
    log.append(0, head_rank_audit(head_from(np.eye(2), np.diag([3.0, 0.5]))))
    lines = (tmp_path / "sv.csv").read_text().splitlines()
    assert lines == ["epoch,sigma_1,sigma_2,min_sigma", "0,3,0.5,0.5"]
