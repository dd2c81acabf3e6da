import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitapes import autograd as ag
from vitapes.encoder import encoder_forward, named_config
from vitapes.errors import ConfigError, InversionUnsupportedError
from vitapes.theory import (AssumptionAudit, GradProblem, attention_problem, attention_rows_check,
                            constant_pe_model, entropy_preservation_check, equivariance_check, fused_output,
                            gradient_check, grid_permutation, injectivity_collision_search, linear_problem,
                            micro_model, pipeline_problem, read_reports, reconstruct_inputs,
                            sequence_permutation, verify_battery, write_reports)
from vitapes.training import TrainConfig, train


@pytest.fixture(scope="module")
def model():
    return micro_model(0)


def test_micro_dimensions(model):
    c = model.cfg
    assert (c.embed_dim, c.depth, c.heads, c.n_visual, c.n_tactile) == (8, 1, 1, 4, 4)
    assert c.head_variant == "square_theory" and c.dtype == "float64"


def test_identical_inputs_identical_outputs(model, rng):
    v, t = rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 2, 4, 4))
    assert np.array_equal(fused_output(model, v, t), fused_output(model, v.copy(), t.copy()))


def test_injectivity_search_finds_nothing(model):
    rep = injectivity_collision_search(model, num_pairs=10_000, seed=0)
    assert rep.status == "pass"
    assert rep.evidence["collisions"] == 0 and rep.evidence["pixel_delta"] > 0


def test_pixel_probe_forward_difference(model, rng):
    v, t = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 2, 4, 4))
    base = fused_output(model, v, t)
    for idx in [(0, 0, 0, 0), (0, 1, 3, 2)]:
        for img in ("v", "t"):
            v2, t2 = v.copy(), t.copy()
            (v2 if img == "v" else t2)[idx] += 1e-3
            assert np.abs(fused_output(model, v2, t2) - base).max() > 0


def test_injectivity_detects_a_constant_map(model):
    m = model.clone()
    m.params["patch.W_visual"].data[:] = 0
    m.params["patch.W_tactile"].data[:] = 0
    rep = injectivity_collision_search(m, num_pairs=10, seed=0)
    assert rep.status == "fail" and rep.evidence["collisions"] == 10
    assert "colliding_pair" in rep.evidence
    json.loads(rep.to_json())


def test_injectivity_wide_head_is_diagnostic():
    m = micro_model(0, head_variant="wide")
    assert injectivity_collision_search(m, num_pairs=50).status == "diagnostic"
    with pytest.raises(ConfigError):
        injectivity_collision_search(m, num_pairs=5, strict=True)


def test_grid_permutation_oracle():
    perm = grid_permutation(3, (1, 2))
    tokens = np.arange(9).reshape(3, 3)
    rolled = np.roll(tokens, (1, 2), axis=(0, 1)).ravel()
    assert np.array_equal(tokens.ravel()[perm], rolled)


def test_sequence_permutation_fixes_cls():
    cfg = named_config("theory_micro", use_cls=True)
    perm = sequence_permutation(cfg, (1, 1))
    assert perm[0] == 0 and sorted(perm) == list(range(9))
    assert set(perm[1:5]) == {1, 2, 3, 4}


@pytest.mark.parametrize("mode", ["permutation", "input_shift"])
def test_zero_shift_is_exact(model, mode):
    assert equivariance_check(model, (0, 0), mode).evidence["max_abs_deviation"] == 0.0


@settings(max_examples=15)
@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(0, 500))
def test_permutation_equivariance_random(dr, dc, seed):
    m = micro_model(seed % 5, use_cls=bool(seed % 2))
    rep = equivariance_check(m, (dr, dc), "permutation", seed=seed)
    assert rep.status == "pass" and rep.evidence["max_abs_deviation"] < 1e-6


def test_input_shift_is_diagnostic_and_constant_pe_is_exact(model):
    rep = equivariance_check(model, (1, 1), "input_shift")
    assert rep.status == "diagnostic" and rep.evidence["max_abs_deviation"] > 1e-6
    const = constant_pe_model(model)
    assert equivariance_check(const, (1, 1), "input_shift").evidence["max_abs_deviation"] < 1e-6
    assert "pe.global" in const.params and not np.array_equal(const.params["pe.global"].data,
                                                               model.params["pe.global"].data)


@pytest.mark.parametrize("shift", [(1.5, 0), (1,), ("a", 0), (True, 1)])
def test_shift_validation(model, shift):
    with pytest.raises((ConfigError, ValueError)):
        equivariance_check(model, shift)


def test_equivariance_mode_validation(model):
    with pytest.raises(ConfigError):
        equivariance_check(model, (1, 0), "rotation")


def test_zero_round_trips_to_zero(model):
    rv, rt = reconstruct_inputs(model, fused_output(model, np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 4, 4))))
    # the PEs are added and subtracted again, so only round-off remains
    assert np.abs(rv).max() < 1e-9 and np.abs(rt).max() < 1e-9


def test_entropy_round_trip(model):
    rep = entropy_preservation_check(model, num_samples=100)
    assert rep.status == "pass" and rep.evidence["max_rel_error"] < 1e-5


def test_entropy_refuses_rank_deficient_head(model):
    m = model.clone()
    m.params["head.Wg"].data[:, -1] = 0
    with pytest.raises(InversionUnsupportedError):
        entropy_preservation_check(m, num_samples=2)
    with pytest.raises(InversionUnsupportedError):
        entropy_preservation_check(micro_model(0, head_variant="wide"), num_samples=2)


def test_entropy_with_standardisation_and_cls():
    m = micro_model(3, use_cls=True, pixel_mean=0.5, pixel_std=0.25)
    assert entropy_preservation_check(m, num_samples=20).passed


def test_attention_rows(model):
    assert attention_rows_check(model).passed


def test_reports_are_reproducible(tmp_path, model):
    a = [injectivity_collision_search(model, 200, seed=4), equivariance_check(model, (1, 0), seed=4)]
    b = [injectivity_collision_search(micro_model(0), 200, seed=4), equivariance_check(micro_model(0), (1, 0), seed=4)]
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
    write_reports(a, tmp_path / "r.jsonl")
    rows = read_reports(tmp_path / "r.jsonl")
    assert [r["check"] for r in rows] == ["injectivity", "equivariance_permutation"]
    assert set(rows[0]) == {"check", "status", "evidence", "fingerprint", "seed"}


def test_audit_fresh_init(rng):
    for seed in range(5):
        m = micro_model(seed)
        rep = AssumptionAudit().audit(m, 0)
        assert rep.evidence["min_sigma"] > 0 and rep.evidence["max_off_diagonal_cosine"] < 0.9


def test_audit_hook_stride(tmp_path):
    from vitapes.data import GenConfig, generate_dataset

    ds = generate_dataset(GenConfig(image_side=4, patch_size=2, channels=2, samples_per_class=3))
    m = micro_model(0)
    hook = AssumptionAudit(stride=2, jsonl_path=tmp_path / "a.jsonl")
    train(m, ds, "supervised", TrainConfig(epochs=5, batch_size=6), hooks=[hook])
    assert [r.evidence["epoch"] for r in hook.reports] == [1, 3]
    assert len(read_reports(tmp_path / "a.jsonl")) == 2
    assert len(hook.series("min_sigma")) == 2


def test_gradient_linear_exact():
    rep = gradient_check(linear_problem, "lin", tol=1e-8)
    assert rep.passed and rep.evidence["rel_error"] < 1e-8


def test_gradient_attention_block():
    rep = gradient_check(attention_problem, "attn")
    assert rep.passed and rep.evidence["num_params"] <= 500


def test_gradient_full_pipeline():
    rep = gradient_check(pipeline_problem, "pipe")
    assert rep.passed, rep.evidence


def test_gradient_check_flags_wrong_gradient():
    def broken(seed):
        w = ag.parameter(np.random.default_rng(seed).normal(size=3), "w")

        def loss():
            # d/dw of sum(w^2) is 2w; use detach trick to make the tape wrong
            return ag.sum_(ag.mul(w, ag.Tensor(w.data.copy())))

        return GradProblem(loss, [("w", w)])

    assert gradient_check(broken, "broken").status == "fail"


def test_gradient_check_kink_retry_then_diagnostic():
    def kinked(seed):
        w = ag.parameter(np.zeros(2), "w")

        def loss():
            return ag.sum_(ag.leaky_relu(w, 0.1))

        return GradProblem(loss, [("w", w)])

    rep = gradient_check(kinked, "kink", max_retries=2)
    assert rep.status == "diagnostic" and rep.evidence["attempts"] == 3


def test_gradient_check_rejects_float32():
    def f32(seed):
        w = ag.parameter(np.ones(2, dtype=np.float32), "w")
        return GradProblem(lambda: ag.sum_(w), [("w", w)])

    with pytest.raises(ConfigError):
        gradient_check(f32)


def test_battery_all_strict_pass():
    reports = verify_battery(num_pairs=2000, num_samples=20)
    strict = [r for r in reports if r.status != "diagnostic"]
    assert len(strict) >= 10 and all(r.passed for r in strict), [(r.check, r.evidence) for r in strict
                                                               if not r.passed]
