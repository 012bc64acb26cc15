"""Finite-difference and naive-loop references, and their agreement with the
kernel implementations."""

import numpy as np
import pytest

from tdsa import selftest
from tdsa.losses import LossConfig, StageSpec, all_ones_masks, total_loss
from tdsa.oracle import (
    FdConfig,
    fd_gradient,
    max_rel_error,
    reference_diversity,
    reference_losses,
)
from tdsa.tensor import Tape, Tensor4


def test_fd_config_rejects_bad_step():
    with pytest.raises(ValueError):
        FdConfig(step=0.0)


def test_fd_gradient_of_sum_of_squares():
    x = np.full((1, 1, 1, 1), 3.0)
    grad = fd_gradient(lambda a: float((a * a).sum()), x)
    assert grad.ravel()[0] == pytest.approx(6.0, abs=1e-8)


def test_fd_gradient_of_constant_is_zero():
    x = np.random.default_rng(0).normal(size=(1, 2, 2, 2))
    np.testing.assert_array_equal(fd_gradient(lambda a: 1.25, x),
                                  np.zeros_like(x))


def test_fd_gradient_names_bad_coordinate():
    x = np.zeros((1, 1, 1, 3))

    def f(a):
        return float("nan") if a[0, 0, 0, 2] > 0 else 0.0

    with pytest.raises(FloatingPointError, match="coordinate 2"):
        fd_gradient(f, x)


def test_fd_gradient_accepts_tensor_input():
    t = Tensor4.const(np.full((1, 1, 1, 1), 2.0))
    grad = fd_gradient(lambda a: float((a ** 3).sum()), t)
    assert grad.ravel()[0] == pytest.approx(12.0, abs=1e-6)


def test_max_rel_error_basics():
    a = np.array([1.0, 2.0])
    assert max_rel_error(a, a) == 0.0
    assert max_rel_error(a, np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
    with pytest.raises(ValueError):
        max_rel_error(a, np.array([1.0]))


def test_max_rel_error_floors_tiny_denominators():
    # a 1e-9 absolute wobble on a zero coordinate must not dominate when the
    # gradient scale is order one
    a = np.array([1.0, 0.0])
    b = np.array([1.0, 1e-9])
    assert max_rel_error(a, b) < 1e-6


# -- naive-loop losses ---------------------------------------------------------

def _instance(seed=1, n=2, S=2, xi_h=1, repeat=2, sp_h=2, sp_l=4):
    rng = np.random.default_rng(seed)
    spec_h = StageSpec(S, xi_h)
    spec_l = StageSpec(S, xi_h * repeat)
    return (rng.normal(size=(n, S, 1, 1)),
            rng.normal(size=(n, spec_h.total_channels, sp_h, sp_h)),
            rng.normal(size=(n, spec_l.total_channels, sp_l, sp_l)),
            rng.integers(0, S, size=n), spec_h, spec_l)


def test_reference_diversity_identical_channels_is_one():
    spec = StageSpec(num_classes=2, channels_per_class=3)
    plane = np.random.default_rng(2).normal(size=(2, 1, 3, 3))
    F = np.repeat(plane, spec.total_channels, axis=1)
    assert reference_diversity(F, spec) == pytest.approx(1.0, abs=1e-12)


def test_reference_losses_zero_lambda_identity():
    logits, F_h, F_l, y, sh, sl = _instance(seed=3)
    cfg = LossConfig(mu=2.0, lam=0.0, mask_mode="all-ones")
    ref = reference_losses(logits, F_h, F_l, y, sh, sl, cfg,
                           all_ones_masks(sh), all_ones_masks(sl))
    assert ref.total == pytest.approx(ref.ce + 2.0 * (ref.dis_high + ref.dis_mid),
                                      rel=1e-12)


def test_reference_matches_kernel_on_fixed_case():
    logits, F_h, F_l, y, sh, sl = _instance(seed=4, S=3, xi_h=2, repeat=2)
    cfg = LossConfig(mask_mode="all-ones", upsample_method="bicubic")
    tape = Tape()
    _, bd = total_loss(tape.leaf(logits), tape.leaf(F_h), tape.leaf(F_l),
                       y, sh, sl, cfg)
    ref = reference_losses(logits, F_h, F_l, y, sh, sl, cfg,
                           all_ones_masks(sh), all_ones_masks(sl))
    for field in ("ce", "dis_high", "div_high", "mc_high", "dis_mid",
                  "div_mid", "mc_mid", "tdsa", "total"):
        a, b = getattr(bd, field), getattr(ref, field)
        assert abs(a - b) / max(abs(a), abs(b), 1e-12) < 1e-9, field


def test_fd_of_reference_matches_tape_gradient_of_kernel():
    # two fully independent paths: numeric gradient of the loop oracle vs
    # analytic gradient of the tape kernels
    logits, F_h0, F_l0, y, sh, sl = _instance(seed=5)
    cfg = LossConfig(mask_mode="all-ones")
    mh, ml = all_ones_masks(sh), all_ones_masks(sl)

    tape = Tape()
    th = tape.leaf(F_h0)
    node, _ = total_loss(tape.leaf(logits), th, tape.leaf(F_l0), y, sh, sl, cfg)
    tape.backward(node)

    fd = fd_gradient(
        lambda a: reference_losses(logits, a, F_l0, y, sh, sl, cfg, mh, ml).total,
        F_h0)
    assert max_rel_error(fd, tape.grad(th)) < 1e-4


# -- the randomized equivalence suite -------------------------------------------

def test_equivalence_suite_passes():
    result = selftest.suite_oracle_equivalence(seed=11, cases=50)
    assert result.passed, result.detail


def test_equivalence_suite_catches_corrupted_weight():
    result = selftest.suite_oracle_equivalence(seed=11, cases=5,
                                               corrupt_lambda_sign=True)
    assert not result.passed


def test_all_builtin_suites_pass():
    results = selftest.run_all(seed=0, equivalence_cases=10)
    assert len(results) >= 6
    names = {r.name for r in results}
    assert {"masks", "diversity-bounds", "softmax", "gradcheck",
            "oracle-equivalence", "resample"} <= names
    for r in results:
        assert r.passed, f"{r.name}: {r.detail}"


def test_replay_roundtrip(tmp_path):
    from tdsa.tensor import save_tensor4

    logits, F_h, F_l, y, sh, sl = _instance(seed=6)
    save_tensor4(tmp_path / "logits.t4", Tensor4.const(logits.astype(np.float32)))
    save_tensor4(tmp_path / "f_high.t4", Tensor4.const(F_h.astype(np.float32)))
    save_tensor4(tmp_path / "f_mid.t4", Tensor4.const(F_l.astype(np.float32)))
    save_tensor4(tmp_path / "labels.t4", Tensor4.const(
        y.reshape(-1, 1, 1, 1).astype(np.float32)))
    result = selftest.replay_equivalence(tmp_path, LossConfig(mask_mode="all-ones"))
    assert result.passed, result.detail
    assert not selftest.replay_equivalence(tmp_path / "nope",
                                           LossConfig(mask_mode="all-ones")).passed
