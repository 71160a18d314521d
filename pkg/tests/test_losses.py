import math

import numpy as np
import pytest

import gradcheck
import losses
import similarity
from errors import ConfigError, DegenerateInputError, DimensionError, PatchError
from losses import AverageDim, LossReport, LossWeights, PatchConfig


def assert_grad_matches(func, x, analytic, tol=1e-4):
    numeric = gradcheck.finite_difference_gradient(func, x)
    assert gradcheck.max_relative_error(analytic, numeric) < tol


def brute_force_kd(z_s, z_t, tau):
    total = 0.0
    for row_s, row_t in zip(z_s, z_t):
        es = [math.exp(v / tau) for v in row_s]
        et = [math.exp(v / tau) for v in row_t]
        ps = [v / sum(es) for v in es]
        pt = [v / sum(et) for v in et]
        total += sum(t * math.log(t / s) for s, t in zip(ps, pt))
    return tau * tau * total / len(z_s)


# cross-entropy and KD

def test_cross_entropy(rng):
    z = rng.standard_normal((5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    report = losses.cross_entropy_loss(z, labels)
    expected = np.mean([-z[i, labels[i]] + np.log(np.sum(np.exp(z[i]))) for i in range(5)])
    assert report.value == pytest.approx(expected, abs=1e-12)
    assert_grad_matches(lambda v: losses.cross_entropy_loss(v, labels).value, z, report.grad)
    with pytest.raises(DimensionError):
        losses.cross_entropy_loss(z, np.array([0, 4, 1, 1, 2]))


def test_kd_hand_case():
    z_s = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    z_t = np.array([[0.5, 2.5, 1.0], [1.0, 0.0, 2.0]])
    for tau in (1.0, 4.0):
        assert losses.kd_kl_loss(z_s, z_t, tau).value == pytest.approx(brute_force_kd(z_s, z_t, tau), abs=1e-12)


def test_kd_identical_logits(rng):
    z = rng.standard_normal((6, 5))
    report = losses.kd_kl_loss(z, z)
    assert abs(report.value) < 1e-12
    np.testing.assert_allclose(report.grad, 0.0, atol=1e-12)


def test_kd_gradient(rng):
    for _ in range(50):
        z_s = rng.standard_normal((4, 3))
        z_t = rng.standard_normal((4, 3))
        report = losses.kd_kl_loss(z_s, z_t, 4.0)
        assert_grad_matches(lambda v: losses.kd_kl_loss(v, z_t, 4.0).value, z_s, report.grad)


def test_kd_large_temperature(rng):
    z_s = rng.standard_normal((6, 4))
    z_t = rng.standard_normal((6, 4))
    tau = 1e4
    value = losses.kd_kl_loss(z_s, z_t, tau).value
    # unscaled KL flattens to zero; the τ²-scaled value tends to a centered squared logit gap
    assert value / tau ** 2 < 1e-6
    delta = z_t - z_s
    delta = delta - delta.mean(axis=1, keepdims=True)
    limit = np.mean(np.sum(delta ** 2, axis=1)) / (2 * z_s.shape[1])
    assert value == pytest.approx(limit, rel=1e-2)


def test_kd_errors(rng):
    with pytest.raises(DimensionError):
        losses.kd_kl_loss(rng.standard_normal((4, 3)), rng.standard_normal((4, 5)))
    with pytest.raises(ConfigError):
        losses.kd_kl_loss(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)), tau=0.0)
    with pytest.raises(DimensionError):
        losses.kd_kl_loss(rng.standard_normal((1, 3)), rng.standard_normal((1, 3)))


# FCKA and logit CKA

def test_fcka_identical_and_cross_dimension(rng):
    f = rng.standard_normal((4, 3, 2, 2))
    assert abs(losses.fcka_loss(f, f).value) < 1e-12
    report = losses.fcka_loss(rng.standard_normal((4, 3, 2, 2)), rng.standard_normal((4, 8, 4, 4)))
    assert 0.0 <= report.value <= 1.0
    assert report.grad.shape == (4, 3, 2, 2)


def test_fcka_composition(rng):
    f_s = rng.standard_normal((5, 2, 3, 3))
    f_t = rng.standard_normal((5, 4, 2, 2))
    expected = 1.0 - similarity.cka(f_t.reshape(5, -1), f_s.reshape(5, -1))
    assert losses.fcka_loss(f_s, f_t).value == pytest.approx(expected, abs=1e-12)


def test_fcka_gradient(rng):
    for _ in range(50):
        f_s = rng.standard_normal((3, 2, 2, 2))
        f_t = rng.standard_normal((3, 3, 2, 2))
        report = losses.fcka_loss(f_s, f_t)
        assert_grad_matches(lambda v: losses.fcka_loss(v, f_t).value, f_s, report.grad)


def test_fcka_channel_permutation(rng):
    f_s = rng.standard_normal((6, 4, 2, 2))
    f_t = rng.standard_normal((6, 4, 2, 2))
    perm = rng.permutation(4)
    base = losses.fcka_loss(f_s, f_t).value
    assert abs(losses.fcka_loss(f_s[:, perm], f_t[:, perm]).value - base) < 1e-10


def test_fcka_batch_mismatch(rng):
    with pytest.raises(DimensionError):
        losses.fcka_loss(rng.standard_normal((4, 2, 2, 2)), rng.standard_normal((5, 2, 2, 2)))


def test_intra_lcka(rng):
    z_t = rng.standard_normal((8, 10))
    assert abs(losses.intra_lcka_loss(z_t, z_t).value) < 1e-12
    q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    assert abs(losses.intra_lcka_loss(z_t @ q, z_t).value) < 1e-10
    z_s = rng.standard_normal((8, 10))
    assert losses.intra_lcka_loss(z_s, z_t).value == pytest.approx(1.0 - similarity.cka(z_t, z_s), abs=1e-12)
    # class counts may differ
    assert losses.intra_lcka_loss(rng.standard_normal((8, 3)), z_t).grad.shape == (8, 3)
    with pytest.raises(DimensionError):
        losses.intra_lcka_loss(rng.standard_normal((7, 10)), z_t)


def test_inter_lcka(rng):
    z_t = rng.standard_normal((8, 4))
    z_s = rng.standard_normal((8, 4))
    assert abs(losses.inter_lcka_loss(z_t, z_t).value) < 1e-12
    base = losses.inter_lcka_loss(z_s, z_t).value
    assert base == pytest.approx(1.0 - similarity.cka(z_t.T, z_s.T), abs=1e-12)
    perm = rng.permutation(8)
    assert abs(losses.inter_lcka_loss(z_s[perm], z_t[perm]).value - base) < 1e-10
    with pytest.raises(DimensionError):
        losses.inter_lcka_loss(rng.standard_normal((8, 3)), z_t)


def test_logit_gradients(rng):
    for _ in range(50):
        z_s = rng.standard_normal((6, 4))
        z_t = rng.standard_normal((6, 4))
        intra = losses.intra_lcka_loss(z_s, z_t)
        inter = losses.inter_lcka_loss(z_s, z_t)
        assert_grad_matches(lambda v: losses.intra_lcka_loss(v, z_t).value, z_s, intra.grad)
        assert_grad_matches(lambda v: losses.inter_lcka_loss(v, z_t).value, z_s, inter.grad)


def test_losses_positive_on_mismatch(rng):
    for _ in range(100):
        z_s = rng.standard_normal((6, 4))
        z_t = rng.standard_normal((6, 4))
        assert losses.kd_kl_loss(z_s, z_t).value > 1e-6
        assert losses.intra_lcka_loss(z_s, z_t).value > 1e-6
        assert losses.inter_lcka_loss(z_s, z_t).value > 1e-6

        f_s = rng.standard_normal((6, 2, 2, 1))
        f_t = rng.standard_normal((6, 2, 2, 1))
        assert losses.fcka_loss(f_s, f_t).value > 1e-6
        assert losses.mimic_mse_loss(f_s, f_t, rng.standard_normal((2, 2))).value > 1e-6

        m_s = rng.standard_normal((2, 3, 4, 4))
        m_t = rng.standard_normal((2, 3, 4, 4))
        assert losses.pcka_loss(m_s, m_t, PatchConfig(2, 2)).value > 1e-6


# RCKA composition

def test_rcka_total():
    parts = [LossReport(value=v, grad=None) for v in (0.1, 0.2, 0.3)]
    report = losses.rcka_total(0.7, *parts, LossWeights(alpha=5.0, beta=5.0))
    assert report.value == pytest.approx(0.7 + 5 * 0.1 + 5 * (0.2 + 0.3), abs=1e-12)
    assert report.components['total'] == report.value
    assert report.grad is None

    zeros = [LossReport(value=0.0, grad=None)] * 3
    assert losses.rcka_total(0.7, *zeros).value == 0.7
    assert losses.rcka_total(0.7, *parts, LossWeights(alpha=0.0, beta=0.0)).value == 0.7


def test_rcka_total_weights_gradients(rng):
    g_f = rng.standard_normal((4, 3, 1, 1))
    g_a = rng.standard_normal((4, 2))
    g_b = rng.standard_normal((4, 2))
    report = losses.rcka_total(
        0.5, LossReport(0.1, g_f), LossReport(0.2, g_a), LossReport(0.3, g_b), LossWeights(alpha=2.0, beta=3.0))
    np.testing.assert_allclose(report.grad, 3.0 * (g_a + g_b))
    np.testing.assert_allclose(report.extra_grads['features'], 2.0 * g_f)


def test_loss_weight_validation():
    with pytest.raises(ConfigError):
        LossWeights(alpha=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(tau=0.0)
    with pytest.raises(ConfigError):
        PatchConfig(0, 2)


# patching and PCKA

def test_patchify_single_patch():
    f = np.arange(4.0).reshape(1, 1, 2, 2)
    p = losses.patchify(f, PatchConfig(2, 2))
    assert p.shape == (1, 1, 4)
    np.testing.assert_array_equal(p[0, 0], [0.0, 1.0, 2.0, 3.0])


def test_patchify_layout(rng):
    f = rng.standard_normal((2, 3, 4, 4))
    p = losses.patchify(f, PatchConfig(2, 2))
    assert p.shape == (3, 4, 8)
    for k in range(3):
        for r in range(2):
            for s in range(2):
                expected = np.concatenate([f[b, k, 2 * r:2 * r + 2, 2 * s:2 * s + 2].reshape(-1) for b in range(2)])
                np.testing.assert_array_equal(p[k, r * 2 + s], expected)
    np.testing.assert_array_equal(np.sort(p.reshape(-1)), np.sort(f.reshape(-1)))


def test_patchify_round_trip(rng):
    for _ in range(100):
        b, c, n_ph, n_pw, p_h, p_w = rng.integers(1, 4, size=6)
        pc = PatchConfig(int(p_h), int(p_w))
        shape = (int(b), int(c), int(n_ph * p_h), int(n_pw * p_w))
        f = rng.standard_normal(shape)
        np.testing.assert_array_equal(losses.unpatchify(losses.patchify(f, pc), shape, pc), f)


def test_patchify_rejects_non_divisible(rng):
    with pytest.raises(PatchError):
        losses.patchify(rng.standard_normal((2, 3, 5, 4)), PatchConfig(2, 2))


def test_pcka_identical(rng):
    f = rng.standard_normal((2, 3, 4, 4))
    assert abs(losses.pcka_loss(f, f).value) < 1e-10


def test_pcka_channel_mean_oracle(rng):
    f_s = rng.standard_normal((2, 3, 4, 4))
    f_t = rng.standard_normal((2, 3, 4, 4))
    pc = PatchConfig(2, 2)
    p_s = losses.patchify(f_s, pc)
    p_t = losses.patchify(f_t, pc)
    expected = 10.0 * np.mean([1.0 - similarity.cka(p_t[k], p_s[k]) for k in range(3)])
    report = losses.pcka_loss(f_s, f_t, pc, gamma=10.0)
    assert abs(report.value - expected) < 1e-10
    assert report.skipped == []
    assert losses.pcka_loss(f_s, f_t, pc, gamma=20.0).value == pytest.approx(2 * report.value, rel=1e-12)


def test_pcka_single_channel(rng):
    f_s = rng.standard_normal((3, 1, 4, 4))
    f_t = rng.standard_normal((3, 1, 4, 4))
    pc = PatchConfig(2, 2)
    expected = 10.0 * (1.0 - similarity.cka(losses.patchify(f_t, pc)[0], losses.patchify(f_s, pc)[0]))
    assert losses.pcka_loss(f_s, f_t, pc).value == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize('average', list(AverageDim))
def test_pcka_gradient(rng, average):
    for _ in range(50):
        f_s = rng.standard_normal((3, 2, 4, 4))
        f_t = rng.standard_normal((3, 2, 4, 4))
        report = losses.pcka_loss(f_s, f_t, average=average)
        assert report.grad.shape == f_s.shape
        assert_grad_matches(lambda v: losses.pcka_loss(v, f_t, average=average).value, f_s, report.grad)


def test_pcka_averaging_variants_differ(rng):
    # teacher is a noisy channel-mix of the student
    f_s = rng.standard_normal((3, 3, 4, 4))
    mix = rng.standard_normal((3, 3))
    f_t = np.einsum('oc,bchw->bohw', mix, f_s) + 0.5 * rng.standard_normal((3, 3, 4, 4))
    grads = {a: losses.pcka_loss(f_s, f_t, average=a).grad for a in AverageDim}
    assert not np.allclose(grads[AverageDim.CHANNEL], grads[AverageDim.BATCH])
    assert not np.allclose(grads[AverageDim.CHANNEL], grads[AverageDim.SPATIAL])
    assert not np.allclose(grads[AverageDim.BATCH], grads[AverageDim.SPATIAL])


def test_pcka_parallel_matches_sequential(rng):
    f_s = rng.standard_normal((2, 6, 4, 4))
    f_t = rng.standard_normal((2, 6, 4, 4))
    sequential = losses.pcka_loss(f_s, f_t)
    parallel = losses.pcka_loss(f_s, f_t, workers=4)
    assert parallel.value == sequential.value
    np.testing.assert_array_equal(parallel.grad, sequential.grad)


def test_pcka_skips_constant_channel(rng):
    f_s = rng.standard_normal((2, 3, 4, 4))
    f_t = rng.standard_normal((2, 3, 4, 4))
    f_s[:, 1] = 0.25
    pc = PatchConfig(2, 2)
    report = losses.pcka_loss(f_s, f_t, pc)
    assert report.skipped == [1]
    p_s = losses.patchify(f_s, pc)
    p_t = losses.patchify(f_t, pc)
    expected = 10.0 * np.mean([1.0 - similarity.cka(p_t[k], p_s[k]) for k in (0, 2)])
    assert report.value == pytest.approx(expected, abs=1e-12)
    np.testing.assert_array_equal(report.grad[:, 1], 0.0)

    with pytest.raises(DegenerateInputError):
        losses.pcka_loss(np.ones((2, 3, 4, 4)), f_t, pc)


def test_pcka_errors(rng):
    with pytest.raises(DimensionError):
        losses.pcka_loss(rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 2, 4, 4)))
    with pytest.raises(PatchError):
        losses.pcka_loss(rng.standard_normal((2, 3, 4, 6)), rng.standard_normal((2, 3, 4, 6)), PatchConfig(4, 4))
    # a single patch per channel leaves one row per group
    with pytest.raises(DimensionError):
        losses.pcka_loss(rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 3, 2, 2)), PatchConfig(2, 2))


# MMD distance

def test_mmd_loss_matches_uncentered_jensen_bound(rng):
    for _ in range(100):
        x = rng.standard_normal((6, 4))
        y = rng.standard_normal((6, 3))
        value, _ = losses.mmd_loss(x, y)
        bound = similarity.mmd_decomposition(x, y, similarity.CkaConfig(center=False)).jensen_bound
        assert value == pytest.approx(2.0 - bound, abs=1e-10)
        assert value >= 0.0


def test_mmd_loss_double_loop(rng):
    x = rng.standard_normal((5, 3))
    y = rng.standard_normal((5, 4))
    x_tilde = x / np.sqrt(np.linalg.norm(x @ x.T))
    y_tilde = y / np.sqrt(np.linalg.norm(y @ y.T))
    diff = 0.0
    for i in range(5):
        for j in range(5):
            diff += x_tilde[i] @ x_tilde[j] - y_tilde[i] @ y_tilde[j]
    assert losses.mmd_loss(x, y)[0] == pytest.approx(diff * diff / 25, abs=1e-12)


def test_mmd_loss_identical_and_scaled(rng):
    x = rng.standard_normal((6, 4))
    assert losses.mmd_loss(x, x)[0] == 0.0
    assert losses.mmd_loss(3.5 * x, x)[0] == pytest.approx(0.0, abs=1e-24)
    # centering removes the row mean the distance is built on
    centered = x - x.mean(axis=0)
    other = rng.standard_normal((6, 2))
    assert losses.mmd_loss(centered, other - other.mean(axis=0))[0] == pytest.approx(0.0, abs=1e-20)


def test_mmd_loss_gradient(rng):
    for _ in range(50):
        x = rng.standard_normal((6, 4)) + 0.5
        y = rng.standard_normal((6, 3))
        _, grad = losses.mmd_loss(x, y)
        assert_grad_matches(lambda v: losses.mmd_loss(v, y)[0], x, grad)


def test_mmd_loss_errors(rng):
    with pytest.raises(DimensionError):
        losses.mmd_loss(rng.standard_normal((5, 3)), rng.standard_normal((6, 3)))
    with pytest.raises(DegenerateInputError):
        losses.mmd_loss(np.zeros((4, 2)), rng.standard_normal((4, 2)))


@pytest.mark.parametrize('average', list(AverageDim))
def test_patch_mmd_gradient(rng, average):
    for _ in range(20):
        f_s = rng.standard_normal((3, 2, 4, 4)) + 0.3
        f_t = rng.standard_normal((3, 2, 4, 4))
        report = losses.patch_mmd_loss(f_s, f_t, average=average)
        assert report.grad.shape == f_s.shape
        assert_grad_matches(lambda v: losses.patch_mmd_loss(v, f_t, average=average).value, f_s, report.grad)


def test_patch_mmd_channel_mean_oracle(rng):
    f_s = rng.standard_normal((2, 3, 4, 4))
    f_t = rng.standard_normal((2, 3, 4, 4))
    pc = PatchConfig(2, 2)
    p_s = losses.patchify(f_s, pc)
    p_t = losses.patchify(f_t, pc)
    expected = 10.0 * np.mean([losses.mmd_loss(p_s[k], p_t[k])[0] for k in range(3)])
    report = losses.patch_mmd_loss(f_s, f_t, pc)
    assert report.value == pytest.approx(expected, abs=1e-12)
    assert report.components == {'pmmd': report.value}
    assert losses.patch_mmd_loss(f_s, f_s, pc).value == 0.0



# mimic

def test_mimic_trivial_cases(rng):
    f = rng.standard_normal((2, 3, 2, 2))
    assert losses.mimic_mse_loss(f, f, np.eye(3)).value == 0.0
    f_t = rng.standard_normal((2, 4, 2, 2))
    assert losses.mimic_mse_loss(f, f_t, np.zeros((4, 3))).value == pytest.approx(np.mean(f_t ** 2), abs=1e-14)


def test_mimic_brute_force(rng):
    f_s = rng.standard_normal((2, 3, 2, 3))
    f_t = rng.standard_normal((2, 4, 2, 3))
    proj = rng.standard_normal((4, 3))
    total = 0.0
    for b in range(2):
        for i in range(2):
            for j in range(3):
                diff = proj @ f_s[b, :, i, j] - f_t[b, :, i, j]
                total += np.sum(diff ** 2)
    assert losses.mimic_mse_loss(f_s, f_t, proj).value == pytest.approx(total / f_t.size, abs=1e-12)


def test_mimic_gradients(rng):
    for _ in range(50):
        f_s = rng.standard_normal((2, 3, 2, 2))
        f_t = rng.standard_normal((2, 2, 2, 2))
        proj = rng.standard_normal((2, 3))
        report = losses.mimic_mse_loss(f_s, f_t, proj)
        assert_grad_matches(lambda v: losses.mimic_mse_loss(v, f_t, proj).value, f_s, report.grad)
        assert_grad_matches(lambda p: losses.mimic_mse_loss(f_s, f_t, p).value, proj, report.extra_grads['proj'])


def test_mimic_errors(rng):
    f_s = rng.standard_normal((2, 3, 2, 2))
    with pytest.raises(DimensionError):
        losses.mimic_mse_loss(f_s, rng.standard_normal((2, 4, 2, 2)), np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        losses.mimic_mse_loss(f_s, rng.standard_normal((2, 4, 3, 2)), np.zeros((4, 3)))
