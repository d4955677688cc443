import numpy as np
import pytest
import torch

from echoreg.errors import ConfigError, ShapeMismatchError
from echoreg.losses import (LossTerms, LossWeights, adversarial_losses,
                            bending_energy, global_anatomic_similarity,
                            kl_standard_normal, local_anatomic_similarity,
                            mutual_information, ssim_index, total_objective,
                            vae_loss)


def hard_histogram_mi(a, b, bins):
    """Independent oracle: MI of a hard-binned joint histogram, in nats."""
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[0, 1], [0, 1]])
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


# ---------------------------------------------------------------------------
# mutual information
# ---------------------------------------------------------------------------

def test_mi_constant_images():
    img = torch.full((8, 8), 0.5, dtype=torch.float64)
    assert abs(float(mutual_information(img, img))) < 1e-6


def test_mi_half_half_matches_hard_histogram():
    img = np.zeros((16, 16))
    img[8:] = 1.0
    t = torch.as_tensor(img)
    got = float(mutual_information(t, t, bins=32))
    oracle = hard_histogram_mi(img, img, bins=2)
    assert abs(oracle - np.log(2)) < 1e-12
    assert abs(got - oracle) < 0.05


def test_mi_independent_images_near_zero():
    # 16 bins keeps the finite-sample bias of the estimator appropriate for
    # 256-pixel images (bins ~ sqrt(N)); the expectation stays well below 0.1
    rng = np.random.default_rng(0)
    values = [float(mutual_information(torch.as_tensor(rng.random((16, 16))),
                                       torch.as_tensor(rng.random((16, 16))), bins=16))
              for _ in range(100)]
    assert np.mean(values) < 0.1


def test_mi_nonnegative(rng):
    for _ in range(10):
        a = torch.as_tensor(rng.random((8, 8)))
        b = torch.as_tensor(rng.random((8, 8)))
        assert float(mutual_information(a, b)) >= -1e-6


def test_mi_symmetry(rng):
    a = torch.as_tensor(rng.random((8, 8)))
    b = torch.as_tensor(rng.random((8, 8)))
    assert abs(float(mutual_information(a, b)) - float(mutual_information(b, a))) < 1e-9


def test_mi_errors():
    img = torch.rand(8, 8)
    with pytest.raises(ConfigError):
        mutual_information(img, img, bins=1)
    with pytest.raises(ShapeMismatchError):
        mutual_information(img, torch.rand(8, 9))
    with pytest.raises(ShapeMismatchError):
        mutual_information(torch.zeros(0, 0), torch.zeros(0, 0))


# ---------------------------------------------------------------------------
# bending energy
# ---------------------------------------------------------------------------

def bending_oracle(u):
    """Explicit-loop second-difference bending energy."""
    h, w, _ = u.shape
    total, count = 0.0, 0
    for c in range(2):
        for i in range(1, h - 1):
            for j in range(1, w - 1):
                dyy = u[i + 1, j, c] - 2 * u[i, j, c] + u[i - 1, j, c]
                dxx = u[i, j + 1, c] - 2 * u[i, j, c] + u[i, j - 1, c]
                dxy = (u[i + 1, j + 1, c] - u[i + 1, j - 1, c]
                       - u[i - 1, j + 1, c] + u[i - 1, j - 1, c]) / 4.0
                total += dyy ** 2 + dxx ** 2 + 2 * dxy ** 2
                count += 1
    return total / count


def test_bending_zero_field():
    assert float(bending_energy(torch.zeros(5, 5, 2, dtype=torch.float64))) == 0.0


def test_bending_affine_field_vanishes():
    ys, xs = torch.meshgrid(torch.arange(6, dtype=torch.float64),
                            torch.arange(6, dtype=torch.float64), indexing="ij")
    u = torch.stack([0.5 + 0.25 * xs - 0.75 * ys, -1.0 + 0.3 * xs + 0.1 * ys], dim=-1)
    assert float(bending_energy(u)) < 1e-24


def test_bending_quadratic_matches_loop_oracle():
    ys, xs = np.meshgrid(np.arange(5, dtype=np.float64),
                         np.arange(5, dtype=np.float64), indexing="ij")
    u = np.stack([np.zeros_like(xs), xs ** 2], axis=-1)
    got = float(bending_energy(torch.as_tensor(u)))
    assert abs(got - bending_oracle(u)) < 1e-12


def test_bending_random_matches_loop_oracle(rng):
    u = rng.normal(size=(6, 7, 2))
    got = float(bending_energy(torch.as_tensor(u)))
    assert abs(got - bending_oracle(u)) < 1e-12


def test_bending_translation_invariance(rng):
    u = torch.as_tensor(rng.normal(size=(6, 6, 2)))
    shifted = u + torch.tensor([3.7, -1.2], dtype=torch.float64)
    a, b = float(bending_energy(u)), float(bending_energy(shifted))
    assert abs(a - b) <= 1e-10 * max(abs(a), 1.0)


def test_bending_too_small():
    with pytest.raises(ShapeMismatchError):
        bending_energy(torch.zeros(2, 5, 2))


# ---------------------------------------------------------------------------
# anatomic similarity
# ---------------------------------------------------------------------------

def test_dice_identical_binary_is_exactly_one(rng):
    maps = (rng.random((2, 8, 8)) > 0.5).astype(np.float64)
    got = float(local_anatomic_similarity(torch.as_tensor(maps), torch.as_tensor(maps)))
    assert got == 1.0


def test_dice_disjoint_is_zero():
    a = torch.zeros(2, 8, 8, dtype=torch.float64)
    b = torch.zeros(2, 8, 8, dtype=torch.float64)
    a[:, :4], b[:, 4:] = 1.0, 1.0
    assert float(local_anatomic_similarity(a, b)) == 0.0


def test_dice_partial_overlap_counting_oracle():
    # MYO: |A| = |B| = 100 with 50 px overlap; LV identical with 100 px
    a = torch.zeros(2, 20, 20, dtype=torch.float64)
    b = torch.zeros(2, 20, 20, dtype=torch.float64)
    a[0, :5, :20] = 1.0            # 100 px
    b[0, 2:7, 10:20], b[0, :5, :10] = 1.0, 1.0
    b[0, :5, :20] = 0.0
    a[0, :5, :20] = 0.0
    a[0].reshape(-1)[:100] = 1.0
    b[0].reshape(-1)[50:150] = 1.0
    a[1].reshape(-1)[200:300] = 1.0
    b[1].reshape(-1)[200:300] = 1.0
    got = float(local_anatomic_similarity(a, b))
    myo = 50.0 / 200.0
    lv = 100.0 / 200.0
    assert abs(got - (myo + lv)) < 1e-12
    assert abs(got - 0.75) < 1e-12


def test_dice_range(rng):
    for _ in range(10):
        a = torch.as_tensor(rng.random((2, 8, 8)))
        b = torch.as_tensor(rng.random((2, 8, 8)))
        val = float(local_anatomic_similarity(a, b))
        assert 0.0 <= val <= 1.0


def test_dice_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        local_anatomic_similarity(torch.rand(2, 8, 8), torch.rand(3, 8, 8))


def test_latent_distance_cases(rng):
    z = torch.as_tensor(rng.normal(size=8))
    assert float(global_anatomic_similarity(z, z)) == 0.0
    e1 = torch.zeros(4, dtype=torch.float64)
    e1[0] = 1.0
    assert float(global_anatomic_similarity(e1, -e1)) == 4.0
    a, b = rng.normal(size=8), rng.normal(size=8)
    oracle = sum((x - y) ** 2 for x, y in zip(a, b))
    got = float(global_anatomic_similarity(torch.as_tensor(a), torch.as_tensor(b)))
    assert abs(got - oracle) < 1e-12
    with pytest.raises(ShapeMismatchError):
        global_anatomic_similarity(torch.zeros(3), torch.zeros(4))


# ---------------------------------------------------------------------------
# VAE loss
# ---------------------------------------------------------------------------

def test_vae_loss_perfect_reconstruction():
    rng = np.random.default_rng(1)
    masks = (rng.random((1, 2, 16, 16)) > 0.5).astype(np.float64)
    x = torch.as_tensor(masks)
    mu = torch.zeros(1, 4, dtype=torch.float64)
    logvar = torch.zeros(1, 4, dtype=torch.float64)
    got = float(vae_loss(x, x, mu, logvar, ssim_window=5))
    assert abs(got - (-2.0)) < 1e-9


def test_kl_standard_normal_cases():
    mu = torch.zeros(1, 4, dtype=torch.float64)
    logvar = torch.zeros(1, 4, dtype=torch.float64)
    assert float(kl_standard_normal(mu, logvar)) == 0.0
    mu[0, 0] = 1.0
    assert abs(float(kl_standard_normal(mu, logvar)) - 0.5) < 1e-12


def test_vae_loss_kl_oracle(rng):
    x = torch.as_tensor(np.clip(rng.random((1, 2, 16, 16)), 1e-3, 1 - 1e-3))
    recon = torch.as_tensor(np.clip(rng.random((1, 2, 16, 16)), 1e-3, 1 - 1e-3))
    mu = torch.as_tensor(rng.normal(size=(1, 4)))
    logvar = torch.as_tensor(rng.normal(scale=0.3, size=(1, 4)))
    kl = -0.5 * float((1 + logvar - mu ** 2 - logvar.exp()).sum())
    base = float(vae_loss(x, recon, mu, logvar, ssim_window=5, kl_weight=0.0))
    full = float(vae_loss(x, recon, mu, logvar, ssim_window=5, kl_weight=2.0))
    assert abs((full - base) - 2.0 * kl) < 1e-9


def test_ssim_identical_is_one(rng):
    a = torch.as_tensor(rng.random((1, 2, 16, 16)))
    assert abs(float(ssim_index(a, a, window=5)) - 1.0) < 1e-9


def test_ssim_window_validation():
    a = torch.rand(1, 1, 16, 16)
    with pytest.raises(ConfigError):
        ssim_index(a, a, window=4)
    with pytest.raises(ConfigError):
        ssim_index(a, a, window=17)


# ---------------------------------------------------------------------------
# adversarial losses
# ---------------------------------------------------------------------------

def test_adversarial_maximal_confusion():
    g, d = adversarial_losses(0.5, 0.5)
    assert abs(float(d) - 2 * np.log(2)) < 1e-9
    assert abs(float(g) - np.log(2)) < 1e-9


def test_adversarial_perfect_discriminator():
    g, d = adversarial_losses(1.0, 0.0)
    assert float(d) < 1e-6
    assert np.isfinite(float(g))


def test_adversarial_random_matches_formula(rng):
    for _ in range(10):
        r, f = rng.uniform(0.01, 0.99, size=2)
        g, d = adversarial_losses(r, f)
        assert abs(float(d) - (-(np.log(r) + np.log(1 - f)))) < 1e-9
        assert abs(float(g) - (-np.log(f))) < 1e-9


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

def test_total_objective_zero_weights_is_negative_mi():
    terms = LossTerms(mi=0.42, bending=9.0, dice=0.1, latent_sq=5.0, g_adv=3.0)
    weights = LossWeights(0.0, 0.0, 0.0, 0.0)
    assert total_objective(terms, weights) == pytest.approx(-0.42)


def test_total_objective_paper_defaults_arithmetic():
    terms = LossTerms(mi=0.5, bending=0.1, dice=0.2, latent_sq=3.0, g_adv=0.7)
    weights = LossWeights()  # (1, 2, 2, 0.001)
    expected = -0.5 + 1.0 * 0.1 + 2.0 * (1 - 0.2) + 2.0 * 3.0 + 0.001 * 0.7
    assert total_objective(terms, weights) == pytest.approx(expected)


def test_total_objective_monotone_in_latent_weight():
    terms = LossTerms(mi=0.5, latent_sq=2.0)
    low = total_objective(terms, LossWeights(lambda_gac=2.0))
    high = total_objective(terms, LossWeights(lambda_gac=4.0))
    assert high > low


def test_negative_weight_rejected():
    with pytest.raises(ConfigError):
        LossWeights(lambda_r=-0.1)
