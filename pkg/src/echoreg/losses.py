"""Differentiable training losses and the combined registration objective.

All loss functions take torch tensors (any float dtype) and return scalar
tensors, so they can be finite-difference checked in float64 and used for
float32 training unchanged.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeMismatchError

DEFAULT_MI_BINS = 32
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4


@dataclass
class LossWeights:
    """Weights of the regularization terms in the combined objective."""

    lambda_r: float = 1.0
    lambda_lac: float = 2.0
    lambda_gac: float = 2.0
    lambda_ddc: float = 0.001

    def __post_init__(self):
        for name in ("lambda_r", "lambda_lac", "lambda_gac", "lambda_ddc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class LossTerms:
    """Raw component values entering the combined objective.

    Inactive terms keep their neutral defaults (dice=1 so the overlap penalty
    vanishes). Fields may be floats or scalar tensors.
    """

    mi: object = 0.0
    bending: object = 0.0
    dice: object = 1.0
    latent_sq: object = 0.0
    g_adv: object = 0.0


def _flatten_batch(x):
    """(H, W) -> (1, P); (N, H, W) -> (N, P)."""
    if x.dim() == 2:
        x = x[None]
    return x.reshape(x.shape[0], -1)


def mutual_information(fixed: torch.Tensor, warped: torch.Tensor,
                       bins: int = DEFAULT_MI_BINS) -> torch.Tensor:
    """Parzen-window mutual information in nats between [0, 1] images.

    Each pixel contributes a Gaussian soft assignment (bandwidth = bin width)
    to `bins` centers spread uniformly on [0, 1]; the per-pixel assignments are
    normalized so the smoothed joint histogram is a true distribution, which
    keeps the estimate non-negative. Batched inputs give the batch mean.
    """
    if bins < 2:
        raise ConfigError("mutual_information needs bins >= 2")
    a = _flatten_batch(fixed)
    b = _flatten_batch(warped)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(fixed.shape)} vs {tuple(warped.shape)}")
    if a.shape[1] == 0:
        raise ShapeMismatchError("mutual_information on empty image")
    centers = torch.linspace(0.0, 1.0, bins, dtype=a.dtype, device=a.device)
    sigma = 1.0 / (bins - 1)
    wa = torch.exp(-0.5 * ((a[..., None] - centers) / sigma) ** 2)
    wa = wa / wa.sum(-1, keepdim=True)
    wb = torch.exp(-0.5 * ((b[..., None] - centers) / sigma) ** 2)
    wb = wb / wb.sum(-1, keepdim=True)
    joint = wa.transpose(1, 2) @ wb / a.shape[1]           # (N, bins, bins)
    pa = joint.sum(dim=2, keepdim=True)
    pb = joint.sum(dim=1, keepdim=True)
    tiny = 1e-12
    mi = (joint * (torch.log(joint + tiny) - torch.log(pa * pb + tiny))).sum(dim=(1, 2))
    return mi.mean()


def bending_energy(flow: torch.Tensor) -> torch.Tensor:
    """Mean squared second-order bending of a (N, H, W, 2) or (H, W, 2) flow.

    Per interior pixel and component: u_yy^2 + u_xx^2 + 2 u_xy^2, using central
    second differences; translations and affine flows score exactly zero.
    """
    u = flow if flow.dim() == 4 else flow[None]
    if u.shape[1] < 3 or u.shape[2] < 3:
        raise ShapeMismatchError(f"bending_energy needs a field of at least 3x3, got {tuple(flow.shape)}")
    d2y = (u[:, 2:, 1:-1] - 2.0 * u[:, 1:-1, 1:-1] + u[:, :-2, 1:-1])
    d2x = (u[:, 1:-1, 2:] - 2.0 * u[:, 1:-1, 1:-1] + u[:, 1:-1, :-2])
    dxy = (u[:, 2:, 2:] - u[:, 2:, :-2] - u[:, :-2, 2:] + u[:, :-2, :-2]) / 4.0
    return (d2y ** 2 + d2x ** 2 + 2.0 * dxy ** 2).mean()


def local_anatomic_similarity(p_fixed: torch.Tensor, p_warped: torch.Tensor) -> torch.Tensor:
    """Soft multi-class Dice overlap (2/K) * sum_C |A.B| / (|A| + |B|).

    Expects matching (K, H, W) or (N, K, H, W) probability maps holding the
    foreground classes; a class empty in both maps counts as a perfect match.
    Value lies in [0, 1] and equals 1 for identical binary maps.
    """
    a = p_fixed if p_fixed.dim() == 4 else p_fixed[None]
    b = p_warped if p_warped.dim() == 4 else p_warped[None]
    if a.shape != b.shape:
        raise ShapeMismatchError(f"probmap shapes differ: {tuple(p_fixed.shape)} vs {tuple(p_warped.shape)}")
    k = a.shape[1]
    num = (a * b).sum(dim=(2, 3))
    den = a.sum(dim=(2, 3)) + b.sum(dim=(2, 3))
    term = torch.where(den > 0, num / den.clamp_min(1e-30), torch.full_like(den, 0.5))
    return ((2.0 / k) * term.sum(dim=1)).mean()


def global_anatomic_similarity(z_fixed: torch.Tensor, z_warped: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance between latent shape codes (batch mean)."""
    if z_fixed.shape != z_warped.shape:
        raise ShapeMismatchError(f"latent shapes differ: {tuple(z_fixed.shape)} vs {tuple(z_warped.shape)}")
    sq = ((z_fixed - z_warped) ** 2).sum(dim=-1)
    return sq.mean()


def ssim_index(a: torch.Tensor, b: torch.Tensor, window: int = 11,
               c1: float = SSIM_C1, c2: float = SSIM_C2) -> torch.Tensor:
    """Mean structural similarity over a sliding uniform window.

    a, b: (N, C, H, W) with values in [0, 1]; window must be odd and fit
    inside the image.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"ssim window must be odd and positive, got {window}")
    if a.shape != b.shape:
        raise ShapeMismatchError(f"ssim inputs differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    n, c, h, w = a.shape
    if window > min(h, w):
        raise ConfigError(f"ssim window {window} exceeds image size {h}x{w}")
    kernel = torch.full((c, 1, window, window), 1.0 / (window * window),
                        dtype=a.dtype, device=a.device)

    def box(x):
        return F.conv2d(x, kernel, groups=c)

    mu_a, mu_b = box(a), box(b)
    var_a = box(a * a) - mu_a ** 2
    var_b = box(b * b) - mu_b ** 2
    cov = box(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def kl_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(q(z|x) || N(0, I)) summed over latent dims, averaged over batch."""
    if mu.shape != logvar.shape:
        raise ShapeMismatchError("mu and logvar shapes differ")
    kl = -0.5 * (1.0 + logvar - mu ** 2 - torch.exp(logvar)).sum(dim=-1)
    return kl.mean()


def vae_loss(inputs: torch.Tensor, recon: torch.Tensor, mu: torch.Tensor,
             logvar: torch.Tensor, ssim_window: int = 11, c1: float = SSIM_C1,
             c2: float = SSIM_C2, kl_weight: float = 1.0) -> torch.Tensor:
    """Shape-autoencoder loss: -(Dice + SSIM) reconstruction reward plus KL.

    Minimizing drives the reconstruction toward the input mask while pulling
    the posterior toward the standard normal; a perfect reconstruction with a
    standard-normal posterior scores exactly -2.
    """
    x = inputs if inputs.dim() == 4 else inputs[None]
    y = recon if recon.dim() == 4 else recon[None]
    dice = local_anatomic_similarity(x, y)
    ssim = ssim_index(x, y, window=ssim_window, c1=c1, c2=c2)
    kl = kl_standard_normal(mu, logvar)
    return -dice - ssim + kl_weight * kl


def adversarial_losses(d_real, d_fake):
    """Non-saturating GAN losses from discriminator probabilities.

    Returns (g_loss, d_loss): d_loss = -[log D(real) + log(1 - D(fake))] and
    g_loss = -log D(fake), with probabilities clamped away from {0, 1} so both
    stay finite. Tensor inputs are averaged.
    """
    eps = 1e-7

    def as_prob(x):
        return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)

    r = as_prob(d_real).clamp(eps, 1.0 - eps)
    f = as_prob(d_fake).clamp(eps, 1.0 - eps)
    d_loss = -(torch.log(r).mean() + torch.log(1.0 - f).mean())
    g_loss = -torch.log(f).mean()
    return g_loss, d_loss


def total_objective(terms: LossTerms, weights: LossWeights):
    """Scalar minimized by the registration trainer.

    -MI + lambda_r * bending + lambda_lac * (1 - dice)
        + lambda_gac * latent_sq + lambda_ddc * g_adv
    """
    return (-terms.mi
            + weights.lambda_r * terms.bending
            + weights.lambda_lac * (1.0 - terms.dice)
            + weights.lambda_gac * terms.latent_sq
            + weights.lambda_ddc * terms.g_adv)
