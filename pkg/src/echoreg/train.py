"""Training: VAE pretraining, adversarial registration training, curricula.

The registration trainer minimizes the combined objective from `losses` with
the weight subset selected by the model configuration:

    van     mutual information + bending energy only
    vm      + local (Dice) anatomic constraint
    ac      + local and global (VAE latent) anatomic constraints
    ddc     mutual information + bending + adversarial constraint
    ddc-ac  all constraints

When the adversarial weight is zero no discriminator is ever constructed.
Identical config + seed reproduces identical parameters on one platform.
"""

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from . import metrics as metrics_mod
from .core import (DisplacementField, Image2D, LabelMask, bilinear_warp, one_hot,
                   resize, warp_mask, warp_probs)
from .errors import ConfigError, DataError
from .losses import (LossTerms, LossWeights, adversarial_losses, bending_energy,
                     global_anatomic_similarity, local_anatomic_similarity,
                     mutual_information, total_objective, vae_loss)
from .networks import (DeformNet, DeformNetConfig, Discriminator,
                       DiscriminatorConfig, ShapeVAE, VAEConfig, save_checkpoint)

MODE_ALIASES = {
    "van": "van", "vandlir": "van",
    "vm": "vm", "voxelmorph": "vm", "voxelmorph-like": "vm",
    "ac": "ac", "ac-dlir": "ac",
    "ddc": "ddc", "ddc-dlir": "ddc",
    "ddc-ac": "ddc-ac", "ddc-ac-dlir": "ddc-ac",
}

HISTORY_COLUMNS = ["epoch", "scale", "mi", "bending", "dice", "latent_sq",
                   "g_adv", "d_loss", "total",
                   "val_dsc", "val_hd_mm", "val_tu_sqrt_mm", "val_mse"]


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    scales: tuple = (32, 64, 128)
    epochs: int = 12
    batch_size: int = 8
    lr: float = 2e-4
    vae_lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    augment: bool = False
    augment_prob: float = 0.3
    latent_dim: int = 64
    mi_bins: int = 32
    deform_channels: tuple = (16, 32, 64, 128)
    vae_size: int = 64
    vae_epochs: int = 60
    kl_weight: float = 1.0
    ssim_window: int = 11

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.scales = tuple(int(s) for s in self.scales)
        if any(b >= a for a, b in zip(self.scales[1:], self.scales)):
            raise ConfigError(f"scales must be strictly increasing, got {self.scales}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        self.betas = tuple(float(b) for b in self.betas)
        self.deform_channels = tuple(int(c) for c in self.deform_channels)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=list)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad config file: {exc}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


def resolve_mode(name: str) -> str:
    key = name.lower()
    if key not in MODE_ALIASES:
        raise ConfigError(f"unknown mode {name!r}; expected one of {sorted(set(MODE_ALIASES.values()))}")
    return MODE_ALIASES[key]


def resolve_weights(mode: str, w: LossWeights) -> LossWeights:
    """Zero out the loss weights a model configuration does not use."""
    mode = resolve_mode(mode)
    lac = w.lambda_lac if mode in ("vm", "ac", "ddc-ac") else 0.0
    gac = w.lambda_gac if mode in ("ac", "ddc-ac") else 0.0
    ddc = w.lambda_ddc if mode in ("ddc", "ddc-ac") else 0.0
    return LossWeights(w.lambda_r, lac, gac, ddc)


# ---------------------------------------------------------------------------
# registration pairs
# ---------------------------------------------------------------------------

@dataclass
class PairSample:
    case_id: str
    frame_pair: str
    fixed_image: Image2D
    fixed_mask: LabelMask
    moving_image: Image2D
    moving_mask: LabelMask


def ed_es_pairs(cases) -> list:
    """One ED(fixed)/ES(moving) pair per case."""
    pairs = []
    for case in cases:
        (fi, fm), (mi_, mm) = case.ed(), case.es()
        es = case.es_index if case.es_index is not None else len(case.frames) - 1
        pairs.append(PairSample(case.case_id, f"t{es:02d}->t00", fi, fm, mi_, mm))
    return pairs


def temporal_pairs(cases) -> list:
    """Frame 0 fixed against every later frame of each case."""
    pairs = []
    for case in cases:
        fi, fm = case.ed()
        for t in range(1, len(case.frames)):
            mi_, mm = case.frames[t]
            pairs.append(PairSample(case.case_id, f"t{t:02d}->t00", fi, fm, mi_, mm))
    return pairs


def identity_pairs(cases) -> list:
    """Fixed == moving pairs (frame 0 against itself)."""
    return [PairSample(c.case_id, "t00->t00", *c.ed(), *c.ed()) for c in cases]


def pairs_at_scale(pairs, scale: int) -> list:
    size = (scale, scale)
    return [PairSample(p.case_id, p.frame_pair,
                       resize(p.fixed_image, size), resize(p.fixed_mask, size),
                       resize(p.moving_image, size), resize(p.moving_mask, size))
            for p in pairs]


def _stack(pairs):
    f_img = torch.stack([torch.as_tensor(p.fixed_image.pixels, dtype=torch.float32)
                         for p in pairs])[:, None]
    m_img = torch.stack([torch.as_tensor(p.moving_image.pixels, dtype=torch.float32)
                         for p in pairs])[:, None]
    f_oh = torch.stack([torch.as_tensor(one_hot(p.fixed_mask).maps) for p in pairs])
    m_oh = torch.stack([torch.as_tensor(one_hot(p.moving_mask).maps) for p in pairs])
    return f_img, m_img, f_oh, m_oh


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip_pair(image: Image2D, mask: LabelMask):
    return (Image2D(np.ascontiguousarray(np.fliplr(image.pixels)), image.spacing),
            LabelMask(np.ascontiguousarray(np.fliplr(mask.labels)), mask.spacing))


def motion_blur(pixels: np.ndarray, rng) -> np.ndarray:
    length = int(rng.choice([5, 7, 9]))
    theta = rng.uniform(0.0, np.pi)
    kernel = np.zeros((length, length))
    c = (length - 1) / 2.0
    for i in range(length):
        o = i - c
        kernel[int(round(c + o * np.sin(theta))), int(round(c + o * np.cos(theta)))] = 1.0
    kernel /= kernel.sum()
    return np.clip(ndimage.convolve(pixels, kernel, mode="reflect"), 0.0, 1.0)


def gaussian_blur(pixels: np.ndarray, rng) -> np.ndarray:
    sigma = rng.uniform(0.5, 1.5)
    return np.clip(ndimage.gaussian_filter(pixels, sigma=sigma, mode="reflect"), 0.0, 1.0)


def defocus_blur(pixels: np.ndarray, rng) -> np.ndarray:
    radius = int(rng.choice([2, 3, 4]))
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    kernel = (yy ** 2 + xx ** 2 <= radius ** 2).astype(np.float64)
    kernel /= kernel.sum()
    return np.clip(ndimage.convolve(pixels, kernel, mode="reflect"), 0.0, 1.0)


def clahe(pixels: np.ndarray) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization (8x8 tiles, clip 2.0)."""
    as_u8 = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    out = cv2.createCLAHE(clipLimit=2.0, tileGridSize=(8, 8)).apply(as_u8)
    return out.astype(np.float32) / 255.0


def augment_pair(image: Image2D, mask: LabelMask, rng, prob: float = 0.3):
    """Random augmentation of one frame.

    The horizontal flip moves image and mask together; blur/defocus/CLAHE touch
    the image only. Each transform fires independently with probability `prob`.
    """
    if rng.random() < prob:
        image, mask = hflip_pair(image, mask)
    pixels = image.pixels.astype(np.float32)
    if rng.random() < prob:
        pixels = motion_blur(pixels, rng)
    if rng.random() < prob:
        pixels = gaussian_blur(pixels, rng)
    if rng.random() < prob:
        pixels = defocus_blur(pixels, rng)
    if rng.random() < prob:
        pixels = clahe(pixels)
    return Image2D(np.clip(pixels, 0.0, 1.0), image.spacing), mask


def _augment_registration_pair(pair: PairSample, rng, prob: float) -> PairSample:
    # the flip must hit both frames or neither, else it would corrupt the
    # registration target; intensity augmentations are drawn per frame
    fi, fm, mi_, mm = pair.fixed_image, pair.fixed_mask, pair.moving_image, pair.moving_mask
    if rng.random() < prob:
        fi, fm = hflip_pair(fi, fm)
        mi_, mm = hflip_pair(mi_, mm)
    fi, fm = _intensity_augment(fi, fm, rng, prob)
    mi_, mm = _intensity_augment(mi_, mm, rng, prob)
    return PairSample(pair.case_id, pair.frame_pair, fi, fm, mi_, mm)


def _intensity_augment(image: Image2D, mask: LabelMask, rng, prob: float):
    pixels = image.pixels.astype(np.float32)
    if rng.random() < prob:
        pixels = motion_blur(pixels, rng)
    if rng.random() < prob:
        pixels = gaussian_blur(pixels, rng)
    if rng.random() < prob:
        pixels = defocus_blur(pixels, rng)
    if rng.random() < prob:
        pixels = clahe(pixels)
    return Image2D(np.clip(pixels, 0.0, 1.0), image.spacing), mask


# ---------------------------------------------------------------------------
# VAE pretraining
# ---------------------------------------------------------------------------

def collect_masks(cases) -> list:
    return [mask for case in cases for _, mask in case.frames]


def _fg_tensor(masks, size: int) -> torch.Tensor:
    """Stack foreground (MYO, LV) channels of masks resized to the VAE size."""
    maps = [one_hot(resize(m, (size, size))).foreground() for m in masks]
    return torch.as_tensor(np.stack(maps), dtype=torch.float32)


def vae_round_trip_dice(vae: ShapeVAE, masks) -> float:
    """Mean hard Dice between input masks and their binarized reconstructions."""
    size = vae.config.input_size[0]
    x = _fg_tensor(masks, size)
    vae.eval()
    with torch.no_grad():
        recon, _, _ = vae(x)
    ref = x.numpy() > 0.5
    out = recon.numpy() > 0.5
    scores = []
    for i in range(ref.shape[0]):
        for c in range(ref.shape[1]):
            denom = ref[i, c].sum() + out[i, c].sum()
            scores.append(1.0 if denom == 0 else 2.0 * (ref[i, c] & out[i, c]).sum() / denom)
    return float(np.mean(scores))


def pretrain_vae(masks, cfg: TrainConfig, epochs: int | None = None,
                 val_masks=None, log_path=None):
    """Train the shape VAE on mask probmaps; returns (vae, history rows)."""
    if not masks:
        raise DataError("empty VAE training set")
    epochs = epochs or cfg.vae_epochs
    torch.manual_seed(cfg.seed)
    vae = ShapeVAE(VAEConfig(input_size=cfg.vae_size, latent_dim=cfg.latent_dim))
    opt = torch.optim.Adam(vae.parameters(), lr=cfg.vae_lr, betas=cfg.betas,
                           weight_decay=cfg.weight_decay)
    data = _fg_tensor(masks, cfg.vae_size)
    window = min(cfg.ssim_window, cfg.vae_size // 2 * 2 - 1)
    history = []
    for epoch in range(epochs):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(masks))
        vae.train()
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            recon, mu, logvar = vae(batch)
            loss = vae_loss(batch, recon, mu, logvar, ssim_window=window,
                            kl_weight=cfg.kl_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        row = {"epoch": epoch, "vae_loss": float(np.mean(losses))}
        if val_masks:
            row["val_round_trip_dice"] = vae_round_trip_dice(vae, val_masks)
        history.append(row)
    if log_path:
        _write_rows(log_path, history)
    vae.eval()
    return vae, history


# ---------------------------------------------------------------------------
# registration training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    deform: DeformNet
    discriminator: Discriminator | None
    history: list


def _encode_mu(vae: ShapeVAE, fg_probs: torch.Tensor) -> torch.Tensor:
    size = vae.config.input_size
    if fg_probs.shape[-2:] != size:
        fg_probs = F.interpolate(fg_probs, size=size, mode="bilinear", align_corners=False)
    mu, _ = vae.encode(fg_probs)
    return mu


def evaluate_registration(deform: DeformNet | None, pairs) -> dict:
    """Mean DSC / HD / TU-sqrt / MSE of (possibly identity-) registered pairs."""
    dscs, hds, tus, tus_fixed, tus_moving, mses = [], [], [], [], [], []
    for p in pairs:
        if deform is None:
            warped_img, warped_mask = p.moving_image, p.moving_mask
        else:
            from .networks import deform_forward
            flow = deform_forward(deform, p.fixed_image, p.moving_image)
            from .core import warp_intensity
            warped_img = warp_intensity(p.moving_image, flow)
            warped_mask = warp_mask(p.moving_mask, flow)
        cm = metrics_mod.evaluate_case(p.fixed_image, p.fixed_mask, warped_img, warped_mask)
        dscs.append(cm.dsc_mean)
        if cm.hd_mean is not None:
            hds.append(cm.hd_mean)
        if cm.tu is not None:
            tus.append(cm.tu.tu_sqrt)
        mses.append(cm.mse)
        for source, sink in ((p.fixed_mask, tus_fixed), (p.moving_mask, tus_moving)):
            try:
                sink.append(metrics_mod.thickness_uniformity(source).tu_sqrt)
            except Exception:
                pass
    return {
        "dsc": float(np.mean(dscs)),
        "hd_mm": float(np.mean(hds)) if hds else float("nan"),
        "tu_sqrt_mm": float(np.mean(tus)) if tus else float("nan"),
        "tu_sqrt_fixed_mm": float(np.mean(tus_fixed)) if tus_fixed else float("nan"),
        "tu_sqrt_moving_mm": float(np.mean(tus_moving)) if tus_moving else float("nan"),
        "mse": float(np.mean(mses)),
    }


def foreground_dsc(deform: DeformNet | None, pairs) -> float:
    """Mean Dice over MYO and LV only (no background), identity when deform None."""
    scores = []
    for p in pairs:
        if deform is None:
            warped = p.moving_mask
        else:
            from .networks import deform_forward
            warped = warp_mask(p.moving_mask, deform_forward(deform, p.fixed_image, p.moving_image))
        per_class, _ = metrics_mod.dsc(p.fixed_mask, warped, classes=(1, 2))
        scores.append(np.mean(list(per_class.values())))
    return float(np.mean(scores))


def train_registration(pairs, cfg: TrainConfig, mode: str, vae: ShapeVAE | None = None,
                       scale: int | None = None, epochs: int | None = None,
                       val_pairs=None, checkpoint_dir=None, run_id: str | None = None,
                       deform: DeformNet | None = None,
                       disc: Discriminator | None = None) -> TrainResult:
    """Train the deformation network (and discriminator) at one scale.

    Weights inactive for `mode` are zeroed; a discriminator exists only when
    the adversarial weight is active, and the VAE (required when the latent
    constraint is active) stays frozen throughout.
    """
    if not pairs:
        raise DataError("empty registration training set")
    mode = resolve_mode(mode)
    weights = resolve_weights(mode, cfg.weights)
    scale = scale or cfg.scales[-1]
    epochs = epochs or cfg.epochs
    if weights.lambda_gac > 0 and vae is None:
        raise ConfigError(f"mode {mode!r} needs a pretrained VAE")
    use_masks = weights.lambda_lac > 0 or weights.lambda_gac > 0
    use_disc = weights.lambda_ddc > 0

    torch.manual_seed(cfg.seed + scale)
    deform = deform or DeformNet(DeformNetConfig(channels=cfg.deform_channels))
    if use_disc and disc is None:
        disc = Discriminator(DiscriminatorConfig(input_size=scale))
    if not use_disc:
        disc = None
    if vae is not None:
        vae.eval()
        vae.requires_grad_(False)

    opt_g = torch.optim.Adam(deform.parameters(), lr=cfg.lr, betas=cfg.betas,
                             weight_decay=cfg.weight_decay)
    opt_d = (torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=cfg.betas,
                              weight_decay=cfg.weight_decay) if use_disc else None)

    base_pairs = pairs_at_scale(pairs, scale)
    val_scaled = pairs_at_scale(val_pairs, scale) if val_pairs else None
    if not cfg.augment:
        f_img0, m_img0, f_oh0, m_oh0 = _stack(base_pairs)

    history = []
    for epoch in range(epochs):
        if cfg.augment:
            rng = np.random.default_rng((cfg.seed, scale, epoch, 7))
            f_img0, m_img0, f_oh0, m_oh0 = _stack(
                [_augment_registration_pair(p, rng, cfg.augment_prob) for p in base_pairs])
        order = np.random.default_rng((cfg.seed, scale, epoch)).permutation(len(base_pairs))
        deform.train()
        sums = {"mi": 0.0, "bending": 0.0, "dice": 0.0, "latent_sq": 0.0,
                "g_adv": 0.0, "d_loss": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            f_img, m_img = f_img0[idx], m_img0[idx]
            f_oh, m_oh = f_oh0[idx], m_oh0[idx]

            flow = deform(f_img, m_img).permute(0, 2, 3, 1)  # (N, H, W, 2)
            warped = bilinear_warp(m_img, flow)
            terms = LossTerms(
                mi=mutual_information(f_img[:, 0], warped[:, 0], bins=cfg.mi_bins),
                bending=bending_energy(flow))
            if use_masks:
                warped_fg = warp_probs(m_oh, flow)[:, 1:3]
                fixed_fg = f_oh[:, 1:3]
                if weights.lambda_lac > 0:
                    terms.dice = local_anatomic_similarity(fixed_fg, warped_fg)
                if weights.lambda_gac > 0:
                    with torch.no_grad():
                        z_fixed = _encode_mu(vae, fixed_fg)
                    terms.latent_sq = global_anatomic_similarity(z_fixed, _encode_mu(vae, warped_fg))
            d_loss_val = 0.0
            if use_disc:
                disc.train()
                opt_d.zero_grad()
                _, d_loss = adversarial_losses(disc(f_img), disc(warped.detach()))
                d_loss.backward()
                opt_d.step()
                d_loss_val = float(d_loss.detach())
                terms.g_adv, _ = adversarial_losses(torch.ones(1), disc(warped))
            total = total_objective(terms, weights)
            opt_g.zero_grad()
            total.backward()
            opt_g.step()

            for key, val in (("mi", terms.mi), ("bending", terms.bending),
                             ("dice", terms.dice), ("latent_sq", terms.latent_sq),
                             ("g_adv", terms.g_adv), ("d_loss", d_loss_val),
                             ("total", total)):
                sums[key] += float(val.detach()) if torch.is_tensor(val) else float(val)
            batches += 1

        row = {"epoch": epoch, "scale": scale}
        row.update({k: v / batches for k, v in sums.items()})
        if val_scaled:
            stats = evaluate_registration(deform, val_scaled)
            row.update({"val_dsc": stats["dsc"], "val_hd_mm": stats["hd_mm"],
                        "val_tu_sqrt_mm": stats["tu_sqrt_mm"], "val_mse": stats["mse"]})
        history.append(row)
        if checkpoint_dir and run_id:
            ckpt_dir = Path(checkpoint_dir) / run_id / str(scale)
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckpt_dir / f"{epoch:03d}.ckpt", "deform", deform,
                            extra={"mode": mode, "scale": scale, "epoch": epoch,
                                   "seed": cfg.seed})
            if disc is not None:
                save_checkpoint(ckpt_dir / f"{epoch:03d}.disc.ckpt", "discriminator",
                                disc, extra={"mode": mode, "scale": scale, "epoch": epoch})
    deform.eval()
    if disc is not None:
        disc.eval()
    return TrainResult(deform=deform, discriminator=disc, history=history)


def transfer_discriminator(old: Discriminator, scale: int) -> Discriminator:
    """Rebuild the discriminator for a new input size, keeping conv weights.

    The convolutional stages are resolution-independent and transfer exactly;
    the flattened MLP head depends on the input size and is re-initialized.
    """
    new = Discriminator(DiscriminatorConfig(
        input_size=scale, channels=old.config.channels,
        dropout=old.config.dropout, leaky_slope=old.config.leaky_slope))
    state = new.state_dict()
    for key, value in old.state_dict().items():
        if key.startswith("stages") and state[key].shape == value.shape:
            state[key] = value
    new.load_state_dict(state)
    return new


def multiscale_train(pairs, cfg: TrainConfig, mode: str, vae: ShapeVAE | None = None,
                     val_pairs=None, checkpoint_dir=None,
                     run_id: str | None = None) -> TrainResult:
    """Coarse-to-fine curriculum over cfg.scales.

    The fully convolutional deformation net transfers exactly between scales;
    the discriminator's MLP head is rebuilt per scale. The epoch budget is
    split equally across scales.
    """
    epochs_per_scale = max(1, cfg.epochs // len(cfg.scales))
    deform, disc = None, None
    history = []
    for scale in cfg.scales:
        if disc is not None:
            disc = transfer_discriminator(disc, scale)
        result = train_registration(
            pairs, cfg, mode, vae=vae, scale=scale, epochs=epochs_per_scale,
            val_pairs=val_pairs, checkpoint_dir=checkpoint_dir, run_id=run_id,
            deform=deform, disc=disc)
        deform, disc = result.deform, result.discriminator
        history.extend(result.history)
    return TrainResult(deform=deform, discriminator=disc, history=history)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_ROWS = [
    ("VanDLIR", "van", False),
    ("VoxelMorph-like", "vm", False),
    ("AC-DLIR", "ac", False),
    ("DdC-DLIR", "ddc", False),
    ("DdC-AC-DLIR", "ddc-ac", False),
    ("MS-DdC-AC-DLIR", "ddc-ac", True),
]


def run_ablation(train_pairs, val_pairs, cfg: TrainConfig, vae: ShapeVAE | None = None):
    """Train every model configuration and tabulate held-out metrics.

    Returns rows shaped like the model-comparison table: one per configuration
    plus a no-registration reference, each with DSC / HD / TU-sqrt / MSE and
    the training time.
    """
    val_at_scale = pairs_at_scale(val_pairs, cfg.scales[-1])
    rows = []
    base = evaluate_registration(None, val_at_scale)
    rows.append({"configuration": "no-registration", "mode": "-", "multiscale": "-",
                 "seconds": 0.0, **{k: base[k] for k in ("dsc", "hd_mm", "tu_sqrt_mm", "mse")}})
    for label, mode, multiscale in ABLATION_ROWS:
        started = time.perf_counter()
        if multiscale:
            result = multiscale_train(train_pairs, cfg, mode, vae=vae)
        else:
            result = train_registration(train_pairs, cfg, mode, vae=vae)
        stats = evaluate_registration(result.deform, val_at_scale)
        rows.append({"configuration": label, "mode": mode,
                     "multiscale": "yes" if multiscale else "no",
                     "seconds": round(time.perf_counter() - started, 2),
                     **{k: stats[k] for k in ("dsc", "hd_mm", "tu_sqrt_mm", "mse")}})
    return rows


def _write_rows(path, rows):
    if not rows:
        return
    keys = []
    for row in rows:
        for key in row:
            if key not in keys:
                keys.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def write_history(path, rows):
    _write_rows(path, rows)
