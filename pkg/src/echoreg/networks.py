"""The three parametric models: deformation net, shape VAE, discriminator.

Checkpoints embed a hash of the builder config so a saved parameter archive
can never be silently loaded into a differently shaped network.
"""

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .core import DisplacementField, Image2D
from .errors import CheckpointError, ConfigError, ShapeMismatchError

CHECKPOINT_VERSION = 1


def _pair(size):
    if isinstance(size, (tuple, list)):
        return int(size[0]), int(size[1])
    return int(size), int(size)


# ---------------------------------------------------------------------------
# deformation network
# ---------------------------------------------------------------------------

@dataclass
class DeformNetConfig:
    """U-shaped encoder-decoder producing a dense 2-channel flow."""

    channels: tuple = (16, 32, 64, 128)
    in_channels: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 3:
            raise ConfigError("deformation net needs at least 3 levels")

    @property
    def levels(self):
        return len(self.channels)

    @property
    def min_size(self):
        return 2 ** (self.levels - 1)


class _ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class DeformNet(nn.Module):
    """Predicts a (N, 2, H, W) displacement field from a fixed/moving pair.

    The final convolution is zero-initialized so an untrained network outputs
    the identity transform.
    """

    def __init__(self, config: DeformNetConfig | None = None):
        super().__init__()
        self.config = config or DeformNetConfig()
        ch = self.config.channels
        self.stem = _ConvBlock(self.config.in_channels, ch[0])
        self.down = nn.ModuleList()
        self.enc = nn.ModuleList()
        for i in range(1, len(ch)):
            self.down.append(nn.Conv2d(ch[i - 1], ch[i], 3, stride=2, padding=1))
            self.enc.append(_ConvBlock(ch[i], ch[i]))
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(len(ch) - 2, -1, -1):
            self.up.append(nn.Conv2d(ch[i + 1], ch[i], 3, padding=1))
            self.dec.append(_ConvBlock(2 * ch[i], ch[i]))
        self.head = nn.Conv2d(ch[0], 2, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, fixed: torch.Tensor, moving: torch.Tensor) -> torch.Tensor:
        if fixed.shape != moving.shape:
            raise ShapeMismatchError(
                f"fixed {tuple(fixed.shape)} and moving {tuple(moving.shape)} differ")
        h, w = fixed.shape[-2:]
        m = self.config.min_size
        if h % m or w % m:
            raise ShapeMismatchError(
                f"input size {h}x{w} not divisible by {m} for {self.config.levels} levels")
        x = torch.cat([fixed, moving], dim=1)
        skips = [self.stem(x)]
        for down, enc in zip(self.down, self.enc):
            skips.append(enc(down(skips[-1])))
        x = skips.pop()
        for up, dec in zip(self.up, self.dec):
            x = nn.functional.interpolate(x, scale_factor=2.0, mode="nearest")
            x = up(x)
            x = dec(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)


def deform_forward(net: DeformNet, fixed: Image2D, moving: Image2D) -> DisplacementField:
    """Run the deformation net on an image pair (eval mode, no grad)."""
    if fixed.shape != moving.shape:
        raise ShapeMismatchError("fixed and moving image shapes differ")
    net.eval()
    with torch.no_grad():
        f = torch.as_tensor(fixed.pixels, dtype=torch.float32)[None, None]
        m = torch.as_tensor(moving.pixels, dtype=torch.float32)[None, None]
        flow = net(f, m)[0]  # (2, H, W) as (dy, dx)
    return DisplacementField(np.moveaxis(flow.numpy(), 0, -1))


# ---------------------------------------------------------------------------
# shape VAE
# ---------------------------------------------------------------------------

@dataclass
class VAEConfig:
    """Convolutional VAE over 2-channel (MYO, LV) mask probability maps."""

    input_size: object = 64
    latent_dim: int = 64
    in_channels: int = 2

    def __post_init__(self):
        h, w = _pair(self.input_size)
        if h % 8 or w % 8:
            raise ConfigError(f"VAE input size {h}x{w} must be divisible by 8")
        self.input_size = (h, w)
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")


class ShapeVAE(nn.Module):
    """Encodes mask topology to a d-dimensional latent and decodes it back.

    The registration-time shape code for a mask is the posterior mean; the
    sampled latent is used only while pretraining.
    """

    def __init__(self, config: VAEConfig | None = None):
        super().__init__()
        self.config = config or VAEConfig()
        h, w = self.config.input_size
        d = self.config.latent_dim
        self.feat_shape = (32, h // 8, w // 8)
        flat = 32 * (h // 8) * (w // 8)
        self.enc_conv = nn.Sequential(
            nn.Conv2d(self.config.in_channels, 8, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.BatchNorm2d(16), nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.enc_fc = nn.Sequential(
            nn.Linear(flat, 128), nn.ReLU(inplace=True),
            nn.Linear(128, 128), nn.ReLU(inplace=True),
        )
        self.fc_mu = nn.Linear(128, d)
        self.fc_logvar = nn.Linear(128, d)
        self.dec_fc = nn.Sequential(
            nn.Linear(d, 128), nn.ReLU(inplace=True),
            nn.Linear(128, flat), nn.ReLU(inplace=True),
        )
        self.dec_conv = nn.Sequential(
            nn.ConvTranspose2d(32, 16, 3, stride=2, padding=1, output_padding=1),
            nn.BatchNorm2d(16), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(16, 8, 3, stride=2, padding=1, output_padding=1),
            nn.BatchNorm2d(8), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(8, self.config.in_channels, 3, stride=2, padding=1,
                               output_padding=1),
            nn.Sigmoid(),
        )

    def _check_input(self, x):
        h, w = self.config.input_size
        if x.shape[1] != self.config.in_channels or x.shape[-2:] != (h, w):
            raise ShapeMismatchError(
                f"VAE expects (N, {self.config.in_channels}, {h}, {w}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor):
        self._check_input(x)
        h = self.enc_conv(x).flatten(1)
        h = self.enc_fc(h)
        return self.fc_mu(h), self.fc_logvar(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.config.latent_dim:
            raise ShapeMismatchError(
                f"latent dim {z.shape[-1]} != configured {self.config.latent_dim}")
        h = self.dec_fc(z)
        return self.dec_conv(h.view(-1, *self.feat_shape))

    def forward(self, x: torch.Tensor):
        mu, logvar = self.encode(x)
        if self.training:
            z = mu + torch.randn_like(mu) * torch.exp(0.5 * logvar)
        else:
            z = mu
        return self.decode(z), mu, logvar


def vae_encode(vae: ShapeVAE, fg_probs: np.ndarray):
    """Posterior (mu, logvar) for a (2, H, W) foreground probmap array."""
    vae.eval()
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(fg_probs), dtype=torch.float32)[None]
        mu, logvar = vae.encode(x)
    return mu[0].numpy(), logvar[0].numpy()


def vae_decode(vae: ShapeVAE, z: np.ndarray) -> np.ndarray:
    """Decode a latent vector to a (2, H, W) sigmoid-bounded reconstruction."""
    vae.eval()
    with torch.no_grad():
        out = vae.decode(torch.as_tensor(np.asarray(z), dtype=torch.float32)[None])
    return out[0].numpy()


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

@dataclass
class DiscriminatorConfig:
    """Residual image classifier scoring how 'fixed-like' an image looks."""

    input_size: object = 64
    channels: tuple = (8, 16, 32, 64)
    dropout: float = 0.1
    leaky_slope: float = 0.01

    def __post_init__(self):
        h, w = _pair(self.input_size)
        stride = 2 ** len(self.channels)
        if h % stride or w % stride:
            raise ConfigError(f"discriminator input {h}x{w} must be divisible by {stride}")
        self.input_size = (h, w)
        self.channels = tuple(int(c) for c in self.channels)


class _ResStage(nn.Module):
    """Stride-2 residual block: projection shortcut + two IN/dropout/LReLU convs."""

    def __init__(self, cin, cout, dropout, slope):
        super().__init__()
        self.shortcut = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.branch = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1),
            nn.InstanceNorm2d(cout, affine=False),
            nn.Dropout2d(dropout),
            nn.LeakyReLU(slope, inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.InstanceNorm2d(cout, affine=False),
            nn.Dropout2d(dropout),
            nn.LeakyReLU(slope, inplace=True),
        )

    def forward(self, x):
        return self.shortcut(x) + self.branch(x)


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        ch = (1,) + self.config.channels
        self.stages = nn.Sequential(*[
            _ResStage(ch[i], ch[i + 1], self.config.dropout, self.config.leaky_slope)
            for i in range(len(ch) - 1)
        ])
        h, w = self.config.input_size
        stride = 2 ** len(self.config.channels)
        flat = self.config.channels[-1] * (h // stride) * (w // stride)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, 1024), nn.LeakyReLU(self.config.leaky_slope, inplace=True),
            nn.Linear(1024, 256), nn.LeakyReLU(self.config.leaky_slope, inplace=True),
            nn.Linear(256, 1), nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = self.config.input_size
        if x.shape[-2:] != (h, w):
            raise ShapeMismatchError(f"discriminator expects {h}x{w} input, got {tuple(x.shape[-2:])}")
        return self.head(self.stages(x))


def discriminate(disc: Discriminator, image: Image2D) -> float:
    """Probability that an image is a fixed (undeformed) frame (eval mode)."""
    disc.eval()
    with torch.no_grad():
        x = torch.as_tensor(image.pixels, dtype=torch.float32)[None, None]
        return float(disc(x)[0, 0])


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------

_BUILDERS = {
    "deform": (DeformNetConfig, DeformNet),
    "vae": (VAEConfig, ShapeVAE),
    "discriminator": (DiscriminatorConfig, Discriminator),
}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _config_dict(model) -> dict:
    return json.loads(json.dumps(asdict(model.config), default=list))


def save_checkpoint(path, kind: str, model: nn.Module, extra: dict | None = None):
    """Write a versioned parameter archive with an embedded config hash."""
    if kind not in _BUILDERS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    config = _config_dict(model)
    record = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(record, path)


def load_checkpoint(path, kind: str, config: dict | None = None) -> dict:
    """Load and validate a checkpoint record; optionally pin the exact config."""
    try:
        record = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except Exception as exc:  # unreadable / wrong format
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}")
    if not isinstance(record, dict) or record.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    if record.get("kind") != kind:
        raise CheckpointError(f"checkpoint kind {record.get('kind')!r} != expected {kind!r}")
    if config_hash(record["config"]) != record["config_hash"]:
        raise CheckpointError(f"checkpoint {path} config hash does not match its config")
    if config is not None and config_hash(config) != record["config_hash"]:
        raise CheckpointError(
            f"checkpoint {path} was saved with a different {kind} config")
    return record


def model_from_checkpoint(path, kind: str) -> tuple[nn.Module, dict]:
    """Rebuild the network stored at `path` and load its parameters."""
    record = load_checkpoint(path, kind)
    config_cls, model_cls = _BUILDERS[kind]
    cfg = record["config"].copy()
    for key in ("channels", "input_size"):
        if isinstance(cfg.get(key), list):
            cfg[key] = tuple(cfg[key])
    model = model_cls(config_cls(**cfg))
    model.load_state_dict(record["state"])
    model.eval()
    return model, record
