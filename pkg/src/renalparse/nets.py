"""Encoder-decoder segmentation networks with addressable mixing points.

Both architectures expose ``forward_to(x, k)`` / ``forward_from(hidden, k)``.
Mixing point 0 is the input and point j (1..depth) is the output of encoder
stage j. The hidden state at point k is the tuple of every tensor the rest
of the network still needs: ``(x,)`` at k=0, and the stage outputs
``(s_1, ..., s_k)`` (the skip features) for k >= 1. Mixing a hidden state
mixes every tensor in the tuple with the same weight.

U-Net layer list (w_j = base * 2**j, j = 0..depth-1; w_depth = 2 * w_{depth-1}),
each ``Block(c_in, c_out)`` being conv3x3x3 (no bias) + InstanceNorm(affine)
+ LeakyReLU(0.01)::

    stage 0:        Block(in, w_0), Block(w_0, w_0)
    stage j >= 1:   Block(w_{j-1}, w_j, stride 2), Block(w_j, w_j)
    bottleneck:     Block(w_{depth-1}, w_depth, stride 2), Block(w_depth, w_depth)
    up j:           ConvTranspose 2x2x2 stride 2 (no bias), w_{j+1} -> w_j
    decoder j:      Block(2 w_j, w_j), Block(w_j, w_j)
    head:           conv1x1x1 w_0 -> n_classes, with bias
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

ARCHS = ("unet3d", "segresnet")
LATENT_CHANNELS = 4


@dataclass
class NetConfig:
    arch: str = "unet3d"
    in_channels: int = 1
    n_classes: int = 5
    base_channels: int = 8
    depth: int = 3
    vae_branch: bool = True
    vae_weight: float = 0.1

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 2:
            raise ValueError("base_channels must be >= 2")
        if self.vae_weight < 0:
            raise ValueError("vae_weight must be >= 0")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**j for j in range(self.depth))

    def to_dict(self) -> dict:
        return asdict(self)


class NetOutput(NamedTuple):
    logits: torch.Tensor
    recon: torch.Tensor | None = None
    mu: torch.Tensor | None = None
    logvar: torch.Tensor | None = None


class ShapeError(ValueError):
    pass


def conv_block(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.InstanceNorm3d(c_out, affine=True),
        nn.LeakyReLU(0.01),
    )


class _MixableNet(nn.Module):
    """Shared mixing-point plumbing; subclasses implement ``_encode_stage`` and ``_finish``."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.widths = cfg.widths

    @property
    def mixing_points(self) -> tuple[int, ...]:
        return tuple(range(self.cfg.depth + 1))

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected input (B, {self.cfg.in_channels}, X, Y, Z), got {tuple(x.shape)}"
            )
        div = 2**self.cfg.depth
        for axis, n in enumerate(x.shape[2:]):
            if n % div:
                raise ShapeError(f"axis {axis} not divisible by {div} (size {n})")

    def _expected_shapes(self, k, batch, spatial):
        if k == 0:
            return [(batch, self.cfg.in_channels, *spatial)]
        return [
            (batch, self.widths[j], *(n // 2**j for n in spatial)) for j in range(k)
        ]

    def check_hidden(self, hidden, k) -> None:
        if k not in self.mixing_points:
            raise ShapeError(f"mixing point {k} not in {self.mixing_points}")
        if not isinstance(hidden, (tuple, list)) or len(hidden) != max(k, 1) or not hidden:
            raise ShapeError(f"shape mismatch at mixing point {k}: expected {max(k, 1)} tensors")
        first = hidden[0]
        if first.ndim != 5:
            raise ShapeError(f"shape mismatch at mixing point {k}: got {tuple(first.shape)}")
        spatial = tuple(first.shape[2:])
        if k == 0:
            self.check_input(first)
        expected = self._expected_shapes(k, first.shape[0], spatial)
        got = [tuple(h.shape) for h in hidden]
        if got != expected:
            raise ShapeError(f"shape mismatch at mixing point {k}: expected {expected}, got {got}")
        if k > 0 and any(n % 2**self.cfg.depth for n in spatial):
            raise ShapeError(f"shape mismatch at mixing point {k}: spatial {spatial} not divisible")

    def forward_to(self, x: torch.Tensor, k: int):
        """Run the encoder up to mixing point ``k``; return the hidden tuple."""
        self.check_input(x)
        if k not in self.mixing_points:
            raise ShapeError(f"mixing point {k} not in {self.mixing_points}")
        if k == 0:
            return (x,)
        skips = []
        h = x
        for j in range(k):
            h = self._encode_stage(j, h)
            skips.append(h)
        return tuple(skips)

    def forward_from(self, hidden, k: int) -> NetOutput:
        """Complete the forward pass from mixing point ``k``."""
        self.check_hidden(hidden, k)
        skips = [] if k == 0 else list(hidden)
        h = hidden[-1]
        for j in range(k, self.cfg.depth):
            h = self._encode_stage(j, h)
            skips.append(h)
        return self._finish(skips)

    def forward(self, x: torch.Tensor) -> NetOutput:
        return self.forward_from(self.forward_to(x, 0), 0)


class UNet3D(_MixableNet):
    def __init__(self, cfg: NetConfig):
        super().__init__(cfg)
        w = self.widths
        wb = 2 * w[-1]
        self.stages = nn.ModuleList()
        for j, c in enumerate(w):
            c_in = cfg.in_channels if j == 0 else w[j - 1]
            self.stages.append(nn.Sequential(conv_block(c_in, c, 1 if j == 0 else 2), conv_block(c, c)))
        self.bottleneck = nn.Sequential(conv_block(w[-1], wb, 2), conv_block(wb, wb))
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for j, c in enumerate(w):
            c_up = wb if j == len(w) - 1 else w[j + 1]
            self.ups.append(nn.ConvTranspose3d(c_up, c, 2, stride=2, bias=False))
            self.decoders.append(nn.Sequential(conv_block(2 * c, c), conv_block(c, c)))
        self.head = nn.Conv3d(w[0], cfg.n_classes, 1)

    def _encode_stage(self, j, h):
        return self.stages[j](h)

    def _finish(self, skips):
        h = self.bottleneck(skips[-1])
        for j in reversed(range(self.cfg.depth)):
            h = self.decoders[j](torch.cat([self.ups[j](h), skips[j]], dim=1))
        return NetOutput(self.head(h))


class ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(
            nn.InstanceNorm3d(c, affine=True),
            nn.LeakyReLU(0.01),
            nn.Conv3d(c, c, 3, padding=1, bias=False),
            nn.InstanceNorm3d(c, affine=True),
            nn.LeakyReLU(0.01),
            nn.Conv3d(c, c, 3, padding=1, bias=False),
        )

    def forward(self, x):
        return x + self.body(x)


class _UpLevel(nn.Module):
    """1x1 conv to the target width, trilinear x2 upsampling, optional skip add, residual block."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.reduce = nn.Conv3d(c_in, c_out, 1, bias=False)
        self.block = ResBlock(c_out)

    def forward(self, h, skip=None):
        h = F.interpolate(self.reduce(h), scale_factor=2, mode="trilinear", align_corners=False)
        if skip is not None:
            h = h + skip
        return self.block(h)


class SegResNet(_MixableNet):
    """Residual encoder, lightweight additive-skip decoder, optional VAE regularizer.

    The VAE branch maps the bottleneck to a latent Gaussian (``mu``, ``logvar``
    per voxel, fully convolutional so any divisible input size works), samples
    it in training mode (uses ``mu`` in eval mode), and decodes back to an
    image-sized reconstruction.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__(cfg)
        w = self.widths
        wb = 2 * w[-1]
        self.stages = nn.ModuleList()
        for j, c in enumerate(w):
            if j == 0:
                entry = nn.Conv3d(cfg.in_channels, c, 3, padding=1, bias=False)
            else:
                entry = nn.Conv3d(w[j - 1], c, 3, stride=2, padding=1, bias=False)
            self.stages.append(nn.Sequential(entry, ResBlock(c)))
        self.bottleneck = nn.Sequential(
            nn.Conv3d(w[-1], wb, 3, stride=2, padding=1, bias=False), ResBlock(wb)
        )
        self.up = nn.ModuleList(
            _UpLevel(wb if j == len(w) - 1 else w[j + 1], c) for j, c in enumerate(w)
        )
        self.head = nn.Sequential(
            nn.InstanceNorm3d(w[0], affine=True), nn.LeakyReLU(0.01), nn.Conv3d(w[0], cfg.n_classes, 1)
        )
        self.use_vae = cfg.vae_branch
        if cfg.vae_branch:
            self.vae_encode = nn.Sequential(
                nn.InstanceNorm3d(wb, affine=True),
                nn.LeakyReLU(0.01),
                nn.Conv3d(wb, 2 * LATENT_CHANNELS, 1),
            )
            self.vae_expand = nn.Conv3d(LATENT_CHANNELS, wb, 1, bias=False)
            self.vae_up = nn.ModuleList(
                _UpLevel(wb if j == len(w) - 1 else w[j + 1], c) for j, c in enumerate(w)
            )
            self.vae_out = nn.Conv3d(w[0], cfg.in_channels, 1)
        else:
            self.vae_encode = None

    def _encode_stage(self, j, h):
        return self.stages[j](h)

    def _finish(self, skips):
        b = self.bottleneck(skips[-1])
        h = b
        for j in reversed(range(self.cfg.depth)):
            h = self.up[j](h, skips[j])
        logits = self.head(h)
        if not (self.use_vae and self.vae_encode is not None):
            return NetOutput(logits)
        stats = self.vae_encode(b)
        mu, logvar = stats[:, :LATENT_CHANNELS], stats[:, LATENT_CHANNELS:].clamp(-10.0, 10.0)
        z = mu + torch.exp(0.5 * logvar) * torch.randn_like(mu) if self.training else mu
        r = self.vae_expand(z)
        for j in reversed(range(self.cfg.depth)):
            r = self.vae_up[j](r)
        return NetOutput(logits, self.vae_out(r), mu, logvar)


def vae_penalty(out: NetOutput, target: torch.Tensor) -> torch.Tensor:
    """Reconstruction MSE plus the mean KL divergence of the latent from N(0, 1)."""
    mse = F.mse_loss(out.recon, target)
    kl = 0.5 * torch.mean(out.mu**2 + torch.exp(out.logvar) - out.logvar - 1.0)
    return mse + kl


def build(cfg: NetConfig, seed: int = 0) -> _MixableNet:
    """Instantiate the configured network with parameters drawn from ``seed``."""
    cls = {"unet3d": UNet3D, "segresnet": SegResNet}[cfg.arch]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = cls(cfg)
    return net


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def mix_hidden(hidden, lam: float, pairing) -> tuple:
    """``lam * h + (1 - lam) * h[pairing]`` for every tensor of a hidden state."""
    idx = torch.as_tensor(pairing, dtype=torch.long)
    return tuple(lam * h + (1.0 - lam) * h[idx] for h in hidden)


CHECKPOINT_FORMAT = "renalparse.checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: _MixableNet, meta: dict | None = None) -> None:
    """Checkpoint = {format, version, net_config, state_dict, meta} via ``torch.save``."""
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "net_config": net.cfg.to_dict(),
            "state_dict": net.state_dict(),
            "meta": dict(meta or {}),
        },
        path,
    )


def load_checkpoint(path) -> tuple[_MixableNet, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a renalparse checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
    net = build(NetConfig(**ckpt["net_config"]))
    net.load_state_dict(ckpt["state_dict"])
    net.eval()
    return net, ckpt["meta"]
