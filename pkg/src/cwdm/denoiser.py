"""Time-conditioned 3D U-Net predicting clean target wavelet coefficients."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class DenoiserConfigError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    base_channels: int = 64
    skip_mode: str = "concatenation"
    in_channels: int = 32
    out_channels: int = 8
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    num_res_blocks: int = 1
    time_embedding_dim: int | None = None
    attention_levels: tuple[int, ...] = ()
    norm_groups: int = 8
    timesteps: int = 1000

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)

    @property
    def depth_levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def embedding_dim(self) -> int:
        return self.time_embedding_dim or 4 * self.base_channels

    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def validate(self) -> "DenoiserConfig":
        if self.base_channels <= 0:
            raise DenoiserConfigError(f"base_channels must be positive, got {self.base_channels}")
        if self.skip_mode not in ("additive", "concatenation"):
            raise DenoiserConfigError(f"skip_mode must be 'additive' or 'concatenation', got {self.skip_mode!r}")
        if self.out_channels != 8:
            raise DenoiserConfigError("out_channels must be 8 (one volume's subbands)")
        if self.in_channels < 16 or self.in_channels % 8:
            raise DenoiserConfigError(
                f"in_channels must be 8 * (1 + n_conditions) with n_conditions >= 1, got {self.in_channels}"
            )
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise DenoiserConfigError("channel_multipliers must be a non-empty list of positive ints")
        if self.num_res_blocks < 1:
            raise DenoiserConfigError("num_res_blocks must be >= 1")
        for w in self.widths():
            if w % self.norm_groups:
                raise DenoiserConfigError(f"feature width {w} not divisible by norm_groups={self.norm_groups}")
        bad = [a for a in self.attention_levels if not 0 <= a < self.depth_levels]
        if bad:
            raise DenoiserConfigError(f"attention_levels {bad} outside 0..{self.depth_levels - 1}")
        if self.timesteps < 1:
            raise DenoiserConfigError("timesteps must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = list(self.attention_levels)
        return d


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    """Sinusoidal features of ``t / T`` (scaled to the usual 0..1000 range)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.to(torch.float64) / T * 1000.0)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.shortcut = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.shortcut(x) + h


class Attention(nn.Module):
    def __init__(self, ch: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.qkv = nn.Conv3d(ch, 3 * ch, 1)
        self.proj = nn.Conv3d(ch, ch, 1)

    def forward(self, x, emb=None):
        b, c, *spatial = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, -1).unbind(1)
        w = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        h = torch.einsum("bij,bcj->bci", w, v).reshape(b, c, *spatial)
        return x + self.proj(h)


class Level(nn.Module):
    def __init__(self, in_ch, out_ch, cfg: DenoiserConfig, attention: bool):
        super().__init__()
        blocks = []
        for i in range(cfg.num_res_blocks):
            blocks.append(ResBlock(in_ch if i == 0 else out_ch, out_ch, cfg.embedding_dim, cfg.norm_groups))
            if attention:
                blocks.append(Attention(out_ch, cfg.norm_groups))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x, emb):
        for block in self.blocks:
            x = block(x, emb)
        return x


class UNet3D(nn.Module):
    """Encoder/decoder with one resolution level per channel multiplier.

    With ``skip_mode='concatenation'`` each decoder level sees its upsampled
    input concatenated with the matching encoder output; with ``'additive'``
    the two are summed, which requires equal widths (guaranteed here since a
    decoder level is built at the width of its encoder partner).
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        cfg = self.config = config.validate()
        widths = cfg.widths()
        emb_dim = cfg.embedding_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.stem = nn.Conv3d(cfg.in_channels, widths[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = widths[0]
        for i, w in enumerate(widths):
            self.down.append(Level(ch, w, cfg, i in cfg.attention_levels))
            ch = w
            if i < len(widths) - 1:
                self.downsample.append(nn.Conv3d(w, w, 3, stride=2, padding=1))
        self.middle = Level(ch, ch, cfg, attention=False)

        self.upsample = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            if i < len(widths) - 1:
                self.upsample.append(nn.Conv3d(ch, w, 3, padding=1))
                ch = w
            in_ch = ch + w if cfg.skip_mode == "concatenation" else ch
            if cfg.skip_mode == "additive" and ch != w:
                raise DenoiserConfigError(f"additive skip needs equal widths, got decoder {ch} vs encoder {w}")
            self.up.append(Level(in_ch, w, cfg, i in cfg.attention_levels))
            ch = w
        self.out_norm = nn.GroupNorm(cfg.norm_groups, ch)
        self.out = nn.Conv3d(ch, cfg.out_channels, 3, padding=1)

    @property
    def divisor(self) -> int:
        return 2 ** (self.config.depth_levels - 1)

    def forward(self, x, t):
        cfg = self.config
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        bad = [n for n in x.shape[2:] if n % self.divisor]
        if bad:
            raise ValueError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {self.divisor} "
                f"(2^(depth_levels-1) with depth_levels={cfg.depth_levels})"
            )
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and x.shape[0] > 1:
            t = t.expand(x.shape[0])
        emb = self.time_mlp(timestep_embedding(t, cfg.base_channels, cfg.timesteps).to(x.dtype))

        h = self.stem(x)
        skips = []
        for i, level in enumerate(self.down):
            h = level(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.middle(h, emb)
        for j, level in enumerate(self.up):
            if j > 0:
                h = self.upsample[j - 1](F.interpolate(h, scale_factor=2, mode="nearest"))
            skip = skips.pop()
            h = torch.cat([h, skip], dim=1) if cfg.skip_mode == "concatenation" else h + skip
            h = level(h, emb)
        return self.out(F.silu(self.out_norm(h)))


def build_denoiser(config: DenoiserConfig, seed: int = 0) -> UNet3D:
    """Construct the network with weights drawn from a private RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet3D(config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_checksum(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@torch.no_grad()
def denoise(model: nn.Module, X_t: torch.Tensor, t: int) -> torch.Tensor:
    """Predict x0 for a single unbatched ``(C, d, h, w)`` stack or a batch."""
    batched = X_t.ndim == 5
    x = X_t if batched else X_t[None]
    out = model(x, torch.full((x.shape[0],), int(t)))
    return out if batched else out[0]
