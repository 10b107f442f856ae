"""Hybrid 3D segmentation network: residual conv encoder, transformer bridge,
skip-connected decoder, softmax head over 32 classes.

Input is a single-channel 96^3 patch. Four encoder stages of
(residual block, 2x max pool) shrink it to a 6^3 bottleneck; the 216
bottleneck positions are linearly projected to tokens, offset by a learned
positional embedding, run through a pre-norm transformer, and reshaped back
for a transposed-conv decoder with concatenated encoder skips.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ChannelMismatch, CheckpointMismatch, SkipShapeMismatch
from .labels import NUM_CLASSES, LabelTable

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = NUM_CLASSES
    patch_size: int = 96
    encoder_stages: int = 4
    base_width: int = 16
    width_multiplier: int = 2
    norm_groups: int = 8
    token_embed_dim: int = 512
    transformer_layers: int = 8
    transformer_heads: int = 16
    mlp_dim: int | None = None  # defaults to 4 x token_embed_dim
    dropout: float = 0.0
    head_kernel: int = 1  # final conv before softmax; 1 or 3

    def __post_init__(self):
        if self.mlp_dim is None:
            self.mlp_dim = 4 * self.token_embed_dim
        if self.token_embed_dim % self.transformer_heads != 0:
            raise ValueError("token_embed_dim must be divisible by transformer_heads")
        if self.base_width % self.norm_groups != 0:
            raise ValueError("base_width must be divisible by norm_groups")
        if self.patch_size % (2 ** self.encoder_stages) != 0:
            raise ValueError("patch_size must be divisible by 2^encoder_stages")
        if self.head_kernel not in (1, 3):
            raise ValueError("head_kernel must be 1 or 3")

    @property
    def stage_widths(self) -> list[int]:
        return [self.base_width * self.width_multiplier**i for i in range(self.encoder_stages)]

    @property
    def bottleneck_side(self) -> int:
        return self.patch_size // (2 ** self.encoder_stages)

    @property
    def num_tokens(self) -> int:
        # token count is tied to the bottleneck tiling so the decoder reshape is lossless
        return self.bottleneck_side**3

    @classmethod
    def reduced(cls) -> "ModelConfig":
        """Small configuration for CPU-scale tests and demos."""
        return cls(base_width=4, norm_groups=4, token_embed_dim=64,
                   transformer_layers=2, transformer_heads=4)


class ResidualBlock3d(nn.Module):
    """Two Conv3d(3)-GroupNorm-ReLU units with a skip added before the last ReLU."""

    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, padding=1)
        self.gn1 = nn.GroupNorm(groups, out_channels)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1)
        self.gn2 = nn.GroupNorm(groups, out_channels)
        self.proj = None
        if in_channels != out_channels:
            self.proj = nn.Conv3d(in_channels, out_channels, 1)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ChannelMismatch(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        h = F.relu(self.gn1(self.conv1(x)))
        h = self.gn2(self.conv2(h))
        skip = self.proj(x) if self.proj is not None else x
        return F.relu(h + skip)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.stage_widths
        ins = [cfg.in_channels] + widths[:-1]
        self.blocks = nn.ModuleList(
            ResidualBlock3d(i, w, cfg.norm_groups) for i, w in zip(ins, widths)
        )
        self.pool = nn.MaxPool3d(2)

    def forward(self, x):
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)  # pre-pool feature map
            x = self.pool(x)
        return x, skips


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, return_weights: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # (b, heads, n, head_dim) each
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        weights = scores.softmax(dim=-1)
        ctx = self.drop(weights) @ v
        ctx = ctx.transpose(1, 2).reshape(b, n, d)
        out = self.drop(self.out(ctx))
        if return_weights:
            return out, weights
        return out


class TransformerLayer(nn.Module):
    """Pre-norm encoder layer: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_dim), nn.GELU(), nn.Dropout(dropout),
            nn.Linear(mlp_dim, dim), nn.Dropout(dropout),
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TokenBridge(nn.Module):
    """Bottleneck -> token sequence -> transformer -> bottleneck."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        width = cfg.stage_widths[-1]
        self.side = cfg.bottleneck_side
        self.project_in = nn.Linear(width, cfg.token_embed_dim)
        # zero init keeps tokenize() equal to the pure projection at start
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.token_embed_dim))
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.token_embed_dim, cfg.transformer_heads, cfg.mlp_dim, cfg.dropout)
            for _ in range(cfg.transformer_layers)
        )
        self.ln_out = nn.LayerNorm(cfg.token_embed_dim)
        self.project_out = nn.Linear(cfg.token_embed_dim, width)

    def tokenize(self, bottleneck):
        """Flatten positions lexicographically, project, add positional embedding."""
        b, c, *_ = bottleneck.shape
        tokens = bottleneck.flatten(2).transpose(1, 2)  # (b, positions, channels)
        return self.project_in(tokens) + self.pos_embed

    def transform(self, tokens):
        for layer in self.layers:
            tokens = layer(tokens)
        return self.ln_out(tokens)

    def untokenize(self, tokens):
        b, n, _ = tokens.shape
        feat = self.project_out(tokens).transpose(1, 2)
        return feat.reshape(b, -1, self.side, self.side, self.side)

    def forward(self, bottleneck):
        return self.untokenize(self.transform(self.tokenize(bottleneck)))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.stage_widths
        ups, blocks = [], []
        cur = widths[-1]
        for w in reversed(widths):
            ups.append(nn.ConvTranspose3d(cur, w, 2, stride=2))
            blocks.append(ResidualBlock3d(2 * w, w, cfg.norm_groups))
            cur = w
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x, skips):
        if len(skips) != len(self.ups):
            raise SkipShapeMismatch(f"expected {len(self.ups)} skips, got {len(skips)}")
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = up(x)
            if x.shape[2:] != skip.shape[2:]:
                raise SkipShapeMismatch(
                    f"skip spatial dims {tuple(skip.shape[2:])} != upsampled {tuple(x.shape[2:])}"
                )
            x = block(torch.cat([x, skip], dim=1))
        return x


class HybridSegNet3d(nn.Module):
    """Encoder + transformer bridge + decoder + softmax classification head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.bridge = TokenBridge(cfg)
        self.decoder = Decoder(cfg)
        pad = cfg.head_kernel // 2
        self.head = nn.Conv3d(cfg.base_width, cfg.num_classes, cfg.head_kernel, padding=pad)

    def forward(self, x):
        bottleneck, skips = self.encoder(x)
        bridged = self.bridge(bottleneck)
        features = self.decoder(bridged, skips)
        return F.softmax(self.head(features), dim=1)


def parameter_count(cfg: ModelConfig) -> int:
    """Total trainable parameters; a pure function of the config."""
    return sum(p.numel() for p in HybridSegNet3d(cfg).parameters())


def make_predictor(model: HybridSegNet3d, device: str = "cpu"):
    """Wrap a model as a (patch, offset) -> class-probability callable."""
    model = model.to(device).eval()

    def predict(patch: np.ndarray, offset) -> np.ndarray:
        t = torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32))
        t = t.unsqueeze(0).unsqueeze(0).to(device)
        with torch.no_grad():
            probs = model(t)
        return probs[0].cpu().numpy()

    return predict


def config_fingerprint(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, model: HybridSegNet3d, table: LabelTable, **extra) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(model.cfg),
        "label_fingerprint": table.fingerprint(),
        "model_state": model.state_dict(),
    }
    payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path, table: LabelTable | None = None, force: bool = False,
                    device: str = "cpu") -> tuple[HybridSegNet3d, dict]:
    """Rebuild the model stored at path.

    Refuses to load when the format version is unknown or the label-table
    fingerprint disagrees with the provided table, unless force=True.
    """
    try:
        payload = torch.load(path, map_location=device, weights_only=False)
        version = payload["format_version"]
        cfg = ModelConfig(**payload["model_config"])
        state = payload["model_state"]
    except CheckpointMismatch:
        raise
    except Exception as exc:
        raise CheckpointMismatch(f"unreadable checkpoint {path}: {exc}") from exc
    if version != CHECKPOINT_FORMAT_VERSION and not force:
        raise CheckpointMismatch(f"checkpoint format {version} != {CHECKPOINT_FORMAT_VERSION}")
    if table is not None and payload.get("label_fingerprint") != table.fingerprint() and not force:
        raise CheckpointMismatch("checkpoint label table differs from the active table")
    model = HybridSegNet3d(cfg)
    try:
        model.load_state_dict(state)
    except Exception as exc:
        raise CheckpointMismatch(f"weights do not fit the stored config: {exc}") from exc
    return model.to(device), payload
