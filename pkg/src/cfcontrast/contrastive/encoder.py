"""Small convolutional encoder and projection head."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    repr_dim: int = 128
    proj_dim: int = 64

    def __post_init__(self) -> None:
        if self.proj_dim >= self.repr_dim:
            raise ValueError("proj_dim must be smaller than repr_dim")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


class ConvEncoder(nn.Module):
    """4-block grayscale CNN backbone producing a D-dim representation.

    GroupNorm keeps the representation independent of batch composition, so
    probe features do not depend on how extraction is batched.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        in_ch = 1
        for ch in cfg.channels:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, ch, 3, padding=1),
                    nn.GroupNorm(math.gcd(ch, 8), ch),
                    nn.SiLU(),
                    nn.Conv2d(ch, ch, 3, stride=2, padding=1),
                    nn.GroupNorm(math.gcd(ch, 8), ch),
                    nn.SiLU(),
                )
            )
            in_ch = ch
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(cfg.channels[-1], cfg.repr_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.fc(x.mean(dim=(2, 3)))


class ProjectionHead(nn.Module):
    """Two-layer MLP mapping the representation to a smaller projection."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.repr_dim, cfg.repr_dim),
            nn.SiLU(),
            nn.Linear(cfg.repr_dim, cfg.proj_dim),
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h)


@torch.no_grad()
def embed_images(
    encoder: ConvEncoder, images: np.ndarray, batch_size: int = 512
) -> np.ndarray:
    """Encoder representations for a stack of (n, H, W) images."""
    encoder.eval()
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        x = torch.from_numpy(images[start : start + batch_size].astype(np.float32))
        h = encoder(x.unsqueeze(1))
        if not torch.isfinite(h).all():
            raise RuntimeError("encoder produced non-finite representations")
        chunks.append(h.numpy())
    return np.concatenate(chunks).astype(np.float32)
