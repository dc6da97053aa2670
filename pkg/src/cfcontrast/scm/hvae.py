"""Reduced conditional hierarchical VAE.

A small top-down ladder model: latent levels live at coarse resolutions
(4x4, 8x8, optionally 16x16 for a 32x32 image), every prior and posterior
is conditioned on the scanner embedding, and decoder blocks see fixed
coordinate channels so spatially anchored domain effects (vignette, corner
glyphs) are easy to express. Normalisation is plain GroupNorm, i.e.
parent-independent; conditioning enters only through FiLM modulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import nn

_LOGSIG_MIN = -6.0
_LOGSIG_MAX = 2.0


@dataclass
class ScmConfig:
    """Architecture and optimisation settings for the generative model."""

    num_levels: int = 2
    base_channels: int = 24
    z_channels: tuple[int, ...] = (8, 4)
    emb_dim: int = 16
    epochs: int = 12
    batch_size: int = 128
    lr: float = 1e-3
    recon_sigma: float = 0.1
    free_bits: float = 0.0
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 2 <= self.num_levels <= 3:
            raise ValueError(f"num_levels must be 2 or 3, got {self.num_levels}")
        if len(self.z_channels) != self.num_levels:
            raise ValueError("z_channels must have one entry per level (top first)")
        if self.recon_sigma <= 0:
            raise ValueError("recon_sigma must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["z_channels"] = list(self.z_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScmConfig":
        d = dict(d)
        d["z_channels"] = tuple(d["z_channels"])
        return cls(**d)


def _groupnorm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class FiLM(nn.Module):
    """Per-channel scale/shift from the parent embedding (identity at init)."""

    def __init__(self, emb_dim: int, channels: int):
        super().__init__()
        self.lin = nn.Linear(emb_dim, 2 * channels)
        nn.init.zeros_(self.lin.weight)
        nn.init.zeros_(self.lin.bias)

    def forward(self, h: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        scale, shift = self.lin(e).chunk(2, dim=1)
        return h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]


def _coords(h: torch.Tensor) -> torch.Tensor:
    b, _, height, width = h.shape
    ys = torch.linspace(-1.0, 1.0, height, dtype=h.dtype, device=h.device)
    xs = torch.linspace(-1.0, 1.0, width, dtype=h.dtype, device=h.device)
    yy = ys[:, None].expand(height, width)
    xx = xs[None, :].expand(height, width)
    grid = torch.stack([yy, xx])[None].expand(b, 2, height, width)
    return torch.cat([h, grid], dim=1)


class EncoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.norm1 = _groupnorm(out_ch)
        self.film = FiLM(emb_dim, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _groupnorm(out_ch)

    def forward(self, h: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.norm1(self.conv1(h)))
        h = self.film(h, e)
        h = F.silu(self.norm2(self.conv2(h)))
        return h


class DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv1 = nn.Conv2d(in_ch + 2, out_ch, 3, padding=1)
        self.norm1 = _groupnorm(out_ch)
        self.film = FiLM(emb_dim, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _groupnorm(out_ch)

    def forward(self, h: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.silu(self.norm1(self.conv1(_coords(h))))
        h = self.film(h, e)
        h = F.silu(self.norm2(self.conv2(h)))
        return h


class LatentLevel(nn.Module):
    """One stochastic level: conditional prior, conditional posterior, inject."""

    def __init__(self, state_ch: int, feat_ch: int, z_ch: int, emb_dim: int):
        super().__init__()
        self.z_ch = z_ch
        self.prior_film = FiLM(emb_dim, state_ch)
        self.prior_conv = nn.Conv2d(state_ch + 2, 2 * z_ch, 3, padding=1)
        self.post_film = FiLM(emb_dim, state_ch + feat_ch)
        self.post_conv = nn.Conv2d(state_ch + feat_ch + 2, 2 * z_ch, 3, padding=1)
        self.inject = nn.Conv2d(z_ch, state_ch, 1)
        nn.init.zeros_(self.prior_conv.weight)
        nn.init.zeros_(self.prior_conv.bias)

    def prior(self, state: torch.Tensor, e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.prior_film(state, e)
        mu, logsig = self.prior_conv(_coords(h)).chunk(2, dim=1)
        return mu, torch.clamp(logsig, _LOGSIG_MIN, _LOGSIG_MAX)

    def posterior(
        self, state: torch.Tensor, feat: torch.Tensor, e: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.post_film(torch.cat([state, feat], dim=1), e)
        mu, logsig = self.post_conv(_coords(h)).chunk(2, dim=1)
        return mu, torch.clamp(logsig, _LOGSIG_MIN, _LOGSIG_MAX)


class ConditionalHVAE(nn.Module):
    """Hierarchical VAE with scanner-conditioned encoder, priors and decoder."""

    def __init__(self, image_shape: tuple[int, int], num_scanners: int, cfg: ScmConfig):
        super().__init__()
        h, w = image_shape
        if h % 8 or w % 8 or min(h, w) < 16:
            raise ValueError(f"image_shape must be >= 16 and divisible by 8, got {image_shape}")
        self.image_shape = tuple(image_shape)
        self.num_scanners = num_scanners
        self.cfg = cfg

        c = cfg.base_channels
        emb = cfg.emb_dim
        self.embed = nn.Embedding(num_scanners, emb)

        # Bottom-up: 32 -> 16 -> 8 -> 4 (channels c, 2c, 3c).
        self.stem = nn.Conv2d(1, c, 3, padding=1)
        self.enc16 = EncoderBlock(c, c, emb)
        self.enc8 = EncoderBlock(c, 2 * c, emb)
        self.enc4 = EncoderBlock(2 * c, 3 * c, emb)

        # Latent levels, top first, at resolutions 4, 8 (and 16 when depth 3).
        level_state = [3 * c, 2 * c, c][: cfg.num_levels]
        level_feat = [3 * c, 2 * c, c][: cfg.num_levels]
        self.levels = nn.ModuleList(
            LatentLevel(level_state[i], level_feat[i], cfg.z_channels[i], emb)
            for i in range(cfg.num_levels)
        )
        # One upsampling block between consecutive levels, then a tail chain
        # back to full resolution.
        self.between = nn.ModuleList(
            DecoderBlock(level_state[i], level_state[i + 1], emb, upsample=True)
            for i in range(cfg.num_levels - 1)
        )
        tail: list[DecoderBlock] = []
        ch = level_state[-1]
        for _ in range(3 - (cfg.num_levels - 1)):
            nxt = max(c, ch // 2) if ch > c else c
            tail.append(DecoderBlock(ch, nxt, emb, upsample=True))
            ch = nxt
        self.tail = nn.ModuleList(tail)
        self.seed_state = nn.Parameter(torch.zeros(1, 3 * c, h // 8, w // 8))
        self.out_conv = nn.Conv2d(ch, 1, 3, padding=1)

    # -- pieces ----------------------------------------------------------

    def _encode(self, x: torch.Tensor, e: torch.Tensor) -> list[torch.Tensor]:
        h = F.silu(self.stem(x))
        f16 = self.enc16(h, e)
        f8 = self.enc8(f16, e)
        f4 = self.enc4(f8, e)
        return [f4, f8, f16][: self.cfg.num_levels]

    def _finish(self, state: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        for blk in self.tail:
            state = blk(state, e)
        return torch.sigmoid(self.out_conv(state))

    # -- inference -------------------------------------------------------

    def infer(
        self,
        x: torch.Tensor,
        scanner_ids: torch.Tensor,
        sample: bool,
        eps: list[torch.Tensor] | None = None,
    ) -> dict:
        """Bottom-up + top-down pass under the posterior.

        Returns reconstruction, per-level exogenous residuals
        ``u = (z - mu_prior) / sigma_prior``, the noise actually used when
        sampling, and per-level KL (summed over latent dims, per sample).
        """
        e = self.embed(scanner_ids)
        feats = self._encode(x, e)
        state = self.seed_state.expand(x.shape[0], -1, -1, -1)
        us: list[torch.Tensor] = []
        eps_used: list[torch.Tensor] = []
        kls: list[torch.Tensor] = []
        for i, level in enumerate(self.levels):
            mu_p, logsig_p = level.prior(state, e)
            mu_q, logsig_q = level.posterior(state, feats[i], e)
            if sample:
                noise = eps[i] if eps is not None else torch.randn_like(mu_q)
                z = mu_q + torch.exp(logsig_q) * noise
                eps_used.append(noise)
            else:
                z = mu_q
            us.append((z - mu_p) / torch.exp(logsig_p))
            kl = 0.5 * (
                torch.exp(2.0 * (logsig_q - logsig_p))
                + ((mu_q - mu_p) / torch.exp(logsig_p)) ** 2
                - 1.0
                + 2.0 * (logsig_p - logsig_q)
            )
            kls.append(kl.flatten(1).sum(dim=1))
            state = state + level.inject(z)
            if i < len(self.levels) - 1:
                state = self.between[i](state, e)
        recon = self._finish(state, e)
        return {"recon": recon, "us": us, "eps": eps_used if sample else None, "kls": kls}

    def decode_from(self, us: list[torch.Tensor], scanner_ids: torch.Tensor) -> torch.Tensor:
        """Top-down decode of exogenous residuals under the given parents."""
        if len(us) != len(self.levels):
            raise ValueError(f"expected {len(self.levels)} latent levels, got {len(us)}")
        e = self.embed(scanner_ids)
        state = self.seed_state.expand(us[0].shape[0], -1, -1, -1)
        for i, level in enumerate(self.levels):
            mu_p, logsig_p = level.prior(state, e)
            if us[i].shape[1:] != mu_p.shape[1:]:
                raise ValueError(
                    f"latent level {i} shape {tuple(us[i].shape[1:])} does not match "
                    f"model hierarchy {tuple(mu_p.shape[1:])}"
                )
            z = mu_p + torch.exp(logsig_p) * us[i]
            state = state + level.inject(z)
            if i < len(self.levels) - 1:
                state = self.between[i](state, e)
        return self._finish(state, e)

    def latent_shapes(self, batch: int = 1) -> list[tuple[int, ...]]:
        h, w = self.image_shape
        res = [(h // 8, w // 8), (h // 4, w // 4), (h // 2, w // 2)][: self.cfg.num_levels]
        return [(batch, zc, r[0], r[1]) for zc, r in zip(self.cfg.z_channels, res)]
