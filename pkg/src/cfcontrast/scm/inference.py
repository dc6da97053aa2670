"""Abduct -> intervene -> predict counterfactual inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .train import GenerativeModel


@dataclass(frozen=True)
class ParentVector:
    """Causal parents of an image batch; the scanner is the only parent."""

    scanner_id: np.ndarray  # (B,) int64

    def __post_init__(self) -> None:
        arr = np.atleast_1d(np.asarray(self.scanner_id, dtype=np.int64))
        object.__setattr__(self, "scanner_id", arr)

    @classmethod
    def single(cls, scanner: int) -> "ParentVector":
        return cls(scanner_id=np.array([scanner], dtype=np.int64))

    def __len__(self) -> int:
        return self.scanner_id.shape[0]

    def with_scanner(self, scanner: int | np.ndarray) -> "ParentVector":
        new = np.broadcast_to(np.asarray(scanner, dtype=np.int64), self.scanner_id.shape)
        return ParentVector(scanner_id=new.copy())

    def validate(self, num_scanners: int) -> None:
        if self.scanner_id.min() < 0 or self.scanner_id.max() >= num_scanners:
            raise ValueError(
                f"scanner ids must be in [0, {num_scanners}), got "
                f"[{self.scanner_id.min()}, {self.scanner_id.max()}]"
            )


@dataclass
class LatentState:
    """Per-level exogenous residuals captured during abduction.

    ``levels[i]`` holds ``(z_i - mu_prior_i) / sigma_prior_i`` for level i
    (top first). In stochastic mode the posterior noise is recorded so the
    abduction is replayable.
    """

    levels: list[torch.Tensor]
    mode: str  # "deterministic" | "stochastic"
    eps: list[torch.Tensor] | None = None

    @property
    def batch_size(self) -> int:
        return self.levels[0].shape[0]

    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(u.shape) for u in self.levels]

    def select(self, indices: np.ndarray) -> "LatentState":
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return LatentState(
            levels=[u[idx] for u in self.levels],
            mode=self.mode,
            eps=None if self.eps is None else [n[idx] for n in self.eps],
        )


def _as_batched_tensor(images: np.ndarray) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"images must be (H, W) or (B, H, W), got shape {arr.shape}")
    return torch.from_numpy(arr).unsqueeze(1)


def abduct(
    model: GenerativeModel,
    images: np.ndarray,
    parents: ParentVector,
    mode: str = "deterministic",
    noise: list[torch.Tensor] | None = None,
) -> LatentState:
    """Infer the exogenous latent state of observed images.

    Deterministic mode takes posterior means at every level; stochastic mode
    samples (optionally replaying previously recorded noise).
    """
    if mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown abduction mode {mode!r}")
    x = _as_batched_tensor(images)
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("abduct expects image values in [0, 1]")
    parents.validate(model.num_scanners)
    if len(parents) != x.shape[0]:
        raise ValueError(f"got {len(parents)} parents for {x.shape[0]} images")
    scanners = torch.from_numpy(parents.scanner_id)
    model.hvae.eval()
    with torch.no_grad():
        out = model.hvae.infer(x, scanners, sample=(mode == "stochastic"), eps=noise)
    return LatentState(levels=out["us"], mode=mode, eps=out["eps"])


def predict(model: GenerativeModel, state: LatentState, parents: ParentVector) -> np.ndarray:
    """Decode a latent state under the given parents; output in [0, 1]."""
    parents.validate(model.num_scanners)
    if len(parents) != state.batch_size:
        raise ValueError(f"got {len(parents)} parents for {state.batch_size} latent rows")
    scanners = torch.from_numpy(parents.scanner_id)
    model.hvae.eval()
    with torch.no_grad():
        recon = model.hvae.decode_from(state.levels, scanners)
    return recon.squeeze(1).numpy()


def reconstruct(model: GenerativeModel, images: np.ndarray, parents: ParentVector) -> np.ndarray:
    """Model reconstruction, defined as predict(abduct(x, p), p)."""
    return predict(model, abduct(model, images, parents, mode="deterministic"), parents)


def counterfactual(
    model: GenerativeModel,
    images: np.ndarray,
    parents: ParentVector,
    target_scanner: int | np.ndarray,
) -> np.ndarray:
    """Domain counterfactual: abduct under the factual scanner, decode under
    the target scanner. A null intervention reproduces the reconstruction."""
    targets = ParentVector(
        scanner_id=np.broadcast_to(
            np.asarray(target_scanner, dtype=np.int64), parents.scanner_id.shape
        ).copy()
    )
    targets.validate(model.num_scanners)
    state = abduct(model, images, parents, mode="deterministic")
    return predict(model, state, targets)


def cycle_consistency(
    model: GenerativeModel,
    images: np.ndarray,
    parents: ParentVector,
    via_scanner: int,
) -> float:
    """Mean L2 distance between s -> s' -> s round trips and reconstructions.

    A diagnostic measurement (reported, not asserted): hierarchical
    abduction is only approximately invertible.
    """
    recon = reconstruct(model, images, parents)
    forward = counterfactual(model, images, parents, via_scanner)
    via_parents = parents.with_scanner(via_scanner)
    back = counterfactual(model, forward, via_parents, parents.scanner_id)
    distances = np.sqrt(((back - recon) ** 2).reshape(recon.shape[0], -1).sum(axis=1))
    return float(distances.mean())
