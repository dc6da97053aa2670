"""Normalized-temperature cross-entropy (NT-Xent) contrastive loss.

For projections of 2N views arranged as ``[a_0..a_{N-1}, b_0..b_{N-1}]``
(rows i and i+N are the two views of pair i), every row is an anchor whose
positive is its partner and whose 2(N-1) negatives are all remaining rows:

    L(i, j) = -log  exp(sim(z_i, z_j)/tau) / sum_{k != i} exp(sim(z_i, z_k)/tau)

The total is the sum of L over all 2N ordered pairs; the default reduction
is the mean per ordered pair, which is comparable across batch sizes.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two vectors; rejects zero vectors."""
    u = _as_tensor(u).flatten()
    v = _as_tensor(v).flatten()
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if float(nu) == 0.0 or float(nv) == 0.0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(torch.dot(u / nu, v / nv))


def nt_xent_loss(
    projections: torch.Tensor,
    temperature: float,
    reduction: str = "mean",
) -> torch.Tensor:
    """NT-Xent loss over a (2N, d) projection batch.

    ``reduction="mean"`` averages over the 2N ordered positive pairs;
    ``"sum"`` returns the plain total. Differentiable; preserves the input
    dtype (use float64 inputs for high-precision checks).
    """
    z = _as_tensor(projections)
    if z.ndim != 2 or z.shape[0] % 2 != 0 or z.shape[0] < 2:
        raise ValueError(f"projections must be (2N, d) with N >= 1, got shape {tuple(z.shape)}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not torch.isfinite(z).all():
        raise ValueError("projections contain non-finite values")
    norms = torch.linalg.vector_norm(z, dim=1)
    if bool((norms == 0).any()):
        raise ValueError("projections contain zero vectors")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    two_n = z.shape[0]
    n = two_n // 2
    zn = z / norms[:, None]
    logits = (zn @ zn.T) / temperature
    logits.fill_diagonal_(float("-inf"))
    targets = torch.cat(
        [
            torch.arange(n, two_n, device=z.device),
            torch.arange(0, n, device=z.device),
        ]
    )
    losses = F.cross_entropy(logits, targets, reduction="none")
    return losses.mean() if reduction == "mean" else losses.sum()
