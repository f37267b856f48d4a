"""Patch-contrastive guidance around light sources (InfoNCE over image patches)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .freq_filter import StarReLU

MAX_NEGATIVE_OVERLAP = 0.25


@dataclass
class PatchSet:
    query: torch.Tensor  # (C, p, p) from the restored image
    positive: torch.Tensor  # (C, p, p) same location in the reference
    negatives: torch.Tensor  # (M, C, p, p) other reference locations
    patch_size: int
    query_coords: tuple[int, int]
    negative_coords: list[tuple[int, int]] = field(default_factory=list)


def patch_overlap(a: tuple[int, int], b: tuple[int, int], size: int) -> int:
    """Overlapping pixel area of two size x size patches given top-left corners."""
    dy = max(0, size - abs(a[0] - b[0]))
    dx = max(0, size - abs(a[1] - b[1]))
    return dy * dx


def _luminance(img: torch.Tensor) -> torch.Tensor:
    if img.shape[0] == 3:
        w = img.new_tensor([0.2126, 0.7152, 0.0722])
        return (img * w[:, None, None]).sum(0)
    return img.mean(0)


def sample_patches(
    restored: torch.Tensor,
    reference: torch.Tensor,
    light_mask,
    n_negatives: int = 16,
    patch_size: int = 4,
    seed: int = 0,
) -> PatchSet:
    """Sample a query/positive pair at a light-source pixel plus reference negatives.

    The query is centred on a mask pixel drawn uniformly (clamped so the
    patch stays inside the image). If the mask is empty the brightest
    reference pixel is used instead. Negatives are drawn without
    replacement from all patch positions overlapping the query by less
    than a quarter of its area.
    """
    if restored.shape != reference.shape:
        raise ValueError(f"shape mismatch: {tuple(restored.shape)} vs {tuple(reference.shape)}")
    _, h, w = reference.shape
    p = patch_size
    if p < 1 or p > min(h, w):
        raise ValueError(f"patch_size {p} does not fit a {h}x{w} image")
    rng = np.random.default_rng(seed)

    mask = np.asarray(light_mask, dtype=bool)
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match image {(h, w)}")
    ys, xs = np.nonzero(mask)
    if len(ys):
        k = rng.integers(len(ys))
        cy, cx = int(ys[k]), int(xs[k])
    else:
        lum = _luminance(reference.detach()).cpu().numpy()
        cy, cx = (int(v) for v in np.unravel_index(np.argmax(lum), lum.shape))
    qy = min(max(cy - p // 2, 0), h - p)
    qx = min(max(cx - p // 2, 0), w - p)

    gy, gx = np.mgrid[0 : h - p + 1, 0 : w - p + 1]
    overlap = np.maximum(0, p - np.abs(gy - qy)) * np.maximum(0, p - np.abs(gx - qx))
    cand = np.flatnonzero(overlap < MAX_NEGATIVE_OVERLAP * p * p)
    if len(cand) == 0:
        raise ValueError(f"no negative positions with < 25% overlap in a {h}x{w} image")
    picks = rng.choice(cand, size=n_negatives, replace=n_negatives > len(cand))
    neg_coords = [(int(gy.flat[i]), int(gx.flat[i])) for i in picks]

    def crop(img, y, x):
        return img[:, y : y + p, x : x + p]

    negatives = torch.stack([crop(reference, y, x) for y, x in neg_coords])
    return PatchSet(
        query=crop(restored, qy, qx),
        positive=crop(reference, qy, qx),
        negatives=negatives,
        patch_size=p,
        query_coords=(qy, qx),
        negative_coords=neg_coords,
    )


def cosine_sim(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    n1, n2 = z1.norm(), z2.norm()
    if n1 == 0 or n2 == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return (z1 * z2).sum() / (n1 * n2)


class ProjectionHead(nn.Module):
    """flatten -> linear -> StarReLU -> linear -> unit sphere."""

    def __init__(self, in_channels: int = 3, patch_size: int = 4, output_dim: int = 128):
        super().__init__()
        self.patch_size = patch_size
        self.output_dim = output_dim
        self.fc1 = nn.Linear(in_channels * patch_size**2, output_dim)
        self.act = StarReLU()
        self.fc2 = nn.Linear(output_dim, output_dim)

    def project(self, patches: torch.Tensor) -> torch.Tensor:
        """Unnormalized K-dim embedding of (..., C, p, p) patches."""
        return self.fc2(self.act(self.fc1(patches.flatten(-3))))

    def forward(self, patches):
        return F.normalize(self.project(patches), dim=-1)


def info_nce(v: torch.Tensor, v_pos: torch.Tensor, v_neg: torch.Tensor, tau: float = 0.07):
    """-log softmax of the positive logit among positive + negatives.

    Inputs are projected onto the unit sphere first, so the loss is
    invariant to positive rescaling of any vector.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    v, v_pos, v_neg = (F.normalize(t, dim=-1) for t in (v, v_pos, v_neg))
    pos = (v * v_pos).sum(-1, keepdim=True) / tau
    neg = v_neg @ v / tau
    logits = torch.cat([pos, neg])
    return torch.logsumexp(logits, 0) - pos[0]


def ldg_loss(patches: PatchSet, head: ProjectionHead, tau: float = 0.07) -> torch.Tensor:
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    v = head.project(patches.query)
    v_pos = head.project(patches.positive)
    v_neg = head.project(patches.negatives)
    return info_nce(v, v_pos, v_neg, tau)
