"""Training objectives: pixel, Fourier amplitude/phase, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .freq_filter import rdft2

AMPLITUDE_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0
    lam: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error plus mean squared error."""
    _check_shapes(pred, target)
    diff = pred - target
    return diff.abs().mean() + (diff**2).mean()


def wrapped_phase_distance(p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
    d = torch.remainder(p1 - p2, 2 * math.pi)
    return torch.minimum(d, 2 * math.pi - d)


def frequency_terms(pred: torch.Tensor, target: torch.Tensor):
    """(amplitude L1, phase L1) between the half spectra of ``pred`` and ``target``.

    Bins where both amplitudes are below ``AMPLITUDE_FLOOR`` carry no phase
    and are left out of the phase mean.
    """
    _check_shapes(pred, target)
    sp, st = rdft2(pred), rdft2(target)
    ap, at = sp.abs(), st.abs()
    amplitude = (ap - at).abs().mean()

    valid = (ap >= AMPLITUDE_FLOOR) | (at >= AMPLITUDE_FLOOR)
    if not valid.any():
        return amplitude, amplitude.new_zeros(())
    # angle() of an exact zero has an undefined gradient; keep those bins out
    # of the graph entirely.
    safe_p = torch.where(ap >= AMPLITUDE_FLOOR, sp, torch.ones_like(sp))
    safe_t = torch.where(at >= AMPLITUDE_FLOOR, st, torch.ones_like(st))
    dist = wrapped_phase_distance(torch.angle(safe_p), torch.angle(safe_t))
    phase = dist[valid].mean()
    return amplitude, phase


def frequency_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    amplitude, phase = frequency_terms(pred, target)
    return amplitude + phase


def combine(perceptual, frequency, ldg, w: LossWeights = LossWeights()):
    return w.alpha * perceptual + w.lam * frequency + ldg


def total_loss(
    restored,
    flare_pred,
    reference,
    flare_true,
    ldg=0.0,
    w: LossWeights = LossWeights(),
):
    """alpha * (pixel(restored) + pixel(flare)) + lambda * fourier(restored) + ldg.

    Returns ``(total, parts)`` where ``parts`` holds the unweighted
    perceptual and frequency terms.
    """
    per = perceptual_loss(restored, reference) + perceptual_loss(flare_pred, flare_true)
    freq = frequency_loss(restored, reference)
    total = combine(per, freq, ldg, w)
    return total, {"perceptual": per, "frequency": freq, "ldg": ldg}
