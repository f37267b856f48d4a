"""Learnable dynamic filtering in the Fourier domain.

All transforms use the orthonormal convention (1/sqrt(HW) on both the
forward and the inverse pass) over the last two axes, and keep only the
non-redundant half spectrum of width ``W // 2 + 1``.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

STAR_SCALE = 0.8944
STAR_BIAS = -0.4472
LN_EPS = 1e-5


def rdft2(x: torch.Tensor) -> torch.Tensor:
    """Orthonormal 2-D real DFT over the last two axes."""
    if x.dim() < 2 or x.shape[-2] < 2 or x.shape[-1] < 2:
        raise ValueError(f"expected a (..., H, W) tensor with H, W >= 2, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("rdft2 input contains non-finite values")
    return torch.fft.rfft2(x, norm="ortho")


def irdft2(s: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`rdft2` for a real signal of size ``height x width``."""
    expected = (height, width // 2 + 1)
    if tuple(s.shape[-2:]) != expected:
        raise ValueError(
            f"half spectrum of shape {tuple(s.shape[-2:])} does not match "
            f"{height}x{width} (expected {expected})"
        )
    return torch.fft.irfft2(s, s=(height, width), norm="ortho")


def half_spectrum_weights(width: int, dtype=torch.float64) -> torch.Tensor:
    """Multiplicity of each half-spectrum column under conjugate symmetry."""
    w = torch.full((width // 2 + 1,), 2.0, dtype=dtype)
    w[0] = 1.0
    if width % 2 == 0:
        w[-1] = 1.0
    return w


def spectral_energy(s: torch.Tensor, width: int) -> torch.Tensor:
    """Signal energy recovered from a half spectrum (Parseval)."""
    w = half_spectrum_weights(width, dtype=s.real.dtype).to(s.device)
    return (s.abs() ** 2 * w).sum()


def star_relu(x: torch.Tensor, scale=STAR_SCALE, bias=STAR_BIAS) -> torch.Tensor:
    return scale * F.relu(x) ** 2 + bias


class StarReLU(nn.Module):
    """s * relu(x)**2 + b with learnable scalars s and b."""

    def __init__(self, scale: float = STAR_SCALE, bias: float = STAR_BIAS):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(float(scale)))
        self.bias = nn.Parameter(torch.tensor(float(bias)))

    def forward(self, x):
        return star_relu(x, self.scale, self.bias)


class LayerNorm2d(nn.Module):
    """Layer norm over the channel axis of a (B, C, H, W) map.

    A zero-variance input normalizes to zero, so the output is the shift.
    """

    def __init__(self, channels: int, eps: float = LN_EPS):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = x.var(1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class FilterBank(nn.Module):
    """N shared complex base filters plus the per-channel coefficient head.

    The head pools each channel globally, then applies
    ``W2 @ StarReLU(W1 @ LN(pooled))`` to get ``N * C`` logits, one group of
    N per channel, which are softmaxed into mixing coefficients.
    """

    def __init__(
        self,
        channels: int,
        height: int,
        width: int,
        n_filters: int = 4,
        hidden_dim: int | None = None,
        init_noise: float = 0.02,
    ):
        super().__init__()
        if n_filters < 1:
            raise ValueError("n_filters must be >= 1")
        self.channels = channels
        self.height = height
        self.width = width
        self.n_filters = n_filters
        self.hidden_dim = hidden_dim or max(channels // 4, 4)

        phi = torch.zeros(n_filters, height, width // 2 + 1, 2)
        phi[..., 0] = 1.0
        phi += init_noise * torch.randn_like(phi)
        self.phi = nn.Parameter(phi)

        self.norm = nn.LayerNorm(channels, eps=LN_EPS)
        self.w1 = nn.Linear(channels, self.hidden_dim, bias=False)
        self.act = StarReLU()
        self.w2 = nn.Linear(self.hidden_dim, n_filters * channels, bias=False)
        nn.init.normal_(self.w1.weight, std=0.02)
        nn.init.normal_(self.w2.weight, std=0.02)

    @property
    def filters(self) -> torch.Tensor:
        """Complex filters, shape (N, H_f, W_f // 2 + 1)."""
        return torch.view_as_complex(self.phi)

    def filters_at(self, height: int, width: int) -> torch.Tensor:
        """Filters bilinearly resampled to another feature resolution."""
        if (height, width) == (self.height, self.width):
            return self.filters
        phi = self.phi.permute(0, 3, 1, 2)  # N, 2, H, Wf
        phi = F.interpolate(phi, size=(height, width // 2 + 1), mode="bilinear", align_corners=True)
        return torch.view_as_complex(phi.permute(0, 2, 3, 1).contiguous())

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(-2, -1))
        s = self.w2(self.act(self.w1(self.norm(pooled))))
        return s.reshape(*pooled.shape[:-1], self.channels, self.n_filters)


def mix_coefficients(x: torch.Tensor, bank: FilterBank) -> torch.Tensor:
    """Per-channel softmax coefficients over the bank's filters, shape (..., C, N)."""
    if x.shape[-3] != bank.channels:
        raise ValueError(f"feature map has {x.shape[-3]} channels, filter bank expects {bank.channels}")
    return torch.softmax(bank.logits(x), dim=-1)


def dynamic_filter(
    x: torch.Tensor,
    bank: FilterBank,
    coefficients: torch.Tensor | None = None,
    resample: bool = False,
) -> torch.Tensor:
    """Filter ``x`` with the per-channel convex mixture of the bank's filters.

    ``coefficients`` pins the mixture (shape (..., C, N)); otherwise it is
    computed from ``x``. With ``resample`` the filters are interpolated to
    the input resolution instead of raising on mismatch.
    """
    h, w = x.shape[-2:]
    if resample:
        phi = bank.filters_at(h, w)
    else:
        if (h, w) != (bank.height, bank.width):
            raise ValueError(
                f"filter bank is sized for {bank.height}x{bank.width}, got a {h}x{w} feature map"
            )
        phi = bank.filters
    t = mix_coefficients(x, bank) if coefficients is None else coefficients
    weight = torch.einsum("...cn,nhw->...chw", t.to(phi.real.dtype).to(phi.dtype), phi)
    return irdft2(weight * rdft2(x), h, w)


class ChannelMLP(nn.Module):
    """Pointwise two-layer MLP; the output layer starts at zero."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.act = StarReLU()
        self.fc2 = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class GDFGBlock(nn.Module):
    """Residual dynamic-frequency block.

    r = dynamic_filter(x) + x
    y = LN(MLP(r)) + r

    followed by a 1x1 projection when ``out_channels`` differs from
    ``channels``.
    """

    def __init__(
        self,
        channels: int,
        height: int,
        width: int,
        n_filters: int = 4,
        mlp_ratio: int = 2,
        out_channels: int | None = None,
    ):
        super().__init__()
        self.bank = FilterBank(channels, height, width, n_filters)
        self.mlp = ChannelMLP(channels, mlp_ratio * channels)
        self.norm = LayerNorm2d(channels)
        out_channels = out_channels or channels
        self.proj = nn.Conv2d(channels, out_channels, 1) if out_channels != channels else None

    def forward(self, x, resample: bool = False):
        r = dynamic_filter(x, self.bank, resample=resample) + x
        y = self.norm(self.mlp(r)) + r
        return y if self.proj is None else self.proj(y)


class MLPBlock(nn.Module):
    """Frequency-free stand-in for :class:`GDFGBlock`: y = LN(MLP(x)) + x.

    The hidden width is chosen so the parameter count matches a GDFG block
    of the same channels and resolution as closely as possible.
    """

    def __init__(
        self,
        channels: int,
        height: int,
        width: int,
        n_filters: int = 4,
        mlp_ratio: int = 2,
        out_channels: int | None = None,
    ):
        super().__init__()
        budget = gdfg_parameter_count(channels, height, width, n_filters, mlp_ratio)
        # conv1 (C*h + h) + act (2) + conv2 (h*C + C) + norm (2C)
        hidden = max(1, round((budget - 3 * channels - 2) / (2 * channels + 1)))
        self.mlp = ChannelMLP(channels, hidden)
        self.norm = LayerNorm2d(channels)
        out_channels = out_channels or channels
        self.proj = nn.Conv2d(channels, out_channels, 1) if out_channels != channels else None

    def forward(self, x, resample: bool = False):
        y = self.norm(self.mlp(x)) + x
        return y if self.proj is None else self.proj(y)


def gdfg_parameter_count(channels, height, width, n_filters=4, mlp_ratio=2) -> int:
    """Parameters of a :class:`GDFGBlock` without a projection."""
    c, e = channels, max(channels // 4, 4)
    bank = n_filters * height * (width // 2 + 1) * 2 + 2 * c + e * c + 2 + n_filters * c * e
    hidden = mlp_ratio * c
    mlp = c * hidden + hidden + 2 + hidden * c + c
    return bank + mlp + 2 * c


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

