"""Trainable input transformation d(x) = γ·[τx + (1-τ)·r_ψ(x)] + β and SSIM."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .layers import Conv2d, GroupNorm, Module, channel_affine

DEFAULT_HIDDEN = 8
DEFAULT_BLOCKS = 2
DEFAULT_GROUPS = 4


class RPsi(Module):
    """``blocks`` x [conv3x3 -> group norm -> ReLU], then conv3x3 back to ``n_in`` channels.

    Stride 1 and padding 1 everywhere, so the spatial shape is preserved.
    """

    def __init__(self, n_in: int = 1, hidden: int = DEFAULT_HIDDEN, blocks: int = DEFAULT_BLOCKS,
                 groups: int = DEFAULT_GROUPS, seed: int = 0):
        if hidden % groups:
            raise ShapeError(f"hidden width {hidden} not divisible into {groups} groups")
        if blocks < 1:
            raise ShapeError("r_psi needs at least one block")
        rng = np.random.default_rng(seed)
        self.n_in = n_in
        self.hidden = hidden
        self.groups = groups
        convs, norms = [], []
        prev = n_in
        for _ in range(blocks):
            convs.append(Conv2d(prev, hidden, 3, 1, 1, rng))
            norms.append(GroupNorm(hidden, groups))
            prev = hidden
        self.convs = convs
        self.norms = norms
        self.out = Conv2d(hidden, n_in, 3, 1, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = ad.relu(norm(conv(h)))
        return self.out(h)


def build_rpsi(n_in: int = 1, hidden: int = DEFAULT_HIDDEN, blocks: int = DEFAULT_BLOCKS,
               groups: int = DEFAULT_GROUPS, seed: int = 0) -> RPsi:
    return RPsi(n_in, hidden, blocks, groups, seed)


def rpsi_parameter_count(n_in: int, hidden: int, blocks: int) -> int:
    first = n_in * hidden * 9 + hidden
    middle = (blocks - 1) * (hidden * hidden * 9 + hidden)
    norms = blocks * 2 * hidden
    last = hidden * n_in * 9 + n_in
    return first + middle + norms + last


class InputTransform(Module):
    """Identity at construction: τ=1, γ=1, β=0."""

    def __init__(self, n_in: int = 1, hidden: int = DEFAULT_HIDDEN, blocks: int = DEFAULT_BLOCKS,
                 groups: int = DEFAULT_GROUPS, seed: int = 0):
        self.tau = Tensor(np.ones(1))
        self.gamma = Tensor(np.ones(n_in))
        self.beta = Tensor(np.zeros(n_in))
        self.rpsi = build_rpsi(n_in, hidden, blocks, groups, seed)
        self.n_in = n_in

    def __call__(self, x: Tensor) -> Tensor:
        return input_transform_forward(x, self)


def input_transform_forward(x: Tensor, p: InputTransform) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.n_in:
        raise ShapeError(f"input transform expects {p.n_in} channels, got shape {x.shape}")
    mixed = ad.add(ad.mul(p.tau, x), ad.mul(ad.sub(Tensor(1.0), p.tau), p.rpsi(x)))
    return channel_affine(mixed, p.gamma, p.beta)


# ---------------------------------------------------------------------------
# SSIM

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable correlation over the last two axes, keeping only full windows."""
    k = kernel.size
    rows = sliding_window_view(img, k, axis=-1) @ kernel
    return sliding_window_view(rows, k, axis=-2) @ kernel


def ssim_per_image(a, b, data_range: float = 1.0, window: int = SSIM_WINDOW,
                   sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Mean SSIM per image.

    (H, W) gives a 0-d result, (N, H, W) one value per image, and NCHW one
    value per sample with channels averaged together with the spatial map.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2 or a.shape[-1] < window or a.shape[-2] < window:
        raise ShapeError(f"ssim needs images of at least {window}x{window}, got {a.shape}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    kern = _gaussian_kernel(window, sigma)
    mu_a = _filter_valid(a, kern)
    mu_b = _filter_valid(b, kern)
    s_aa = _filter_valid(a * a, kern) - mu_a ** 2
    s_bb = _filter_valid(b * b, kern) - mu_b ** 2
    s_ab = _filter_valid(a * b, kern) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2)
    smap = num / den
    if a.ndim == 4:
        return smap.reshape(a.shape[0], -1).mean(axis=-1)
    return smap.reshape(*a.shape[:-2], -1).mean(axis=-1)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over sliding Gaussian windows (11x11, σ=1.5), symmetric in its arguments."""
    return float(np.mean(ssim_per_image(a, b, data_range)))
