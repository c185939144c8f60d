"""Fourier-domain style augmentation.

Images here are arrays whose last two axes are spatial (``(H, W)``,
``(C, H, W)`` or ``(N, C, H, W)``); every transform acts per channel.
Spectra are stored DC-centered (``fftshift`` layout).
"""
import logging
from dataclasses import dataclass

import numpy as np

from .engine.tensor import Tensor, as_tensor, make_node
from .errors import RejectedInputError

log = logging.getLogger(__name__)

DERANGEMENT_RETRIES = 8


@dataclass
class Spectrum:
    amplitude: np.ndarray
    phase: np.ndarray

    @property
    def shape(self):
        return self.amplitude.shape


@dataclass
class AugConfig:
    beta_max: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.beta_max <= 0.5:
            raise RejectedInputError(f"beta_max must be in (0, 0.5], got {self.beta_max}")


def _check_field(x):
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise RejectedInputError(f"spectral transforms need spatial sides >= 2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise RejectedInputError("spectral transforms need finite input")
    return x


def _to_complex(spec):
    return spec.amplitude * np.exp(1j * spec.phase)


def fft2(field, direction="forward"):
    """Forward: real field -> DC-centered :class:`Spectrum`. Inverse: the reverse."""
    if direction == "forward":
        x = _check_field(field)
        coeffs = np.fft.fftshift(np.fft.fft2(x, axes=(-2, -1)), axes=(-2, -1))
        return Spectrum(np.abs(coeffs), np.angle(coeffs))
    if direction == "inverse":
        if not isinstance(field, Spectrum):
            raise RejectedInputError("inverse fft2 expects a Spectrum")
        if not (np.all(np.isfinite(field.amplitude)) and np.all(np.isfinite(field.phase))):
            raise RejectedInputError("spectrum contains non-finite values")
        coeffs = np.fft.ifftshift(_to_complex(field), axes=(-2, -1))
        out = np.fft.ifft2(coeffs, axes=(-2, -1))
        scale = max(float(np.abs(out.real).max()), 1e-30)
        resid = float(np.abs(out.imag).max())
        if resid > 1e-6 * scale:
            log.debug("inverse fft2 dropped imaginary residual %.3g (signal %.3g)", resid, scale)
        return out.real
    raise RejectedInputError(f"unknown fft direction {direction!r}")


def low_freq_mask(height, width, beta):
    """Boolean DC-centered rectangle of side ``2*floor(beta*side/2)+1``."""
    if not 0.0 < beta <= 0.5:
        raise RejectedInputError(f"beta must be in (0, 0.5], got {beta}")
    rh = int(np.floor(beta * height / 2))
    rw = int(np.floor(beta * width / 2))
    ch, cw = height // 2, width // 2
    mask = np.zeros((height, width), dtype=bool)
    mask[ch - rh:ch + rh + 1, cw - rw:cw + rw + 1] = True
    return mask


def amplitude_swap(x, x_ref, beta):
    """Replace the low-frequency amplitude of ``x`` with that of ``x_ref``.

    Phase is kept everywhere, so structure survives while the coarse
    intensity layout (the "style") follows ``x_ref``.
    """
    x = _check_field(x)
    x_ref = _check_field(x_ref)
    if x.shape != x_ref.shape:
        raise RejectedInputError(f"amplitude_swap shape mismatch: {x.shape} vs {x_ref.shape}")
    mask = low_freq_mask(x.shape[-2], x.shape[-1], beta)
    spec = fft2(x)
    ref = fft2(x_ref)
    amp = np.where(mask, ref.amplitude, spec.amplitude)
    return fft2(Spectrum(amp, spec.phase), "inverse").astype(x.dtype, copy=False)


def draw_permutation(n, rng):
    """Random permutation, redrawn up to 8 times while it has fixed points."""
    perm = rng.permutation(n)
    if n < 2:
        return perm
    for _ in range(DERANGEMENT_RETRIES):
        if not np.any(perm == np.arange(n)):
            break
        perm = rng.permutation(n)
    return perm


def batch_style_permute(batch, config, seed=None):
    """Style-augment each image with the low-frequency amplitude of a peer.

    Returns ``(augmented, perm, betas)`` where ``augmented[n]`` is
    ``amplitude_swap(batch[n], batch[perm[n]], betas[n])``.
    """
    batch = [np.asarray(b) for b in batch]
    if not batch:
        raise RejectedInputError("batch_style_permute needs a non-empty batch")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    perm = draw_permutation(len(batch), rng)
    # 1 - U[0,1) lies in (0, 1], so beta covers (0, beta_max]
    betas = config.beta_max * (1.0 - rng.random(len(batch)))
    out = [amplitude_swap(batch[n], batch[perm[n]], betas[n]) for n in range(len(batch))]
    return out, perm, betas


# ---------------------------------------------------------------------------
# differentiable amplitude-domain prompt (frequency-space ablation)

def amplitude_prompt(x, prompt, combine_op):
    """Apply ``prompt`` to the DC-centered amplitude of ``x`` and invert.

    ``x`` is (N, C, H, W) and treated as a constant; the prompt is (C, H, W)
    and receives gradient. ``combine_op`` is ``"add"`` or ``"mul"``.
    """
    x = as_tensor(x)
    prompt = as_tensor(prompt)
    if x.requires_grad:
        raise RejectedInputError("frequency-space prompting does not propagate gradient to the image")
    spec = fft2(x.data)
    if combine_op == "add":
        amp = spec.amplitude + prompt.data
    elif combine_op == "mul":
        amp = spec.amplitude * prompt.data
    else:
        raise RejectedInputError(f"unknown combine_op {combine_op!r}")
    out = fft2(Spectrum(amp, spec.phase), "inverse").astype(x.dtype, copy=False)

    def backward(g):
        # d out / d amp[k] = Re(e^{i phase_k} * ifft2(g)_k) in centered layout
        back = np.fft.fftshift(np.fft.ifft2(g, axes=(-2, -1)), axes=(-2, -1))
        g_amp = np.real(np.exp(1j * spec.phase) * back)
        if combine_op == "mul":
            g_amp = g_amp * spec.amplitude
        return None, g_amp.sum(axis=0).astype(prompt.dtype)

    return make_node(out, (x, prompt), backward)


__all__ = [
    "AugConfig", "Spectrum", "Tensor", "amplitude_prompt", "amplitude_swap",
    "batch_style_permute", "draw_permutation", "fft2", "low_freq_mask",
]
