"""Shared per-timestamp deformation network D(mu, t) -> (d_pos, d_rot, d_scale).

A tanh MLP over frequency-encoded position and time.  The three output
heads are zero-initialized so a fresh field is exactly the identity warp,
which keeps joint training with the cross-time encoder stable and gives the
step-0 equality both training branches rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import dgsplat.autodiff as ad
from dgsplat.autodiff import DTensor


@dataclass(frozen=True)
class FrequencyEncoder:
    """Sinusoidal feature map: k input channels -> k*2L channels."""

    octaves: int = 6

    @property
    def width_per_channel(self) -> int:
        return 2 * self.octaves

    def __call__(self, p: DTensor) -> DTensor:
        return encode(p, self.octaves)


def encode(p, octaves: int) -> DTensor:
    """Per channel: (sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^{L-1} pi p), cos(...)).

    Input (..., k) maps to (..., k*2L) with each channel's sin/cos pairs
    interleaved by octave and channels kept contiguous.
    """
    p = ad.as_dtensor(p)
    freqs = (2.0 ** np.arange(octaves)) * np.pi
    scaled = ad.mul(ad.reshape(p, (*p.shape, 1)), DTensor(freqs))  # (..., k, L)
    s, c = ad.sin(scaled), ad.cos(scaled)
    inter = ad.stack([s, c], axis=-1)  # (..., k, L, 2)
    return ad.reshape(inter, (*p.shape[:-1], p.shape[-1] * 2 * octaves))


class DeformationField:
    """MLP deformation field with zero-initialized residual heads.

    Trunk: depth hidden layers of the given width with tanh activations
    (smooth everywhere, so gradient checks are clean).  Heads emit position
    (3), rotation (4), and log-scale (3) residuals.
    """

    def __init__(self, rng: np.random.Generator, octaves: int = 6,
                 depth: int = 6, width: int = 128):
        self.octaves = octaves
        self.depth = depth
        self.width = width
        self.in_width = 8 * octaves  # 3*2L position + 2L time channels
        self.params: dict[str, DTensor] = {}

        prev = self.in_width
        for i in range(depth):
            self._add(f"w{i}", _glorot(rng, prev, width))
            self._add(f"b{i}", np.zeros(width))
            prev = width
        for head, out in (("pos", 3), ("rot", 4), ("scale", 3)):
            self._add(f"head_{head}_w", np.zeros((width, out)))
            self._add(f"head_{head}_b", np.zeros(out))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = DTensor(value, requires_grad=True)

    def parameters(self) -> dict[str, DTensor]:
        return dict(self.params)

    def copy(self) -> "DeformationField":
        """Independent field with identical parameter values."""
        dup = DeformationField.__new__(DeformationField)
        dup.octaves, dup.depth, dup.width = self.octaves, self.depth, self.width
        dup.in_width = self.in_width
        dup.params = {k: DTensor(v.data.copy(), requires_grad=True)
                      for k, v in self.params.items()}
        return dup

    def deform(self, positions: DTensor, t) -> tuple[DTensor, DTensor, DTensor]:
        """Residuals (d_pos, d_rot, d_scale) for N positions at one timestamp.

        ``t`` is a scalar in [0, 1] (float or DTensor); gradients flow to
        positions, t, and every parameter.
        """
        positions = ad.as_dtensor(positions)
        t = ad.as_dtensor(t)
        n = positions.shape[0]
        pe_pos = encode(positions, self.octaves)                      # (N, 6L)
        pe_t = encode(ad.reshape(t, (1, 1)), self.octaves)            # (1, 2L)
        h = ad.concat([pe_pos, ad.broadcast_to(pe_t, (n, 2 * self.octaves))], axis=1)
        for i in range(self.depth):
            h = ad.tanh(ad.add(ad.matmul(h, self.params[f"w{i}"]), self.params[f"b{i}"]))
        return (
            ad.add(ad.matmul(h, self.params["head_pos_w"]), self.params["head_pos_b"]),
            ad.add(ad.matmul(h, self.params["head_rot_w"]), self.params["head_rot_b"]),
            ad.add(ad.matmul(h, self.params["head_scale_w"]), self.params["head_scale_b"]),
        )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))
