"""Cross-time transformer encoder producing per-timestamp position offsets.

Each Gaussian contributes one sequence whose tokens are the B sampled
timestamps; self-attention runs along that time axis only (the Gaussian
axis is a pure batch axis).  Token features are the concatenated frequency
encodings of the canonical position and the token's timestamp, and a
zero-initialized linear head turns the last layer's features into offsets
O in R^{B x N x 3} that shift the deformation field's input positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import dgsplat.autodiff as ad
from dgsplat.autodiff import ContractError, DTensor, NumericError
from dgsplat.deform import encode


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 4
    n_heads: int = 4
    octaves: int = 6        # shared with the deformation field's PE
    d_hidden: int = 192
    time_batch: int = 4     # default B; runtime batches may differ

    @property
    def d_model(self) -> int:
        return 8 * self.octaves  # 3*2L position + 2L time channels

    def __post_init__(self):
        if self.n_layers < 1 or self.time_batch < 1:
            raise ContractError("encoder needs n_layers >= 1 and time_batch >= 1")
        if self.d_model % self.n_heads:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


class CrossTimeEncoder:
    """M post-norm encoder layers over the time axis plus an offset head."""

    def __init__(self, rng: np.random.Generator, config: EncoderConfig = EncoderConfig()):
        self.config = config
        self.params: dict[str, DTensor] = {}
        self.forward_calls = 0  # instrumentation: inference must never touch this

        d, h = config.d_model, config.d_hidden
        for m in range(config.n_layers):
            for name in ("q", "k", "v", "o"):
                self._add(f"layer{m}.w{name}", _glorot(rng, d, d))
                self._add(f"layer{m}.b{name}", np.zeros(d))
            self._add(f"layer{m}.ff1_w", _glorot(rng, d, h))
            self._add(f"layer{m}.ff1_b", np.zeros(h))
            self._add(f"layer{m}.ff2_w", _glorot(rng, h, d))
            self._add(f"layer{m}.ff2_b", np.zeros(d))
            for ln in ("ln1", "ln2"):
                self._add(f"layer{m}.{ln}_g", np.ones(d))
                self._add(f"layer{m}.{ln}_b", np.zeros(d))
        self._add("head_w", np.zeros((d, 3)))
        self._add("head_b", np.zeros(3))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = DTensor(value, requires_grad=True)

    def parameters(self) -> dict[str, DTensor]:
        return dict(self.params)

    # ------------------------------------------------------------------

    def build_input(self, positions: DTensor, timestamps: DTensor) -> DTensor:
        """Token grid F_0 (B, N, 8L): row (b, n) = concat(PE(mu_n), PE(t_b))."""
        positions = ad.as_dtensor(positions)
        timestamps = ad.as_dtensor(timestamps)
        n = positions.shape[0]
        b = timestamps.shape[0]
        if n == 0 or b == 0:
            raise ContractError(f"build_input needs N >= 1 and B >= 1, got N={n} B={b}")
        octaves = self.config.octaves
        pe_pos = encode(positions, octaves)                                # (N, 6L)
        pe_pos = ad.broadcast_to(ad.reshape(pe_pos, (1, n, 6 * octaves)), (b, n, 6 * octaves))
        pe_t = encode(ad.reshape(timestamps, (b, 1)), octaves)            # (B, 2L)
        pe_t = ad.broadcast_to(ad.reshape(pe_t, (b, 1, 2 * octaves)), (b, n, 2 * octaves))
        return ad.concat([pe_pos, pe_t], axis=2)

    def layer_forward(self, f: DTensor, m: int) -> DTensor:
        """One post-norm encoder layer: F <- LN(F+MSA(F)); F <- LN(F+FFN(F))."""
        cfg = self.config
        p = self.params
        b, n, d = f.shape
        heads, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

        x = ad.transpose(f, (1, 0, 2))  # (N, B, D): B is the attention axis
        q = ad.add(ad.matmul(x, p[f"layer{m}.wq"]), p[f"layer{m}.bq"])
        k = ad.add(ad.matmul(x, p[f"layer{m}.wk"]), p[f"layer{m}.bk"])
        v = ad.add(ad.matmul(x, p[f"layer{m}.wv"]), p[f"layer{m}.bv"])

        def split(t):  # (N, B, D) -> (N, H, B, Dh)
            return ad.transpose(ad.reshape(t, (n, b, heads, dh)), (0, 2, 1, 3))

        q, k, v = split(q), split(k), split(v)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = ad.softmax(scores, axis=-1)                 # (N, H, B, B)
        ctx = ad.matmul(att, v)                           # (N, H, B, Dh)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, b, d))
        msa = ad.add(ad.matmul(ctx, p[f"layer{m}.wo"]), p[f"layer{m}.bo"])
        msa = ad.transpose(msa, (1, 0, 2))                # back to (B, N, D)

        f = ad.layer_norm(ad.add(f, msa), p[f"layer{m}.ln1_g"], p[f"layer{m}.ln1_b"])
        ff = ad.tanh(ad.add(ad.matmul(f, p[f"layer{m}.ff1_w"]), p[f"layer{m}.ff1_b"]))
        ff = ad.add(ad.matmul(ff, p[f"layer{m}.ff2_w"]), p[f"layer{m}.ff2_b"])
        f = ad.layer_norm(ad.add(f, ff), p[f"layer{m}.ln2_g"], p[f"layer{m}.ln2_b"])
        if not np.isfinite(f.data).all():
            raise NumericError(f"non-finite activation after encoder layer {m}")
        return f

    def offsets(self, positions: DTensor, timestamps: DTensor) -> DTensor:
        """Per-Gaussian, per-timestamp position offsets O (B, N, 3)."""
        self.forward_calls += 1
        f = self.build_input(positions, timestamps)
        for m in range(self.config.n_layers):
            f = self.layer_forward(f, m)
        return ad.add(ad.matmul(f, self.params["head_w"]), self.params["head_b"])


def coupled_deform(gauss_positions: DTensor, timestamps: DTensor,
                   field, encoder: CrossTimeEncoder) -> list:
    """Deformation residuals with the encoder's offsets on the field input.

    For each batch index i the field is evaluated at mu + O_i (not at mu),
    so the tape carries the extra dO/dmu coupling term: a loss at one
    timestamp propagates to every token's features.
    """
    offs = encoder.offsets(gauss_positions, timestamps)
    out = []
    for i in range(timestamps.shape[0]):
        a_i = ad.add(gauss_positions, ad.take(offs, i, axis=0))
        t_i = ad.take(timestamps, i, axis=0)
        out.append(field.deform(a_i, t_i))
    return out


def estimated_activation_bytes(config: EncoderConfig, b: int, n: int,
                               scalar_bytes: int = 8) -> int:
    """Upper estimate of tape-retained activation memory for one forward.

    Attention retains O(M * B^2 * N * d_model / heads_ratio) score tensors
    plus the (B, N, *) feature tensors; this counts every recorded array.
    """
    d, h, heads = config.d_model, config.d_hidden, config.n_heads
    per_layer = (
        12 * b * n * d        # qkv/proj/residual/norm intermediates
        + 3 * heads * n * b * b  # scores, softmax internals
        + heads * n * b * (d // heads) * 3
        + 2 * b * n * h       # feed-forward pair
    )
    tokens = 3 * b * n * d    # input assembly
    return scalar_bytes * (tokens + config.n_layers * per_layer + b * n * 3)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))
