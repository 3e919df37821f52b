"""Self-attention over spatial locations of a feature map.

The block computes pairwise energies between all locations through two
learned projections, row-normalizes them into attention weights, aggregates
a third projection of the input under those weights, lifts the result back
to the full channel count, and blends it into the residual stream through a
learnable scalar gate that starts at zero (so a fresh block is the identity
and the network can open the gate gradually).
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError
from .layers import Module, orthogonal_init
from .spectral import SpectralNormState, normalized_weight, advance_enabled


class SelfAttentionBlock(Module):
    """Gated self-attention with a channel bottleneck.

    The query/key/value projections map C channels to C̄ = max(1, C/k)
    (default k=8, configurable to 1/2/4/8); a final C̄→C projection
    restores the channel count.  All four maps act as 1×1 convolutions and
    can be spectrally normalized.

    The query projection ``w_f`` starts at zero so a fresh block attends
    uniformly; the key projection is orthogonal, which un-sticks both
    within one update once the gate opens.
    """

    def __init__(self, channels: int, reduction: int = 8, spectral_norm: bool = False,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        if reduction < 1:
            raise ValueError(f"reduction must be positive, got {reduction}")
        rng = rng if rng is not None else np.random.default_rng(0)
        cbar = max(1, channels // reduction)
        self.w_f = Tensor(np.zeros((cbar, channels), dtype=dtype), requires_grad=True)
        self.w_g = Tensor(orthogonal_init(rng, (cbar, channels), dtype), requires_grad=True)
        self.w_h = Tensor(orthogonal_init(rng, (cbar, channels), dtype), requires_grad=True)
        self.w_v = Tensor(orthogonal_init(rng, (channels, cbar), dtype), requires_grad=True)
        self.gamma = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        self.channels = channels
        self.cbar = cbar
        self.reduction = reduction
        if spectral_norm:
            self.sn_f = SpectralNormState(self.w_f.data, rng)
            self.sn_g = SpectralNormState(self.w_g.data, rng)
            self.sn_h = SpectralNormState(self.w_h.data, rng)
            self.sn_v = SpectralNormState(self.w_v.data, rng)
        else:
            self.sn_f = self.sn_g = self.sn_h = self.sn_v = None
        # populated on forward when store_weights is on (viz export path)
        self.store_weights = False
        self.last_beta: Optional[np.ndarray] = None
        self.last_hw: Optional[tuple] = None

    def _proj(self, w: Tensor, sn: Optional[SpectralNormState]) -> Tensor:
        if sn is None:
            return w
        return normalized_weight(w, sn, self.training and advance_enabled())

    def attention_weights(self, x_flat: Tensor) -> Tensor:
        """Row-stochastic weights over source locations: out[b, j, i] is how
        much location i contributes when synthesizing location j."""
        if x_flat.ndim != 3 or x_flat.shape[1] != self.channels:
            raise ShapeError(f"attention block built for {self.channels} channels, "
                             f"got {x_flat.shape}")
        f = T.channel_map(self._proj(self.w_f, self.sn_f), x_flat)
        g = T.channel_map(self._proj(self.w_g, self.sn_g), x_flat)
        # energies s[i, j] = f_i · g_j laid out directly as [b, j, i]
        s_ji = T.bmm(T.transpose(g, (0, 2, 1)), f)
        return T.softmax_rows(s_ji)

    def attention_output(self, x_flat: Tensor, beta: Tensor) -> Tensor:
        """Aggregate value features under the given weights: [B×C×N]."""
        b, c, n = x_flat.shape
        if beta.shape != (b, n, n):
            raise ShapeError(f"attention weights shape {beta.shape} does not match "
                             f"input locations {(b, n, n)}")
        h = T.channel_map(self._proj(self.w_h, self.sn_h), x_flat)
        # agg[b, j, :] = Σ_i beta[b, j, i] · h[b, :, i]
        agg = T.transpose(T.bmm(beta, T.transpose(h, (0, 2, 1))), (0, 2, 1))
        return T.channel_map(self._proj(self.w_v, self.sn_v), agg)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"attention block built for {self.channels} channels, "
                             f"got input {x.shape}")
        b, c, h, w = x.shape
        x_flat = T.reshape(x, (b, c, h * w))
        beta = self.attention_weights(x_flat)
        if self.store_weights:
            self.last_beta = beta.data.copy()
            self.last_hw = (h, w)
        o = T.reshape(self.attention_output(x_flat, beta), (b, c, h, w))
        return T.gated_residual(x, o, self.gamma)

    __call__ = forward

    def attention_map_for_query(self, x: Tensor, query_location: tuple) -> Tensor:
        """The attention row for one query location, reshaped to the input
        geometry: nonnegative, sums to 1."""
        if x.ndim != 4:
            raise ShapeError(f"expected [B×C×H×W], got {x.shape}")
        b, c, h, w = x.shape
        qi, qj = query_location
        if not (0 <= qi < h and 0 <= qj < w):
            raise IndexError(f"query location {query_location} outside {h}×{w}")
        with T.no_grad():
            beta = self.attention_weights(T.reshape(x, (b, c, h * w)))
        row = beta.data[0, qi * w + qj]
        return Tensor(row.reshape(h, w))

    def parameter_count(self) -> int:
        return 4 * self.channels * self.cbar + 1
