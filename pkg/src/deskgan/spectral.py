"""Spectral normalization of weight matrices by power iteration.

Every conv/linear weight in both networks can be wrapped; the persistent
left-singular-vector estimate ``u`` tracks the slowly moving weights, so a
single power iteration per training step suffices.  ``u`` and ``v`` are
treated as constants during backward (no differentiation through the
iteration); gradient still flows through the division by the estimate.
"""

from __future__ import annotations

import logging

import numpy as np

from .tensor import Tensor, ShapeError, div, matmul, reshape, tsum, mul

logger = logging.getLogger(__name__)

_advance_enabled = True


class freeze_power_iteration:
    """Context manager suppressing u/v updates (e.g. the discriminator's
    forward inside the generator update)."""

    def __enter__(self):
        global _advance_enabled
        self._prev = _advance_enabled
        _advance_enabled = False
        return self

    def __exit__(self, *exc):
        global _advance_enabled
        _advance_enabled = self._prev
        return False


def advance_enabled() -> bool:
    return _advance_enabled


def reshape_to_matrix(w: Tensor) -> Tensor:
    """Flatten a conv or linear weight to [out_dim × in_dim·kh·kw].

    Out-channels become rows; the row-major flattening round-trips with
    ``matrix_to_weight``.
    """
    if w.ndim == 2:
        return w
    if w.ndim == 4:
        o = w.shape[0]
        return reshape(w, (o, int(np.prod(w.shape[1:]))))
    raise ShapeError(f"spectral norm expects 2-D or 4-D weights, got {w.shape}")


def matrix_to_weight(m: np.ndarray, shape: tuple) -> np.ndarray:
    """Inverse of :func:`reshape_to_matrix` on raw arrays."""
    return m.reshape(shape)


class SpectralNormState:
    """Persistent power-iteration state for one normalized weight.

    ``u`` has length out_dim and stays unit-norm; ``v`` is the matching
    right vector from the most recent iteration.  Both are checkpointed so
    resumed training is deterministic.
    """

    def __init__(self, w_mat: np.ndarray, rng: np.random.Generator,
                 power_iterations_per_step: int = 1, eps: float = 1e-12):
        if power_iterations_per_step < 1:
            raise ValueError("power_iterations_per_step must be positive")
        out_dim, in_dim = w_mat.shape
        u = rng.standard_normal(out_dim)
        self.u = (u / max(np.linalg.norm(u), eps)).astype(w_mat.dtype)
        self.power_iterations_per_step = int(power_iterations_per_step)
        self.eps = float(eps)
        self._warned_degenerate = False
        v = w_mat.T @ self.u
        nv = np.linalg.norm(v)
        if nv > eps:
            self.v = (v / nv).astype(w_mat.dtype)
        else:
            self.v = np.zeros(in_dim, dtype=w_mat.dtype)

    def advance(self, w_mat: np.ndarray) -> float:
        """Run the configured number of power iterations; returns σ̂."""
        sigma = 0.0
        for _ in range(self.power_iterations_per_step):
            sigma = self._one_step(w_mat)
        return sigma

    def _one_step(self, w_mat: np.ndarray) -> float:
        v = w_mat.T @ self.u
        nv = np.linalg.norm(v)
        if nv <= self.eps:
            # all-zero (or numerically dead) weight: u unchanged, sigma 0
            return 0.0
        v /= nv
        u = w_mat @ v
        nu = np.linalg.norm(u)
        if nu <= self.eps:
            return 0.0
        u /= nu
        self.u = u.astype(w_mat.dtype)
        self.v = v.astype(w_mat.dtype)
        return float(self.u @ (w_mat @ self.v))

    def sigma(self, w_mat: np.ndarray) -> float:
        return float(self.u @ (w_mat @ self.v))


def power_iteration_step(w_mat: np.ndarray, state: SpectralNormState) -> tuple[float, SpectralNormState]:
    """One explicit power-iteration update: v ← n(Wᵀu), u ← n(Wv), σ̂ = uᵀWv."""
    sigma = state._one_step(np.asarray(w_mat))
    return sigma, state


def normalized_weight(w: Tensor, state: SpectralNormState, training: bool) -> Tensor:
    """Weight divided by its estimated top singular value.

    In training mode the power iteration advances first (gated also by
    :class:`freeze_power_iteration`).  u and v enter the graph as constants,
    so backward differentiates w/σ̂(w) with σ̂ = uᵀWv.

    A σ̂ below ``state.eps`` (e.g. an all-zero weight) returns ``w``
    unchanged and logs a degeneracy warning once.
    """
    w_mat = reshape_to_matrix(w)
    if training and _advance_enabled:
        state.advance(w_mat.data)
    sigma_val = state.sigma(w_mat.data)
    if sigma_val < state.eps:
        if not state._warned_degenerate:
            logger.warning("spectral norm degenerate (sigma=%g) for weight of shape %s; "
                           "returning weight unchanged", sigma_val, tuple(w.shape))
            state._warned_degenerate = True
        return w
    u = Tensor(state.u.reshape(1, -1).astype(w.dtype))
    v = Tensor(state.v.reshape(-1, 1).astype(w.dtype))
    sigma = tsum(mul(u, transposed_matvec(w_mat, v)))
    return div(w, reshape(sigma, (1,) * w.ndim))


def transposed_matvec(w_mat: Tensor, v: Tensor) -> Tensor:
    """(W v)ᵀ as a [1 × out_dim] row, for the σ̂ = uᵀWv contraction."""
    wv = matmul(w_mat, v)
    return reshape(wv, (1, wv.shape[0]))


def spectral_norm_exact(w: np.ndarray) -> float:
    """SVD oracle: the true largest singular value (test/diagnostic path,
    never used inside training)."""
    mat = w.reshape(w.shape[0], -1) if w.ndim == 4 else w
    return float(np.linalg.svd(mat, compute_uv=False)[0])
