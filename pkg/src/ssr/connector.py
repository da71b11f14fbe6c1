"""Feature projection, causal/blockwise decoding, and boundary selection.

The compression pipeline is: project n x D speech frames to the model
dimension, transform them with a causal decoder stack, then keep only the
rows at the boundary indices, one per token.  Because each decoder output
row summarizes everything up to its frame, the boundary row stands in for
the whole chunk.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .alignment import BoundaryIndices, FeatureSequence
from .errors import NumericError
from .nn import (
    DecoderConfig,
    decoder_backward_pass,
    decoder_forward_pass,
    init_decoder_tensors,
    uniform_init,
)
from .numerics import require_finite

__all__ = [
    "AttentionMask",
    "CompressedRepresentation",
    "ConnectorParams",
    "DecoderConfig",
    "blockwise_mask",
    "causal_mask",
    "connect",
    "connect_backward",
    "connect_forward",
    "decoder_forward",
    "project",
    "select_at_boundaries",
]


@dataclass
class AttentionMask:
    """Boolean attention permissions; entry (t, s) means t may attend s."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=bool)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"mask must be square, got shape {self.values.shape}")
        if not np.all(np.diag(self.values)):
            raise ValueError("mask diagonal must be all true")
        if np.any(np.triu(self.values, k=1)):
            raise ValueError("mask must be causal: no attention above the diagonal")

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass
class CompressedRepresentation:
    """One row per token, selected from decoder outputs at the boundaries."""

    rows: np.ndarray
    boundaries: BoundaryIndices

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError("rows must form a 2-D matrix")
        if not np.all(np.isfinite(self.rows)):
            # These rows come out of the decoder; non-finite values mean the
            # computation diverged rather than that the input was malformed.
            raise NumericError("compressed rows contain non-finite values")
        if self.rows.shape[0] != len(self.boundaries):
            raise ValueError(
                f"{self.rows.shape[0]} rows do not match {len(self.boundaries)} boundaries"
            )

    @property
    def token_count(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


class ConnectorParams:
    """Projection plus decoder tensors, addressed by name.

    Tensor names are ``proj.weight``, ``proj.bias``, and the decoder group
    under the ``dec.`` prefix.  Initialization is fully determined by
    (input_dim, config.seed).
    """

    DEC_PREFIX = "dec."

    def __init__(self, input_dim: int, config: DecoderConfig, tensors: dict):
        if input_dim < 1:
            raise ValueError("input_dim must be positive")
        self.input_dim = input_dim
        self.config = config
        self.tensors = tensors
        self._check_shapes()

    @classmethod
    def create(cls, input_dim: int, config: DecoderConfig) -> "ConnectorParams":
        rng = np.random.default_rng(config.seed)
        tensors = {
            "proj.weight": uniform_init(rng, (input_dim, config.model_dim), input_dim),
            "proj.bias": np.zeros(config.model_dim),
        }
        tensors.update(init_decoder_tensors(config, rng, prefix=cls.DEC_PREFIX))
        return cls(input_dim, config, tensors)

    def _check_shapes(self):
        w = self.tensors.get("proj.weight")
        b = self.tensors.get("proj.bias")
        if w is None or b is None:
            raise ValueError("connector tensors must include proj.weight and proj.bias")
        if w.shape != (self.input_dim, self.config.model_dim):
            raise ValueError(f"proj.weight shape {w.shape} inconsistent with config")
        if b.shape != (self.config.model_dim,):
            raise ValueError(f"proj.bias shape {b.shape} inconsistent with config")
        for name, arr in self.tensors.items():
            require_finite(arr, name)


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


def causal_mask(n: int) -> AttentionMask:
    """Full lower-triangular mask: every frame attends to all earlier frames."""
    if n < 1:
        raise ValueError("mask size must be positive")
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)))


def blockwise_mask(boundaries: BoundaryIndices, n: int) -> AttentionMask:
    """Causal mask restricted to each frame's own alignment chunk."""
    if boundaries.frame_count != n:
        raise ValueError(
            f"boundaries end at frame {boundaries.indices[-1]} but sequence has {n} frames"
        )
    chunk = np.searchsorted(np.asarray(boundaries.indices), np.arange(n))
    same_chunk = chunk[:, None] == chunk[None, :]
    causal = np.tril(np.ones((n, n), dtype=bool))
    return AttentionMask(same_chunk & causal)


# ---------------------------------------------------------------------------
# Forward operations
# ---------------------------------------------------------------------------


def project(features: FeatureSequence, params: ConnectorParams) -> np.ndarray:
    """Affine map of each frame into the decoder's model dimension."""
    if features.dim != params.input_dim:
        raise ValueError(
            f"feature dim {features.dim} does not match projection input {params.input_dim}"
        )
    return features.frames @ params.tensors["proj.weight"] + params.tensors["proj.bias"]


def decoder_forward(
    x: np.ndarray,
    params: ConnectorParams,
    mask: Union[AttentionMask, np.ndarray],
) -> np.ndarray:
    """Decoder stack over projected features; mask must be causal."""
    if not isinstance(mask, AttentionMask):
        mask = AttentionMask(mask)
    out, _ = decoder_forward_pass(
        params.tensors, params.config, np.asarray(x, dtype=np.float64), mask.values,
        prefix=ConnectorParams.DEC_PREFIX,
    )
    return out


def select_at_boundaries(g: np.ndarray, boundaries: BoundaryIndices) -> CompressedRepresentation:
    """Keep the decoder output row at each boundary index."""
    g = np.asarray(g)
    if boundaries.frame_count != g.shape[0]:
        raise ValueError(
            f"boundaries end at frame {boundaries.indices[-1]} but input has {g.shape[0]} rows"
        )
    rows = g[np.asarray(boundaries.indices)]
    return CompressedRepresentation(rows, boundaries)


def connect(
    features: FeatureSequence,
    boundaries: BoundaryIndices,
    params: ConnectorParams,
    use_blockwise: bool = False,
) -> CompressedRepresentation:
    """Project, decode, and select: n x D frames down to one row per token."""
    compressed, _ = connect_forward(features, boundaries, params, use_blockwise)
    return compressed


# ---------------------------------------------------------------------------
# Training path (forward with cache, then backward)
# ---------------------------------------------------------------------------


def connect_forward(
    features: FeatureSequence,
    boundaries: BoundaryIndices,
    params: ConnectorParams,
    use_blockwise: bool = False,
):
    """Like `connect` but also returns the cache needed for backprop."""
    n = features.num_frames
    if boundaries.frame_count != n:
        raise ValueError(
            f"boundaries cover {boundaries.frame_count} frames, features have {n}"
        )
    mask = blockwise_mask(boundaries, n) if use_blockwise else causal_mask(n)
    projected = project(features, params)
    decoded, dec_cache = decoder_forward_pass(
        params.tensors, params.config, projected, mask.values,
        prefix=ConnectorParams.DEC_PREFIX,
    )
    compressed = select_at_boundaries(decoded, boundaries)
    cache = (features, boundaries, dec_cache, decoded.shape)
    return compressed, cache


def connect_backward(params: ConnectorParams, cache, d_rows: np.ndarray) -> dict:
    """Gradients of all connector tensors given d(loss)/d(compressed rows)."""
    features, boundaries, dec_cache, decoded_shape = cache
    d_decoded = np.zeros(decoded_shape)
    d_decoded[np.asarray(boundaries.indices)] = d_rows
    d_projected, grads = decoder_backward_pass(
        params.tensors, params.config, dec_cache, d_decoded,
        prefix=ConnectorParams.DEC_PREFIX,
    )
    grads["proj.weight"] = features.frames.T @ d_projected
    grads["proj.bias"] = d_projected.sum(axis=0)
    return grads
