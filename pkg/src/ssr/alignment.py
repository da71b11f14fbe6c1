"""Monotonic speech-text alignment backends and boundary extraction.

Three ways to obtain a frame-to-token alignment are provided:

* a soft-alignment route (distance matrix + near-diagonal prior, then a
  monotonic alignment search over the combined matrix),
* forced alignment through a CTC state lattice (Viterbi with backtracking),
* integrate-and-fire segmentation driven by per-frame weights.

All three produce the same artifacts: a monotone, surjective assignment of
frames to token positions and the derived boundary indices (the last frame
of each token's chunk).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import betabinom

from .numerics import NEG_INF, require_finite, softmax


def _as_matrix(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class FeatureSequence:
    """A sequence of n speech frames, each a D-dimensional real vector."""

    frames: np.ndarray
    frame_duration_ms: float = 20.0

    def __post_init__(self):
        self.frames = _as_matrix(self.frames, "frames")
        n, dim = self.frames.shape
        if n < 1 or dim < 1:
            raise ValueError(f"frames must be at least 1x1, got {n}x{dim}")
        require_finite(self.frames, "frames")
        if not self.frame_duration_ms > 0:
            raise ValueError("frame_duration_ms must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class TokenSequence:
    """Transcription token ids drawn from a fixed-size vocabulary."""

    ids: tuple
    vocab_size: int
    surface: Optional[tuple] = None

    def __post_init__(self):
        self.ids = tuple(int(i) for i in self.ids)
        if len(self.ids) < 1:
            raise ValueError("token sequence must contain at least one id")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        for i in self.ids:
            if i < 0 or i >= self.vocab_size:
                raise ValueError(f"token id {i} out of range for vocab of {self.vocab_size}")
        if self.surface is not None:
            self.surface = tuple(str(s) for s in self.surface)
            if len(self.surface) != len(self.ids):
                raise ValueError("surface strings must match the number of ids")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class DistanceMatrix:
    """Pairwise text-position x unit-position distances (non-negative)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _as_matrix(self.values, "distance matrix")
        require_finite(self.values, "distance matrix")
        if np.any(self.values < 0):
            raise ValueError("distance matrix entries must be non-negative")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class PriorMatrix:
    """Column-stochastic prior over text positions for each unit position."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _as_matrix(self.values, "prior matrix")
        require_finite(self.values, "prior matrix")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("prior entries must lie in [0, 1]")
        sums = self.values.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError("each prior column must sum to 1 within 1e-9")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class SoftAlignmentMatrix:
    """Strictly positive alignment scores (softmax of -distance plus prior)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _as_matrix(self.values, "soft alignment matrix")
        require_finite(self.values, "soft alignment matrix")
        if np.any(self.values <= 0):
            raise ValueError("soft alignment entries must be strictly positive")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class AlignmentPath:
    """Monotone, surjective assignment of positions to token indices.

    ``assignment[t]`` is the token index owning position t.  The assignment
    must start at token 0, advance in steps of at most one, and reach the
    final token, so every token owns at least one contiguous span.
    """

    assignment: tuple
    score: Optional[float] = None
    emissions: Optional[tuple] = None

    def __post_init__(self):
        self.assignment = tuple(int(a) for a in self.assignment)
        if len(self.assignment) < 1:
            raise ValueError("assignment must cover at least one position")
        if self.assignment[0] != 0:
            raise ValueError("assignment must start at token 0")
        for prev, cur in zip(self.assignment, self.assignment[1:]):
            if cur - prev not in (0, 1):
                raise ValueError("assignment must be monotone with unit steps")
        if self.emissions is not None:
            self.emissions = tuple(int(e) for e in self.emissions)
            if len(self.emissions) != len(self.assignment):
                raise ValueError("emissions must match assignment length")

    @property
    def num_positions(self) -> int:
        return len(self.assignment)

    @property
    def token_count(self) -> int:
        return self.assignment[-1] + 1

    @property
    def spans(self) -> list:
        """Inclusive (start, end) position span per token, in token order."""
        out = []
        start = 0
        for pos in range(1, len(self.assignment)):
            if self.assignment[pos] != self.assignment[pos - 1]:
                out.append((start, pos - 1))
                start = pos
        out.append((start, len(self.assignment) - 1))
        return out


@dataclass
class BoundaryIndices:
    """Strictly increasing last-frame index of each token's chunk.

    By construction the final index equals n - 1, so the covered frame count
    is recoverable from the boundaries alone.
    """

    indices: tuple

    def __post_init__(self):
        self.indices = tuple(int(i) for i in self.indices)
        if len(self.indices) < 1:
            raise ValueError("boundary list must not be empty")
        if self.indices[0] < 0:
            raise ValueError("boundary indices must be non-negative")
        for prev, cur in zip(self.indices, self.indices[1:]):
            if cur <= prev:
                raise ValueError("boundary indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def frame_count(self) -> int:
        return self.indices[-1] + 1

    def chunk_of(self, frame: int) -> int:
        """Index of the chunk containing `frame` (chunks end at each boundary)."""
        if frame < 0 or frame >= self.frame_count:
            raise ValueError(f"frame {frame} outside 0..{self.frame_count - 1}")
        return int(np.searchsorted(np.asarray(self.indices), frame))


@dataclass
class CifWeights:
    """Per-frame accumulation weights and the firing threshold."""

    alphas: np.ndarray
    threshold: float = 1.0

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        if self.alphas.size < 1:
            raise ValueError("weights must cover at least one frame")
        require_finite(self.alphas, "weights")
        if np.any(self.alphas <= 0) or np.any(self.alphas >= 1):
            raise ValueError("weights must lie strictly inside (0, 1)")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")


# ---------------------------------------------------------------------------
# Soft-alignment construction
# ---------------------------------------------------------------------------


def build_distance_matrix(text_enc, unit_enc) -> DistanceMatrix:
    """Pairwise Euclidean distances between text and unit encoding rows.

    Args:
        text_enc: V x E matrix, one row per text position.
        unit_enc: U x E matrix, one row per unit (frame) position.

    Returns:
        DistanceMatrix with entry (i, j) = ||text_enc[i] - unit_enc[j]||_2.
    """
    text = _as_matrix(text_enc, "text_enc")
    unit = _as_matrix(unit_enc, "unit_enc")
    require_finite(text, "text_enc")
    require_finite(unit, "unit_enc")
    if text.shape[1] != unit.shape[1]:
        raise ValueError(
            f"encoding dims differ: text_enc has {text.shape[1]}, unit_enc has {unit.shape[1]}"
        )
    diff = text[:, None, :] - unit[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    return DistanceMatrix(dist)


def beta_binomial_prior(num_text: int, num_units: int, omega: float = 1.0) -> PriorMatrix:
    """Near-diagonal prior over text positions for each unit position.

    Column j holds the Beta-binomial pmf with num_text - 1 trials and shape
    parameters (omega * (j + 1), omega * (num_units - j)), which peaks near
    the diagonal and sharpens as omega grows.
    """
    if num_text < 1 or num_units < 1:
        raise ValueError("matrix dimensions must be positive")
    if not omega > 0:
        raise ValueError("omega must be positive")
    rows = np.arange(num_text)
    cols = np.arange(1, num_units + 1)
    a = omega * cols
    b = omega * (num_units + 1 - cols)
    # betabinom broadcasts over (row, column) grids; columns are the trials axis.
    pmf = betabinom.pmf(rows[:, None], num_text - 1, a[None, :], b[None, :])
    # Renormalize away pmf round-off so columns sum to 1 tightly.
    pmf = pmf / pmf.sum(axis=0, keepdims=True)
    return PriorMatrix(pmf)


def soft_alignment(dist: DistanceMatrix, prior) -> SoftAlignmentMatrix:
    """Column-softmax of negative distances plus the additive prior.

    `prior` is normally a PriorMatrix; a raw array of the same shape is
    accepted for experiments that zero out or reshape the prior.
    """
    prior_values = prior.values if isinstance(prior, PriorMatrix) else _as_matrix(prior, "prior")
    require_finite(prior_values, "prior")
    if np.any(prior_values < 0) or np.any(prior_values > 1):
        raise ValueError("prior entries must lie in [0, 1]")
    if prior_values.shape != dist.values.shape:
        raise ValueError(
            f"shape mismatch: distances {dist.values.shape} vs prior {prior_values.shape}"
        )
    scores = softmax(-dist.values, axis=0) + prior_values
    return SoftAlignmentMatrix(scores)


# ---------------------------------------------------------------------------
# Monotonic alignment search
# ---------------------------------------------------------------------------


def monotonic_alignment_search(soft: SoftAlignmentMatrix) -> AlignmentPath:
    """Best monotone surjective path through a soft-alignment matrix.

    Maximizes the summed log score over assignments of each unit column to a
    text row, where the row index never decreases, starts at 0, and ends at
    V - 1.  Ties prefer remaining at the current text row, deferring
    advancement, which makes the output deterministic.
    """
    values = soft.values
    num_text, num_units = values.shape
    if num_text > num_units:
        raise ValueError(
            f"no monotone surjective path: {num_text} text positions exceed {num_units} units"
        )
    log_scores = np.log(values)

    best = np.full((num_text, num_units), NEG_INF)
    advanced = np.zeros((num_text, num_units), dtype=bool)
    best[0, 0] = log_scores[0, 0]
    for j in range(1, num_units):
        stay = best[:, j - 1]
        advance = np.concatenate(([NEG_INF], best[:-1, j - 1]))
        # On ties, credit the advance predecessor: walking the path forward,
        # that defers every advancement to the latest feasible unit, i.e. the
        # path remains at its current text position as long as possible.
        take_advance = advance >= stay
        take_advance[0] = False  # row 0 has no predecessor row
        best[:, j] = log_scores[:, j] + np.where(take_advance, advance, stay)
        advanced[:, j] = take_advance

    score = best[num_text - 1, num_units - 1]
    if score <= NEG_INF / 2:
        raise ValueError("soft alignment admits no feasible monotone path")

    assignment = np.empty(num_units, dtype=np.int64)
    row = num_text - 1
    for j in range(num_units - 1, -1, -1):
        assignment[j] = row
        if advanced[row, j]:
            row -= 1
    if row != 0:
        raise ValueError("internal error: backtrack did not reach the first text position")
    return AlignmentPath(tuple(assignment), score=float(score))


# ---------------------------------------------------------------------------
# CTC forced alignment
# ---------------------------------------------------------------------------


def ctc_min_frames(ids: Sequence[int]) -> int:
    """Minimum frame count that can express `ids` (repeats need a blank)."""
    repeats = sum(1 for a, b in zip(ids, ids[1:]) if a == b)
    return len(ids) + repeats


def ctc_forced_align(logprobs, targets: TokenSequence) -> AlignmentPath:
    """Highest-probability frame labelling that collapses to `targets`.

    Args:
        logprobs: n x (W + 1) matrix of per-frame log-probabilities; the last
            column is the blank symbol.
        targets: token sequence with every id < W.

    Returns:
        AlignmentPath whose `emissions` carry the raw per-frame symbols
        (blank index included) and whose `assignment` attributes each frame
        to a token chunk: blank frames belong to the most recently emitted
        token, leading blanks to token 0.  `score` is the path log-probability.
    """
    lp = _as_matrix(logprobs, "logprobs")
    require_finite(lp, "logprobs")
    num_frames, width = lp.shape
    if width < 2:
        raise ValueError("logprobs must cover at least one symbol plus blank")
    blank = width - 1
    ids = list(targets.ids)
    if max(ids) >= blank:
        raise ValueError(f"target ids must be < {blank} (the blank index is reserved)")
    needed = ctc_min_frames(ids)
    if num_frames < needed:
        raise ValueError(
            f"{num_frames} frames cannot express {len(ids)} tokens "
            f"(minimum {needed} with mandatory blanks between repeats)"
        )

    # Blank-interleaved state lattice: states 0, 2, 4, ... are blanks and odd
    # state s emits token (s - 1) // 2.
    num_states = 2 * len(ids) + 1
    labels = np.full(num_states, blank, dtype=np.int64)
    labels[1::2] = ids
    skip_ok = np.zeros(num_states, dtype=bool)
    for s in range(2, num_states):
        skip_ok[s] = labels[s] != blank and labels[s] != labels[s - 2]

    alpha = np.full((num_frames, num_states), NEG_INF)
    back = np.zeros((num_frames, num_states), dtype=np.int64)
    alpha[0, 0] = lp[0, blank]
    alpha[0, 1] = lp[0, ids[0]]
    for t in range(1, num_frames):
        prev = alpha[t - 1]
        stay = prev
        from_prev = np.concatenate(([NEG_INF], prev[:-1]))
        from_skip = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
        from_skip = np.where(skip_ok, from_skip, NEG_INF)
        candidates = np.stack([stay, from_prev, from_skip])
        choice = np.argmax(candidates, axis=0)  # ties prefer staying
        alpha[t] = lp[t, labels] + candidates[choice, np.arange(num_states)]
        back[t] = choice

    end_states = (num_states - 2, num_states - 1)
    end = end_states[int(np.argmax([alpha[-1, s] for s in end_states]))]
    score = alpha[-1, end]
    if score <= NEG_INF / 2:
        raise ValueError("internal error: no feasible path despite length check")

    states = np.empty(num_frames, dtype=np.int64)
    states[-1] = end
    for t in range(num_frames - 1, 0, -1):
        states[t - 1] = states[t] - back[t, states[t]]

    emissions = labels[states]
    assignment = np.empty(num_frames, dtype=np.int64)
    current = 0
    for t in range(num_frames):
        if states[t] % 2 == 1:
            current = (states[t] - 1) // 2
        assignment[t] = current
    return AlignmentPath(tuple(assignment), score=float(score), emissions=tuple(emissions))


# ---------------------------------------------------------------------------
# Continuous integrate-and-fire segmentation
# ---------------------------------------------------------------------------


def cif_segment(
    features: FeatureSequence,
    weights: CifWeights,
    expected_m: Optional[int] = None,
):
    """Segment frames by accumulating weights and firing at the threshold.

    Weights accumulate left to right; when the running sum reaches the
    threshold a segment closes at that frame, splitting the frame's weight
    between the closing and the newly opened segment.  Each output row is
    the weight-normalized average of its segment's frames.

    With `expected_m` given (teacher forcing) the weights are first rescaled
    so the total mass is exactly `expected_m` thresholds, guaranteeing that
    many segments.  Without it, a trailing residual of at least half a
    threshold becomes a final segment, otherwise it merges into the last one.

    Returns:
        (BoundaryIndices, m x D matrix of segment averages).
    """
    frames = features.frames
    n = features.num_frames
    alphas = weights.alphas
    beta = float(weights.threshold)
    if alphas.shape[0] != n:
        raise ValueError(f"weights cover {alphas.shape[0]} frames, features have {n}")

    if expected_m is not None:
        if expected_m < 1:
            raise ValueError("expected_m must be at least 1")
        if expected_m > n:
            raise ValueError(f"cannot produce {expected_m} segments from {n} frames")
        total = float(alphas.sum())
        if total <= 0:
            raise ValueError("cannot rescale weights with zero total mass")
        alphas = alphas * (expected_m * beta / total)

    boundaries: list[int] = []
    rows: list[np.ndarray] = []
    acc = 0.0
    seg_weight = 0.0
    seg_vec = np.zeros(features.dim)
    last_weight = 0.0
    last_vec = np.zeros(features.dim)

    for t in range(n):
        w = float(alphas[t])
        if acc + w < beta:
            acc += w
            seg_weight += w
            seg_vec = seg_vec + w * frames[t]
            continue
        take = beta - acc
        seg_weight += take
        seg_vec = seg_vec + take * frames[t]
        rows.append(seg_vec / seg_weight)
        boundaries.append(t)
        last_weight, last_vec = seg_weight, seg_vec
        leftover = w - take
        if leftover >= beta:
            raise ValueError(
                f"frame {t} would close more than one segment; boundary indices "
                f"must be strictly increasing (weight {w:.4g} vs threshold {beta:.4g})"
            )
        acc = leftover
        seg_weight = leftover
        seg_vec = leftover * frames[t]

    fired = len(rows)
    if expected_m is not None:
        # Total mass is expected_m * beta up to round-off, so the final fire
        # lands on the last frame in exact arithmetic; absorb the float drift.
        if fired == expected_m - 1 and seg_weight > 0:
            rows.append(seg_vec / seg_weight)
            boundaries.append(n - 1)
        elif fired == expected_m:
            if boundaries[-1] != n - 1 or seg_weight > 0:
                rows[-1] = (last_vec + seg_vec) / (last_weight + seg_weight)
                boundaries[-1] = n - 1
        else:
            raise ValueError(
                f"accumulation produced {fired} segments where {expected_m} were requested"
            )
    else:
        if fired == 0:
            # Too little mass ever to fire: the whole sequence is one segment.
            rows.append(seg_vec / seg_weight)
            boundaries.append(n - 1)
        elif boundaries[-1] == n - 1:
            # The last frame both closed a segment and left residual mass;
            # no frame remains to own it, so it joins the final segment.
            if seg_weight > 0:
                rows[-1] = (last_vec + seg_vec) / (last_weight + seg_weight)
        elif acc >= beta / 2:
            rows.append(seg_vec / seg_weight)
            boundaries.append(n - 1)
        else:
            rows[-1] = (last_vec + seg_vec) / (last_weight + seg_weight)
            boundaries[-1] = n - 1

    return BoundaryIndices(tuple(boundaries)), np.vstack(rows)


# ---------------------------------------------------------------------------
# Boundary extraction
# ---------------------------------------------------------------------------


def boundaries_from_path(path: AlignmentPath) -> BoundaryIndices:
    """Last frame of each token's chunk, ending at the final frame."""
    return BoundaryIndices(tuple(end for _, end in path.spans))
