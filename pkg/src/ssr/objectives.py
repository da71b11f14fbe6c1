"""Training objectives with analytic gradients.

Two losses drive the two training stages: a per-row cosine-plus-MSE
distillation loss that pulls compressed speech rows onto text embedding
rows, and a next-token negative log-likelihood where the model conditions
only on the preceding speech rows.  Both return their gradients alongside
the value; `finite_difference_check` is the independent oracle used to
validate those gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .alignment import TokenSequence
from .connector import CompressedRepresentation
from .errors import NumericError
from .lm import ToyLanguageModel, context_logits, context_logits_backward
from .numerics import log_softmax, softmax


@dataclass
class LossValue:
    """A scalar loss, its gradients by tensor name, and scalar diagnostics."""

    value: float
    gradients: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericError(f"loss value is not finite: {self.value}")


def embed_tokens(tokens: TokenSequence, table: np.ndarray) -> np.ndarray:
    """Look up one table row per token id."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2:
        raise ValueError("embedding table must be 2-D")
    ids = np.asarray(tokens.ids, dtype=np.int64)
    if ids.max() >= table.shape[0]:
        raise ValueError(
            f"token id {ids.max()} out of range for table with {table.shape[0]} rows"
        )
    return table[ids]


def distillation_loss(pred, target, cos_weight: float = 5.0) -> LossValue:
    """Mean over rows of cos_weight * (1 - cosine) + squared error.

    Args:
        pred: m x H matrix being trained (gradient is returned for it).
        target: m x H matrix of frozen targets.
        cos_weight: balance factor between the cosine and MSE terms.

    Returns:
        LossValue with gradients under key "pred" and the separate cosine
        and squared-error terms in `components`.
    """
    z = pred.rows if isinstance(pred, CompressedRepresentation) else np.asarray(pred, dtype=np.float64)
    h = np.asarray(target, dtype=np.float64)
    if z.ndim != 2 or z.shape != h.shape:
        raise ValueError(f"shape mismatch: pred {z.shape} vs target {h.shape}")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(h))):
        raise NumericError("distillation inputs contain non-finite values")

    z_norm = np.linalg.norm(z, axis=1)
    h_norm = np.linalg.norm(h, axis=1)
    for name, norms in (("pred", z_norm), ("target", h_norm)):
        bad = np.flatnonzero(norms == 0)
        if bad.size:
            raise ValueError(f"{name} row {bad[0]} has zero norm; cosine undefined")

    m = z.shape[0]
    dots = np.sum(z * h, axis=1)
    cosines = dots / (z_norm * h_norm)
    diff = z - h
    sq = np.sum(diff * diff, axis=1)

    cos_term = float(np.mean(cos_weight * (1.0 - cosines)))
    mse_term = float(np.mean(sq))
    value = cos_term + mse_term

    # d cos_i / d z_i = (h_i - (z_i.h_i / z_i.z_i) z_i) / (|z_i||h_i|);
    # this form cancels exactly when z_i == h_i, so a perfect match yields a
    # bitwise-zero gradient rather than round-off noise.
    sq_z = np.sum(z * z, axis=1)
    d_cos = (h - (dots / sq_z)[:, None] * z) / (z_norm * h_norm)[:, None]
    d_z = (-cos_weight * d_cos + 2.0 * diff) / m

    return LossValue(
        value=value,
        gradients={"pred": d_z},
        components={
            "cos_term": cos_term,
            "mse_term": mse_term,
            "mean_cosine": float(np.mean(cosines)),
        },
    )


def nll_loss(
    lm: ToyLanguageModel,
    rows: Union[CompressedRepresentation, np.ndarray],
    targets: TokenSequence,
) -> LossValue:
    """Summed negative log-likelihood of `targets` given preceding rows.

    Position t sees only rows strictly before t (the first prediction
    conditions on the learned begin state), so the input sequence is the
    rows shifted right by one.  Gradients cover every LM tensor.
    """
    z = rows.rows if isinstance(rows, CompressedRepresentation) else np.asarray(rows, dtype=np.float64)
    m = len(targets)
    if z.ndim != 2 or z.shape[0] != m:
        raise ValueError(f"{z.shape[0] if z.ndim == 2 else '?'} rows vs {m} target tokens")
    ids = np.asarray(targets.ids, dtype=np.int64)
    if ids.max() >= lm.vocab_size:
        raise ValueError(f"target id {ids.max()} outside LM vocabulary of {lm.vocab_size}")

    logits, cache = context_logits(lm, z[: m - 1])
    logp = log_softmax(logits, axis=-1)
    value = float(-np.sum(logp[np.arange(m), ids]))

    d_logits = softmax(logits, axis=-1)
    d_logits[np.arange(m), ids] -= 1.0
    grads, _ = context_logits_backward(lm, cache, d_logits)
    if "emb.table" not in grads:
        grads["emb.table"] = np.zeros_like(lm.tensors["emb.table"])
    return LossValue(value=value, gradients=grads, components={"mean_nll": value / m})


def finite_difference_check(
    loss_fn: Callable[[dict], LossValue],
    params: dict,
    epsilon: float,
    num_coords: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples a seeded random subset of at least `num_coords` coordinates
    across all tensors in `params` (every tensor contributes at least one),
    perturbs each by +/- epsilon, and compares the observed slope against
    the analytic gradient reported by `loss_fn`.  Relative error uses
    max(|analytic|, |observed|, 1e-8) as the denominator.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    if num_coords < 1:
        raise ValueError("num_coords must be positive")

    names = sorted(params)
    sizes = np.array([params[name].size for name in names])
    total = int(sizes.sum())
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    rng = np.random.default_rng(seed)
    count = min(max(num_coords, len(names)), total)

    # One coordinate from every tensor, then uniform fill-in up to `count`.
    chosen = {int(offsets[i] + rng.integers(sizes[i])) for i in range(len(names))}
    for flat in rng.permutation(total):
        if len(chosen) >= count:
            break
        chosen.add(int(flat))

    base = loss_fn(params)
    worst = 0.0
    for flat in sorted(chosen):
        tensor_idx = int(np.searchsorted(offsets, flat, side="right")) - 1
        name = names[tensor_idx]
        local = flat - offsets[tensor_idx]
        analytic = float(base.gradients[name].reshape(-1)[local])

        perturbed = {k: v.copy() for k, v in params.items()}
        perturbed[name].reshape(-1)[local] += epsilon
        up = loss_fn(perturbed).value
        perturbed[name].reshape(-1)[local] -= 2 * epsilon
        down = loss_fn(perturbed).value
        observed = (up - down) / (2 * epsilon)

        err = abs(analytic - observed) / max(abs(analytic), abs(observed), 1e-8)
        worst = max(worst, err)
    return worst
