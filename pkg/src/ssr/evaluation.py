"""Evaluation metrics: WER, perplexity choice tasks, boundary quality.

Choice tasks score each candidate continuation by length-normalized
perplexity under the model, conditioned on a prefix that may be compressed
speech rows or plain tokens; the lowest perplexity wins, ties to the lowest
index.  Boundary metrics compare predicted word-end times against a gold
reference.
"""
from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .alignment import TokenSequence
from .connector import CompressedRepresentation
from .lm import ToyLanguageModel, context_logits
from .numerics import log_softmax

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass
class ChoiceTask:
    """A prefix plus K candidate continuations, one of which is gold."""

    prefix: Union[CompressedRepresentation, TokenSequence]
    choices: list
    gold: int
    utt_id: str = ""

    def __post_init__(self):
        if len(self.choices) < 1:
            raise ValueError("choice task needs at least one choice")
        if not 0 <= self.gold < len(self.choices):
            raise ValueError(f"gold index {self.gold} out of range")


@dataclass
class BoundaryTimes:
    """Word-end times in milliseconds, strictly increasing."""

    times_ms: tuple

    def __post_init__(self):
        self.times_ms = tuple(float(t) for t in self.times_ms)
        if len(self.times_ms) < 1:
            raise ValueError("boundary times must not be empty")
        if self.times_ms[0] < 0:
            raise ValueError("boundary times must be non-negative")
        for prev, cur in zip(self.times_ms, self.times_ms[1:]):
            if cur <= prev:
                raise ValueError("boundary times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times_ms)


def normalize_words(text: str) -> list:
    """Whitespace-split after lowercasing and stripping punctuation."""
    return text.lower().translate(_PUNCT_TABLE).split()


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(
                prev[j] + 1,  # deletion of h
                cur[j - 1] + 1,  # insertion of r
                prev[j - 1] + (h != r),  # match / substitution
            )
        prev = cur
    return prev[len(ref)]


def word_error_rate(hyp: Sequence, ref: Sequence) -> float:
    """Edit distance between word lists, normalized by reference length."""
    hyp = list(hyp)
    ref = list(ref)
    if not ref:
        raise ValueError("reference must not be empty")
    return edit_distance(hyp, ref) / len(ref)


def _prefix_rows(lm: ToyLanguageModel, prefix) -> np.ndarray:
    if isinstance(prefix, CompressedRepresentation):
        if prefix.dim != lm.config.model_dim:
            raise ValueError(
                f"prefix rows have dim {prefix.dim}, model uses {lm.config.model_dim}"
            )
        return prefix.rows
    if isinstance(prefix, TokenSequence):
        return lm.embed(np.asarray(prefix.ids, dtype=np.int64))
    raise ValueError("prefix must be a CompressedRepresentation or TokenSequence")


def _choice_ids(choice, vocab_size: int) -> np.ndarray:
    ids = np.asarray(choice.ids if isinstance(choice, TokenSequence) else choice, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise ValueError("each choice must be a non-empty id sequence")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError(f"choice id outside LM vocabulary of {vocab_size}")
    return ids


def choice_perplexity(lm: ToyLanguageModel, prefix, choice) -> float:
    """exp(mean NLL) of the continuation tokens, conditioned on the prefix."""
    prefix_rows = _prefix_rows(lm, prefix)
    ids = _choice_ids(choice, lm.vocab_size)
    context = np.vstack([prefix_rows, lm.embed(ids[:-1])]) if ids.size > 1 else prefix_rows
    logits, _ = context_logits(lm, context)
    start = prefix_rows.shape[0]
    logp = log_softmax(logits[start : start + ids.size], axis=-1)
    nll = -logp[np.arange(ids.size), ids]
    return float(np.exp(nll.mean()))


def choice_eval(lm: ToyLanguageModel, task: ChoiceTask):
    """Pick the choice with the smallest perplexity (ties: lowest index).

    Returns (chosen_index, perplexities).
    """
    perplexities = [choice_perplexity(lm, task.prefix, c) for c in task.choices]
    chosen = int(np.argmin(perplexities))
    return chosen, perplexities


def boundary_metrics(pred: BoundaryTimes, gold: BoundaryTimes):
    """Mean absolute boundary error and mean predicted word duration (ms)."""
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted boundaries vs {len(gold)} gold")
    p = np.asarray(pred.times_ms)
    g = np.asarray(gold.times_ms)
    wbe = float(np.mean(np.abs(p - g)))
    durations = np.diff(np.concatenate(([0.0], p)))
    wdur = float(np.mean(durations))
    return wbe, wdur


def frames_to_times(indices, frame_duration_ms: float) -> BoundaryTimes:
    """Boundary frame indices to end times: frame i ends at (i + 1) * duration."""
    if not frame_duration_ms > 0:
        raise ValueError("frame duration must be positive")
    return BoundaryTimes(tuple((int(i) + 1) * frame_duration_ms for i in indices))


def transcribe_greedy(lm: ToyLanguageModel, z: CompressedRepresentation) -> TokenSequence:
    """Argmax decode of one token per compressed row.

    Position t conditions on rows strictly before t, mirroring the NLL
    conditioning, so the whole decode is a single forward pass; ties take
    the lowest token id.
    """
    rows = z.rows
    if rows.shape[1] != lm.config.model_dim:
        raise ValueError(f"rows have dim {rows.shape[1]}, model uses {lm.config.model_dim}")
    logits, _ = context_logits(lm, rows[:-1])
    ids = np.argmax(logits, axis=-1)
    return TokenSequence(tuple(int(i) for i in ids), vocab_size=lm.vocab_size)
