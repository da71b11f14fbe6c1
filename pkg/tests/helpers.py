"""Shared fixtures: synthetic corpora and independent brute-force oracles.

The oracles here deliberately avoid the library's dynamic programming and
accumulation code paths: alignment scores come from explicit enumeration of
complete paths, CIF segment counts from a direct re-simulation, and the
prior pmf from the log-gamma formula.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from ssr.alignment import BoundaryIndices, FeatureSequence, TokenSequence
from ssr.connector import ConnectorParams
from ssr.lm import ToyLanguageModel
from ssr.nn import DecoderConfig
from ssr.trainer import Corpus, Utterance

DESK_VOCAB = 50
DESK_INPUT_DIM = 8
DESK_MODEL_DIM = 32


def desk_decoder_config(seed: int) -> DecoderConfig:
    return DecoderConfig(
        model_dim=DESK_MODEL_DIM, layers=4, heads=4, ffn_dim=64, max_len=64, seed=seed
    )


def make_desk_corpus(seed: int, count: int = 50) -> Corpus:
    """Synthetic aligned speech-text corpus that a small model can overfit.

    Every utterance starts with token 0 and continues along one shared
    random permutation chain after a random second token, so all positions
    except the second are predictable from the preceding tokens; token
    identity reaches the LM only through the speech features (per-token
    prototype vectors plus small noise).
    """
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(size=(DESK_VOCAB, DESK_INPUT_DIM))
    chain = rng.permutation(DESK_VOCAB)
    utterances = []
    for u in range(count):
        m = int(rng.integers(12, 21))
        ids = [0, int(rng.integers(1, DESK_VOCAB))]
        while len(ids) < m:
            ids.append(int(chain[ids[-1]]))
        spans = rng.integers(1, 3, size=m)
        frames = []
        bounds = []
        cursor = 0
        for i, token in enumerate(ids):
            for _ in range(int(spans[i])):
                frames.append(prototypes[token] + 0.02 * rng.normal(size=DESK_INPUT_DIM))
                cursor += 1
            bounds.append(cursor - 1)
        utterances.append(
            Utterance(
                utt_id=f"utt{u:03d}",
                features=FeatureSequence(np.asarray(frames)),
                tokens=TokenSequence(tuple(ids), DESK_VOCAB),
                boundaries=BoundaryIndices(tuple(bounds)),
            )
        )
    return Corpus(speech_text=utterances)


def fresh_desk_models(connector_seed: int = 0, lm_seed: int = 1):
    connector = ConnectorParams.create(DESK_INPUT_DIM, desk_decoder_config(connector_seed))
    lm = ToyLanguageModel.create(DESK_VOCAB, desk_decoder_config(lm_seed))
    return connector, lm


def snapshot_tensors(tensors: dict) -> dict:
    return {name: arr.copy() for name, arr in tensors.items()}


def tensors_bitwise_equal(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    return all(a[k].tobytes() == b[k].tobytes() for k in a)


# ---------------------------------------------------------------------------
# Alignment oracles
# ---------------------------------------------------------------------------


def enumerate_monotone_paths(num_text: int, num_units: int):
    """All surjective monotone unit->text assignments, via span boundaries."""
    for cuts in itertools.combinations(range(1, num_units), num_text - 1):
        assignment = []
        prev = 0
        for text_idx, cut in enumerate(list(cuts) + [num_units]):
            assignment.extend([text_idx] * (cut - prev))
            prev = cut
        yield tuple(assignment)


def mas_brute_force(values: np.ndarray):
    """Max log-score over explicitly enumerated monotone surjective paths."""
    num_text, num_units = values.shape
    log_scores = np.log(values)
    best_score = -np.inf
    best_path = None
    for assignment in enumerate_monotone_paths(num_text, num_units):
        score = sum(log_scores[assignment[j], j] for j in range(num_units))
        if score > best_score:
            best_score = score
            best_path = assignment
    return best_score, best_path


def enumerate_ctc_paths(num_frames: int, ids, blank: int):
    """Every frame labelling that collapses to `ids` (repeats then blanks).

    The search extends one frame at a time; a frame may hold the blank, a
    repeat of the previous frame's symbol (absorbed by collapse), or the
    next not-yet-emitted target token.  Prefixes that cannot finish within
    the remaining frames are pruned exactly, so only viable paths are
    walked.
    """
    m = len(ids)
    # Minimum frames to emit ids[k:], given the symbol currently on the tape.
    suffix_need = [0] * (m + 1)
    for k in range(m - 1, -1, -1):
        gap = 1 if k + 1 < m and ids[k + 1] == ids[k] else 0
        suffix_need[k] = suffix_need[k + 1] + 1 + gap

    def min_frames(emitted: int, last) -> int:
        if emitted == m:
            return 0
        # A separating blank is required when the pending token repeats the
        # symbol already on the tape.
        return suffix_need[emitted] + (1 if ids[emitted] == last else 0)

    def extend(path, emitted, last):
        t = len(path)
        if t == num_frames:
            yield tuple(path)
            return
        remaining = num_frames - t
        candidates = [blank]
        if last is not None and last != blank:
            candidates.append(last)
        if emitted < m and ids[emitted] != last:
            candidates.append(ids[emitted])
        for symbol in candidates:
            new_emitted = emitted + 1 if (symbol != last and symbol != blank) else emitted
            if min_frames(new_emitted, symbol) > remaining - 1:
                continue
            path.append(symbol)
            yield from extend(path, new_emitted, symbol)
            path.pop()

    if min_frames(0, None) <= num_frames:
        yield from extend([], 0, None)


def ctc_brute_force(logprobs: np.ndarray, ids):
    """Max path log-probability over the explicit collapse-consistent set."""
    num_frames, width = logprobs.shape
    blank = width - 1
    best = -np.inf
    best_path = None
    for path in enumerate_ctc_paths(num_frames, list(ids), blank):
        score = sum(logprobs[t, s] for t, s in enumerate(path))
        if score > best:
            best = score
            best_path = path
    return best, best_path


def collapse_ctc_path(path, blank: int):
    out = []
    last = None
    for symbol in path:
        if symbol != last and symbol != blank:
            out.append(symbol)
        last = symbol
    return tuple(out)


def cif_simulate_free_running(alphas, beta: float) -> int:
    """Hand simulation of the free-running integrate-and-fire segment count.

    Mirrors the documented residual rule: a trailing residual of at least
    half a threshold becomes a final segment when at least one frame
    follows the last fire; otherwise it merges into the last segment.  A
    sequence whose weights never reach the threshold is one segment.
    """
    acc = 0.0
    fires = 0
    last_fire_at = -1
    for t, a in enumerate(alphas):
        if acc + a < beta:
            acc += a
        else:
            fires += 1
            acc = acc + a - beta
            last_fire_at = t
    if fires == 0:
        return 1
    if last_fire_at == len(alphas) - 1:
        return fires
    if acc >= beta / 2:
        return fires + 1
    return fires


def betabinom_pmf_reference(k: int, n: int, a: float, b: float) -> float:
    """Beta-binomial pmf from the log-gamma formula."""

    def lbeta(x, y):
        return math.lgamma(x) + math.lgamma(y) - math.lgamma(x + y)

    log_choose = math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
    return math.exp(log_choose + lbeta(k + a, n - k + b) - lbeta(a, b))
