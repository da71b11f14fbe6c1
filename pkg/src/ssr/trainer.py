"""Two-stage training: connector distillation, then LM fine-tuning.

Stage 1 freezes the language model and trains the connector so compressed
speech rows match the frozen embedding rows of the transcription.  Stage 2
freezes the connector and trains the language model with next-token NLL on
the compressed rows, optionally mixing in text-only batches at a fixed
probability to retain plain language-modeling behavior.

Everything is single-process and deterministic given (seed, corpus order).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .alignment import BoundaryIndices, FeatureSequence, TokenSequence
from .connector import ConnectorParams, connect_backward, connect_forward
from .errors import NumericError
from .lm import ToyLanguageModel, add_embedding_grad, context_logits, context_logits_backward
from .nn import Adam, accumulate_grads, scale_grads
from .numerics import log_softmax, softmax
from .objectives import LossValue, distillation_loss, embed_tokens, nll_loss

SPEECH_TEXT = "speech_text"
TEXT_ONLY = "text_only"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 1000
    batch_tokens: int = 512
    seed: int = 0
    mix_probability: float = 0.5
    freeze: str = "lm"  # which side stays fixed: "lm" (stage 1) or "connector" (stage 2)
    cos_weight: float = 5.0
    use_blockwise: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.batch_tokens < 1:
            raise ValueError("batch_tokens must be positive")
        if not 0.0 <= self.mix_probability <= 1.0:
            raise ValueError("mix_probability must lie in [0, 1]")
        if self.freeze not in ("lm", "connector"):
            raise ValueError("freeze must be 'lm' or 'connector'")


@dataclass
class Utterance:
    utt_id: str
    features: FeatureSequence
    tokens: TokenSequence
    boundaries: Optional[BoundaryIndices] = None

    def __post_init__(self):
        if self.boundaries is not None:
            if len(self.boundaries) != len(self.tokens):
                raise ValueError(
                    f"{self.utt_id}: {len(self.boundaries)} boundaries vs "
                    f"{len(self.tokens)} tokens"
                )
            if self.boundaries.frame_count != self.features.num_frames:
                raise ValueError(
                    f"{self.utt_id}: boundaries cover {self.boundaries.frame_count} frames, "
                    f"features have {self.features.num_frames}"
                )


@dataclass
class Corpus:
    speech_text: list = field(default_factory=list)
    text_only: list = field(default_factory=list)


def make_batches(items: list, token_budget: int, length_of: Callable[[object], int]) -> list:
    """Greedy first-fit over length-sorted items.

    Items are sorted by descending length (stable) and each is placed in the
    first batch with room; an item longer than the whole budget gets a batch
    of its own.  Batch order is creation order, so the result is
    deterministic for a fixed input order.
    """
    if token_budget < 1:
        raise ValueError("token budget must be positive")
    order = sorted(range(len(items)), key=lambda i: -length_of(items[i]))
    batches: list[list] = []
    loads: list[int] = []
    for idx in order:
        need = length_of(items[idx])
        for b, load in enumerate(loads):
            if load + need <= token_budget:
                batches[b].append(items[idx])
                loads[b] += need
                break
        else:
            batches.append([items[idx]])
            loads.append(need)
    return batches


def multitask_batch(speech_batches: list, text_batches: list, mix_probability: float, rng):
    """Pick a stream by Bernoulli(mix_probability), then a batch uniformly.

    Returns (stream_tag, batch).  With probability `mix_probability` the
    speech-text stream is chosen, otherwise the text-only stream.
    """
    if not 0.0 <= mix_probability <= 1.0:
        raise ValueError("mix_probability must lie in [0, 1]")
    if mix_probability > 0 and not speech_batches:
        raise ValueError("speech-text stream is empty but has positive probability")
    if mix_probability < 1 and not text_batches:
        raise ValueError("text-only stream is empty but has positive probability")
    if rng.random() < mix_probability:
        pool, tag = speech_batches, SPEECH_TEXT
    else:
        pool, tag = text_batches, TEXT_ONLY
    return tag, pool[int(rng.integers(len(pool)))]


def _require_aligned(batch: list) -> None:
    for utt in batch:
        if utt.boundaries is None:
            raise ValueError(f"utterance {utt.utt_id} has no boundaries; align it first")


def distill_step(
    connector: ConnectorParams,
    lm: ToyLanguageModel,
    batch: list,
    optimizer: Adam,
    cos_weight: float = 5.0,
    use_blockwise: bool = False,
) -> LossValue:
    """One connector update against frozen text embeddings.

    The batch loss is the mean of per-utterance distillation losses; only
    connector tensors are touched.
    """
    if not batch:
        raise ValueError("empty batch")
    _require_aligned(batch)
    total_grads: dict = {}
    total_loss = 0.0
    cosine_sum = 0.0
    for utt in batch:
        compressed, cache = connect_forward(
            utt.features, utt.boundaries, connector, use_blockwise
        )
        targets = embed_tokens(utt.tokens, lm.tensors["emb.table"])
        loss = distillation_loss(compressed.rows, targets, cos_weight)
        total_loss += loss.value
        cosine_sum += loss.components["mean_cosine"]
        accumulate_grads(total_grads, connect_backward(connector, cache, loss.gradients["pred"]))
    scale = 1.0 / len(batch)
    scale_grads(total_grads, scale)
    optimizer.update(connector.tensors, total_grads)
    return LossValue(
        value=total_loss * scale,
        components={"mean_cosine": cosine_sum * scale},
    )


def _text_nll(lm: ToyLanguageModel, tokens: TokenSequence) -> LossValue:
    """Next-token NLL over embedded tokens, with embedding-input gradients."""
    ids = np.asarray(tokens.ids, dtype=np.int64)
    if ids.max() >= lm.vocab_size:
        raise ValueError(f"token id {ids.max()} outside LM vocabulary of {lm.vocab_size}")
    m = len(ids)
    rows = lm.embed(ids[: m - 1])
    logits, cache = context_logits(lm, rows)
    logp = log_softmax(logits, axis=-1)
    value = float(-np.sum(logp[np.arange(m), ids]))
    d_logits = softmax(logits, axis=-1)
    d_logits[np.arange(m), ids] -= 1.0
    grads, d_context = context_logits_backward(lm, cache, d_logits)
    add_embedding_grad(lm, grads, ids[: m - 1], d_context)
    if "emb.table" not in grads:
        grads["emb.table"] = np.zeros_like(lm.tensors["emb.table"])
    return LossValue(value=value, gradients=grads, components={"mean_nll": value / m})


def finetune_step(
    connector: ConnectorParams,
    lm: ToyLanguageModel,
    batch,
    optimizer: Adam,
    stream: str = SPEECH_TEXT,
    use_blockwise: bool = False,
) -> LossValue:
    """One LM update with the connector frozen.

    Speech-text batches run the connector forward only (no gradient reaches
    it) and apply NLL on the compressed rows; text-only batches apply plain
    next-token NLL on token embeddings.
    """
    if not batch:
        raise ValueError("empty batch")
    total_grads: dict = {}
    total_loss = 0.0
    mean_nll = 0.0
    if stream == SPEECH_TEXT:
        _require_aligned(batch)
        for utt in batch:
            compressed, _ = connect_forward(utt.features, utt.boundaries, connector, use_blockwise)
            loss = nll_loss(lm, compressed, utt.tokens)
            total_loss += loss.value
            mean_nll += loss.components["mean_nll"]
            accumulate_grads(total_grads, loss.gradients)
    elif stream == TEXT_ONLY:
        for tokens in batch:
            loss = _text_nll(lm, tokens)
            total_loss += loss.value
            mean_nll += loss.components["mean_nll"]
            accumulate_grads(total_grads, loss.gradients)
    else:
        raise ValueError(f"unknown stream {stream!r}")
    scale = 1.0 / len(batch)
    scale_grads(total_grads, scale)
    optimizer.update(lm.tensors, total_grads)
    return LossValue(
        value=total_loss * scale,
        components={"mean_nll": mean_nll * scale},
    )


def _check_finite(loss: LossValue, step: int, stage: str) -> None:
    if not np.isfinite(loss.value):
        raise NumericError(f"non-finite loss {loss.value} at {stage} step {step}")


def train_stage1(
    connector: ConnectorParams,
    lm: ToyLanguageModel,
    corpus: Corpus,
    cfg: TrainConfig,
    step_callback: Optional[Callable[[int, LossValue], None]] = None,
) -> list:
    """Distill the connector against the frozen LM's embedding table.

    Returns the per-step training log as a list of row dicts.
    """
    if cfg.freeze != "lm":
        raise ValueError("stage 1 requires freeze='lm'")
    if not corpus.speech_text:
        raise ValueError("stage 1 needs a speech-text corpus")
    batches = make_batches(corpus.speech_text, cfg.batch_tokens, lambda u: len(u.tokens))
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(cfg.learning_rate)
    log = []
    for step in range(1, cfg.steps + 1):
        batch = batches[int(rng.integers(len(batches)))]
        loss = distill_step(
            connector, lm, batch, optimizer,
            cos_weight=cfg.cos_weight, use_blockwise=cfg.use_blockwise,
        )
        _check_finite(loss, step, "stage1")
        log.append(
            {
                "step": step,
                "stage": "distill",
                "stream": SPEECH_TEXT,
                "loss": loss.value,
                "cosine": loss.components["mean_cosine"],
            }
        )
        if step_callback is not None:
            step_callback(step, loss)
    return log


def train_stage2(
    connector: ConnectorParams,
    lm: ToyLanguageModel,
    corpus: Corpus,
    cfg: TrainConfig,
    step_callback: Optional[Callable[[int, LossValue], None]] = None,
) -> list:
    """Fine-tune the LM on compressed speech, optionally mixed with text."""
    if cfg.freeze != "connector":
        raise ValueError("stage 2 requires freeze='connector'")
    if not corpus.speech_text and cfg.mix_probability > 0:
        raise ValueError("stage 2 needs a speech-text corpus unless mix_probability is 0")
    speech_batches = make_batches(corpus.speech_text, cfg.batch_tokens, lambda u: len(u.tokens))
    text_batches = make_batches(corpus.text_only, cfg.batch_tokens, len)
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(cfg.learning_rate)
    log = []
    for step in range(1, cfg.steps + 1):
        stream, batch = multitask_batch(speech_batches, text_batches, cfg.mix_probability, rng)
        loss = finetune_step(
            connector, lm, batch, optimizer, stream=stream, use_blockwise=cfg.use_blockwise
        )
        _check_finite(loss, step, "stage2")
        log.append(
            {
                "step": step,
                "stage": "finetune",
                "stream": stream,
                "loss": loss.value,
                "cosine": "",
            }
        )
        if step_callback is not None:
            step_callback(step, loss)
    return log


def corpus_speech_nll(connector: ConnectorParams, lm: ToyLanguageModel, corpus: Corpus,
                      use_blockwise: bool = False) -> float:
    """Mean per-utterance NLL over the speech-text corpus (no updates)."""
    if not corpus.speech_text:
        raise ValueError("corpus has no speech-text utterances")
    total = 0.0
    for utt in corpus.speech_text:
        compressed, _ = connect_forward(utt.features, utt.boundaries, connector, use_blockwise)
        total += nll_loss(lm, compressed, utt.tokens).value
    return total / len(corpus.speech_text)


def corpus_mean_cosine(connector: ConnectorParams, lm: ToyLanguageModel, corpus: Corpus,
                       use_blockwise: bool = False) -> float:
    """Mean row cosine between compressed rows and embedding targets."""
    if not corpus.speech_text:
        raise ValueError("corpus has no speech-text utterances")
    total = 0.0
    count = 0
    for utt in corpus.speech_text:
        compressed, _ = connect_forward(utt.features, utt.boundaries, connector, use_blockwise)
        targets = embed_tokens(utt.tokens, lm.tensors["emb.table"])
        z, h = compressed.rows, targets
        cos = np.sum(z * h, axis=1) / (np.linalg.norm(z, axis=1) * np.linalg.norm(h, axis=1))
        total += float(cos.sum())
        count += len(cos)
    return total / count
