"""Desk-scale causal language model over continuous input rows.

The model is the same decoder stack used by the connector, fronted by a
learned begin-of-sequence state and backed by an output projection that can
be a separate matrix or tied to the embedding table.  Inputs are arbitrary
H-dimensional rows: compressed speech representations, token embeddings, or
a mix of the two, which is what lets one model serve speech-conditioned
prediction, text-only training, and mixed prefix/continuation scoring.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .connector import causal_mask
from .nn import (
    DecoderConfig,
    decoder_backward_pass,
    decoder_forward_pass,
    init_decoder_tensors,
    uniform_init,
)
from .numerics import require_finite

DEC_PREFIX = "dec."


class ToyLanguageModel:
    """Embedding table + causal decoder + output head, tensors by name.

    Tensor names: ``emb.table`` (vocab x H), ``bos.state`` (H), the decoder
    group under ``dec.``, and ``out.weight`` (H x vocab) unless the output
    head is tied to the embedding table.
    """

    def __init__(self, vocab_size: int, config: DecoderConfig, tied_output: bool, tensors: dict):
        if vocab_size < 2:
            raise ValueError("language model vocabulary must have at least 2 entries")
        self.vocab_size = vocab_size
        self.config = config
        self.tied_output = tied_output
        self.tensors = tensors
        self._check_shapes()

    @classmethod
    def create(cls, vocab_size: int, config: DecoderConfig, tied_output: bool = False):
        rng = np.random.default_rng(config.seed)
        h = config.model_dim
        tensors = {
            "emb.table": uniform_init(rng, (vocab_size, h), h),
            "bos.state": uniform_init(rng, (h,), h),
        }
        tensors.update(init_decoder_tensors(config, rng, prefix=DEC_PREFIX))
        if not tied_output:
            tensors["out.weight"] = uniform_init(rng, (h, vocab_size), h)
        return cls(vocab_size, config, tied_output, tensors)

    def _check_shapes(self):
        h = self.config.model_dim
        emb = self.tensors.get("emb.table")
        bos = self.tensors.get("bos.state")
        if emb is None or emb.shape != (self.vocab_size, h):
            raise ValueError("emb.table missing or inconsistent with vocab/model_dim")
        if bos is None or bos.shape != (h,):
            raise ValueError("bos.state missing or inconsistent with model_dim")
        if self.tied_output:
            if "out.weight" in self.tensors:
                raise ValueError("tied output head must not carry a separate out.weight")
        elif self.tensors.get("out.weight") is None:
            raise ValueError("untied output head requires out.weight")
        for name, arr in self.tensors.items():
            require_finite(arr, name)

    @property
    def embedding_table(self) -> np.ndarray:
        return self.tensors["emb.table"]

    def output_matrix(self) -> np.ndarray:
        if self.tied_output:
            return self.tensors["emb.table"].T
        return self.tensors["out.weight"]

    def embed(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError("token id out of vocabulary range")
        return self.tensors["emb.table"][ids]


@dataclass
class LmCache:
    context_len: int
    dec_cache: object
    dec_out: np.ndarray


def context_logits(lm: ToyLanguageModel, context_rows: np.ndarray):
    """Next-token logits after each prefix of [BOS; context_rows].

    Row t of the result scores the token following the first t context rows
    (row 0 conditions on the BOS state alone), so a context of length C
    yields C + 1 logit rows.

    Returns (logits, cache).
    """
    context_rows = np.atleast_2d(np.asarray(context_rows, dtype=np.float64))
    if context_rows.size == 0:
        context_rows = context_rows.reshape(0, lm.config.model_dim)
    if context_rows.shape[1] != lm.config.model_dim:
        raise ValueError(
            f"context rows have dim {context_rows.shape[1]}, model uses {lm.config.model_dim}"
        )
    inputs = np.vstack([lm.tensors["bos.state"][None, :], context_rows])
    mask = causal_mask(inputs.shape[0])
    dec_out, dec_cache = decoder_forward_pass(
        lm.tensors, lm.config, inputs, mask.values, prefix=DEC_PREFIX
    )
    logits = dec_out @ lm.output_matrix()
    return logits, LmCache(context_rows.shape[0], dec_cache, dec_out)


def context_logits_backward(lm: ToyLanguageModel, cache: LmCache, d_logits: np.ndarray):
    """Gradients for all LM tensors plus the context rows.

    Returns (grads, d_context_rows).
    """
    grads: dict[str, np.ndarray] = {}
    if lm.tied_output:
        grads["emb.table"] = d_logits.T @ cache.dec_out  # (vocab, H) via tied head
        d_dec_out = d_logits @ lm.tensors["emb.table"]
    else:
        grads["out.weight"] = cache.dec_out.T @ d_logits
        d_dec_out = d_logits @ lm.tensors["out.weight"].T
    d_inputs, dec_grads = decoder_backward_pass(
        lm.tensors, lm.config, cache.dec_cache, d_dec_out, prefix=DEC_PREFIX
    )
    grads.update(dec_grads)
    grads["bos.state"] = d_inputs[0]
    d_context = d_inputs[1:]
    return grads, d_context


def add_embedding_grad(lm: ToyLanguageModel, grads: dict, ids, d_rows: np.ndarray) -> None:
    """Scatter-add gradients of embedded rows back into the table gradient."""
    table_grad = grads.get("emb.table")
    if table_grad is None:
        table_grad = np.zeros_like(lm.tensors["emb.table"])
    else:
        table_grad = table_grad.copy()
    np.add.at(table_grad, np.asarray(ids, dtype=np.int64), d_rows)
    grads["emb.table"] = table_grad
