"""Segmented speech representations: alignment, compression, training, eval.

The pipeline turns an n x D speech feature matrix into one row per
transcription token: an aligner produces boundary indices, a causal decoder
transforms the frames, and the rows at the boundaries form the compressed
representation.  Stage 1 distills those rows onto a frozen language model's
token embeddings; stage 2 fine-tunes the language model to predict tokens
from the compressed rows alone.
"""

from .alignment import (
    AlignmentPath,
    BoundaryIndices,
    CifWeights,
    DistanceMatrix,
    FeatureSequence,
    PriorMatrix,
    SoftAlignmentMatrix,
    TokenSequence,
    beta_binomial_prior,
    boundaries_from_path,
    build_distance_matrix,
    cif_segment,
    ctc_forced_align,
    monotonic_alignment_search,
    soft_alignment,
)
from .connector import (
    AttentionMask,
    CompressedRepresentation,
    ConnectorParams,
    DecoderConfig,
    blockwise_mask,
    causal_mask,
    connect,
    decoder_forward,
    project,
    select_at_boundaries,
)
from .evaluation import (
    BoundaryTimes,
    ChoiceTask,
    boundary_metrics,
    choice_eval,
    frames_to_times,
    transcribe_greedy,
    word_error_rate,
)
from .lm import ToyLanguageModel
from .objectives import (
    LossValue,
    distillation_loss,
    embed_tokens,
    finite_difference_check,
    nll_loss,
)
from .trainer import (
    Corpus,
    TrainConfig,
    Utterance,
    distill_step,
    finetune_step,
    multitask_batch,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentPath",
    "AttentionMask",
    "BoundaryIndices",
    "BoundaryTimes",
    "ChoiceTask",
    "CifWeights",
    "CompressedRepresentation",
    "ConnectorParams",
    "Corpus",
    "DecoderConfig",
    "DistanceMatrix",
    "FeatureSequence",
    "LossValue",
    "PriorMatrix",
    "SoftAlignmentMatrix",
    "TokenSequence",
    "ToyLanguageModel",
    "TrainConfig",
    "Utterance",
    "beta_binomial_prior",
    "blockwise_mask",
    "boundaries_from_path",
    "boundary_metrics",
    "build_distance_matrix",
    "causal_mask",
    "choice_eval",
    "cif_segment",
    "connect",
    "ctc_forced_align",
    "decoder_forward",
    "distill_step",
    "distillation_loss",
    "embed_tokens",
    "finetune_step",
    "finite_difference_check",
    "frames_to_times",
    "monotonic_alignment_search",
    "multitask_batch",
    "nll_loss",
    "project",
    "select_at_boundaries",
    "soft_alignment",
    "train_stage1",
    "train_stage2",
    "transcribe_greedy",
    "word_error_rate",
]
