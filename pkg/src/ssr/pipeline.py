"""Glue between file formats and the in-memory pipeline objects.

A single checkpoint file carries both parameter groups (connector tensors
under ``connector.``, language-model tensors under ``lm.``) plus the shape
configuration needed to rebuild them, so the stage-2 command can pick up
exactly where stage 1 left off.
"""
from __future__ import annotations

from .alignment import (
    BoundaryIndices,
    CifWeights,
    TokenSequence,
    beta_binomial_prior,
    boundaries_from_path,
    build_distance_matrix,
    cif_segment,
    ctc_forced_align,
    monotonic_alignment_search,
    soft_alignment,
)
from .connector import ConnectorParams
from .errors import DataError, ManifestError
from .formats import (
    AlignmentRecord,
    ManifestRow,
    load_feature_file,
    manifest_tokens,
    save_checkpoint,
    load_checkpoint,
)
from .lm import ToyLanguageModel
from .nn import DecoderConfig
from .trainer import Corpus, Utterance

CONNECTOR_GROUP = "connector."
LM_GROUP = "lm."


def decoder_config_from(cfg: dict, seed: int) -> DecoderConfig:
    return DecoderConfig(
        model_dim=cfg["model_dim"],
        layers=cfg["layers"],
        heads=cfg["heads"],
        ffn_dim=cfg["ffn_dim"],
        max_len=cfg["max_len"],
        seed=seed,
    )


def new_pipeline(cfg: dict, input_dim: int, vocab_size: int):
    """Fresh connector and LM; the LM seed is offset so the two differ."""
    connector = ConnectorParams.create(input_dim, decoder_config_from(cfg, cfg["seed"]))
    lm = ToyLanguageModel.create(
        vocab_size,
        decoder_config_from(cfg, cfg["seed"] + 1),
        tied_output=cfg["tied_output"],
    )
    return connector, lm


def save_pipeline(path, connector: ConnectorParams, lm: ToyLanguageModel) -> None:
    config = {
        "kind": "pipeline",
        "input_dim": connector.input_dim,
        "vocab_size": lm.vocab_size,
        "tied_output": lm.tied_output,
        "connector": connector.config.to_dict(),
        "lm": lm.config.to_dict(),
    }
    tensors = {}
    for name, arr in connector.tensors.items():
        tensors[CONNECTOR_GROUP + name] = arr
    for name, arr in lm.tensors.items():
        tensors[LM_GROUP + name] = arr
    save_checkpoint(path, config, tensors)


def load_pipeline(path):
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "pipeline":
        raise DataError(f"{path}: not a pipeline checkpoint")
    connector_cfg = DecoderConfig(**config["connector"])
    lm_cfg = DecoderConfig(**config["lm"])
    connector_tensors = {}
    lm_tensors = {}
    for name, arr in tensors.items():
        if name.startswith(CONNECTOR_GROUP):
            connector_tensors[name[len(CONNECTOR_GROUP):]] = arr
        elif name.startswith(LM_GROUP):
            lm_tensors[name[len(LM_GROUP):]] = arr
        else:
            raise DataError(f"{path}: tensor {name!r} belongs to no parameter group")
    connector = ConnectorParams(int(config["input_dim"]), connector_cfg, connector_tensors)
    lm = ToyLanguageModel(
        int(config["vocab_size"]), lm_cfg, bool(config["tied_output"]), lm_tensors
    )
    return connector, lm


# ---------------------------------------------------------------------------
# Alignment backends over manifest rows
# ---------------------------------------------------------------------------


def align_row(row: ManifestRow, backend: str, cfg: dict) -> AlignmentRecord:
    """Run one aligner backend over a manifest row.

    Interpretation of the row by backend:
      ctc: the feature file holds per-frame log-probabilities (blank last);
           tokens are required.
      mas: the feature file holds unit encodings, the aux file text-position
           encodings; tokens, when present, must match the text length.
      cif: the feature file holds speech features, the aux file one weight
           per frame; tokens, when present, fix the segment count.
    """
    frame_ms = cfg["frame_duration_ms"]
    features = load_feature_file(row.feature_path, frame_duration_ms=frame_ms)
    tokens = None
    if row.token_ids is not None or row.token_path is not None:
        ids = manifest_tokens(row)
        # vocabulary size is irrelevant to alignment; ctc re-checks ids
        # against the logprob width below
        tokens = TokenSequence(ids, vocab_size=max(ids) + 1)

    if backend == "ctc":
        if tokens is None:
            raise ManifestError(f"{row.utt_id}: ctc alignment requires target tokens")
        width = features.dim
        targets = TokenSequence(tokens.ids, vocab_size=width - 1)
        path = ctc_forced_align(features.frames, targets)
        boundaries = boundaries_from_path(path)
    elif backend == "mas":
        if row.aux_path is None:
            raise ManifestError(f"{row.utt_id}: mas alignment requires a text-encoding aux file")
        text_enc = load_feature_file(row.aux_path, frame_duration_ms=frame_ms)
        if tokens is not None and text_enc.num_frames != len(tokens):
            raise ManifestError(
                f"{row.utt_id}: {text_enc.num_frames} text positions vs {len(tokens)} tokens"
            )
        dist = build_distance_matrix(text_enc.frames, features.frames)
        prior = beta_binomial_prior(dist.shape[0], dist.shape[1], omega=cfg["omega"])
        path = monotonic_alignment_search(soft_alignment(dist, prior))
        boundaries = boundaries_from_path(path)
    elif backend == "cif":
        if row.aux_path is None:
            raise ManifestError(f"{row.utt_id}: cif alignment requires a weights aux file")
        weights_mat = load_feature_file(row.aux_path, frame_duration_ms=frame_ms)
        if weights_mat.dim != 1:
            raise ManifestError(
                f"{row.utt_id}: cif weights file must have one column, got {weights_mat.dim}"
            )
        weights = CifWeights(weights_mat.frames[:, 0], threshold=cfg["cif_threshold"])
        expected = len(tokens) if tokens is not None else None
        boundaries, _ = cif_segment(features, weights, expected_m=expected)
    else:
        raise DataError(f"unknown alignment backend {backend!r}")

    return AlignmentRecord(
        utt_id=row.utt_id,
        num_tokens=len(boundaries),
        num_frames=features.num_frames,
        boundaries=boundaries,
        backend=backend,
    )


# ---------------------------------------------------------------------------
# Corpus assembly
# ---------------------------------------------------------------------------


def infer_vocab_size(all_ids, configured: int) -> int:
    highest = max(max(ids) for ids in all_ids)
    if configured > 0:
        if highest >= configured:
            raise DataError(
                f"token id {highest} out of range for configured vocab_size {configured}"
            )
        return configured
    return highest + 1


def load_corpus(rows, alignments: dict, cfg: dict):
    """Build a training corpus from manifest rows plus alignment records.

    Returns (Corpus, vocab_size, input_dim).
    """
    frame_ms = cfg["frame_duration_ms"]
    token_lists = []
    loaded = []
    for row in rows:
        ids = manifest_tokens(row)
        token_lists.append(ids)
        loaded.append((row, ids))
    vocab_size = infer_vocab_size(token_lists, cfg["vocab_size"])

    utterances = []
    input_dim = None
    for row, ids in loaded:
        features = load_feature_file(row.feature_path, frame_duration_ms=frame_ms)
        if input_dim is None:
            input_dim = features.dim
        elif features.dim != input_dim:
            raise DataError(
                f"{row.utt_id}: feature dim {features.dim} differs from {input_dim}"
            )
        record = alignments.get(row.utt_id)
        if record is None:
            raise DataError(f"{row.utt_id}: no alignment record; run `ssr align` first")
        if record.num_tokens != len(ids):
            raise DataError(
                f"{row.utt_id}: alignment has {record.num_tokens} tokens, manifest has {len(ids)}"
            )
        if record.num_frames != features.num_frames:
            raise DataError(
                f"{row.utt_id}: alignment covers {record.num_frames} frames, "
                f"features have {features.num_frames}"
            )
        utterances.append(
            Utterance(
                utt_id=row.utt_id,
                features=features,
                tokens=TokenSequence(ids, vocab_size=vocab_size),
                boundaries=record.boundaries,
            )
        )
    return Corpus(speech_text=utterances), vocab_size, input_dim


def read_text_corpus(path, vocab_size: int) -> list:
    """Token-id sequences, one utterance per line."""
    sequences = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                ids = tuple(int(p) for p in parts)
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: expected integer ids: {exc}") from exc
            sequences.append(TokenSequence(ids, vocab_size=vocab_size))
    if not sequences:
        raise DataError(f"{path}: text corpus is empty")
    return sequences


def trivial_boundaries(num_rows: int) -> BoundaryIndices:
    """One boundary per row, for matrices that are already token-rate."""
    return BoundaryIndices(tuple(range(num_rows)))
