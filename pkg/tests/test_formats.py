"""Binary formats, alignment JSONL, and manifest parsing."""
import json
import os

import numpy as np
import pytest

from ssr.alignment import BoundaryIndices
from ssr.errors import (
    BadMagicError,
    BadVersionError,
    InvalidDimensionError,
    ManifestError,
    TruncatedFileError,
)
from ssr.formats import (
    AlignmentRecord,
    load_checkpoint,
    load_feature_file,
    manifest_tokens,
    read_alignments,
    read_manifest,
    save_checkpoint,
    save_feature_file,
    write_alignments,
)


class TestFeatureFiles:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        path = tmp_path / "x.ssrf"
        original = rng.normal(size=(5, 3)).astype(np.float32).astype(np.float64)
        save_feature_file(path, original)
        loaded = load_feature_file(path)
        assert loaded.frames.tobytes() == original.tobytes()
        # saving what was loaded reproduces the file byte for byte
        path2 = tmp_path / "y.ssrf"
        save_feature_file(path2, loaded.frames)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "bad.ssrf"
        save_feature_file(path, np.ones((4, 2)))
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(TruncatedFileError):
            load_feature_file(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ssrf"
        save_feature_file(path, np.ones((2, 2)))
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            load_feature_file(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.ssrf"
        save_feature_file(path, np.ones((2, 2)))
        data = bytearray(path.read_bytes())
        data[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(BadVersionError):
            load_feature_file(path)

    def test_zero_rows_header_rejected(self, tmp_path):
        path = tmp_path / "bad.ssrf"
        save_feature_file(path, np.ones((1, 2)))
        data = bytearray(path.read_bytes())
        data[8:12] = (0).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(InvalidDimensionError):
            load_feature_file(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "bad.ssrf"
        save_feature_file(path, np.ones((2, 2)))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(TruncatedFileError):
            load_feature_file(path)

    def test_non_finite_refused_on_save(self, tmp_path):
        bad = np.ones((2, 2))
        bad[0, 0] = np.nan
        with pytest.raises(InvalidDimensionError):
            save_feature_file(tmp_path / "x.ssrf", bad)


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {
            "a.weight": rng.normal(size=(3, 4)).astype(np.float32).astype(np.float64),
            "b.bias": rng.normal(size=(7,)).astype(np.float32).astype(np.float64),
            "scalarish": rng.normal(size=(1,)).astype(np.float32).astype(np.float64),
        }
        config = {"kind": "test", "dims": [3, 4], "flag": True}
        path = tmp_path / "ckpt.ssrc"
        save_checkpoint(path, config, tensors)
        loaded_config, loaded = load_checkpoint(path)
        assert loaded_config == config
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert loaded[name].tobytes() == tensors[name].tobytes()
        path2 = tmp_path / "ckpt2.ssrc"
        save_checkpoint(path2, loaded_config, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "ckpt.ssrc"
        save_checkpoint(path, {"kind": "t"}, {"w": np.ones((2, 2))})
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(path)

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "ckpt.ssrc"
        save_checkpoint(path, {"kind": "t"}, {"w": np.ones((2, 2))})
        data = bytearray(path.read_bytes())
        data[:4] = b"SSRF"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            load_checkpoint(path)


class TestPipelineCheckpoints:
    def test_save_load_save_is_stable(self, tmp_path):
        from ssr.connector import ConnectorParams
        from ssr.lm import ToyLanguageModel
        from ssr.nn import DecoderConfig
        from ssr.pipeline import load_pipeline, save_pipeline

        cfg = DecoderConfig(model_dim=8, layers=2, heads=2, ffn_dim=16, max_len=16, seed=3)
        connector = ConnectorParams.create(5, cfg)
        lm = ToyLanguageModel.create(9, DecoderConfig(
            model_dim=8, layers=2, heads=2, ffn_dim=16, max_len=16, seed=4
        ))
        path = tmp_path / "pipe.ssrc"
        save_pipeline(path, connector, lm)
        loaded_connector, loaded_lm = load_pipeline(path)
        assert loaded_connector.input_dim == 5
        assert loaded_connector.config == cfg
        assert loaded_lm.vocab_size == 9
        assert not loaded_lm.tied_output
        path2 = tmp_path / "pipe2.ssrc"
        save_pipeline(path2, loaded_connector, loaded_lm)
        assert path.read_bytes() == path2.read_bytes()

    def test_wrong_kind_rejected(self, tmp_path):
        from ssr.errors import DataError
        from ssr.pipeline import load_pipeline

        path = tmp_path / "other.ssrc"
        save_checkpoint(path, {"kind": "other"}, {"w": np.ones(2)})
        with pytest.raises(DataError, match="pipeline"):
            load_pipeline(path)


class TestAlignmentJsonl:
    def test_round_trip(self, tmp_path):
        records = [
            AlignmentRecord("utt0", 3, 8, BoundaryIndices((2, 5, 7)), "ctc"),
            AlignmentRecord("utt1", 1, 4, BoundaryIndices((3,)), "cif"),
        ]
        path = tmp_path / "a.jsonl"
        write_alignments(path, records)
        loaded = read_alignments(path)
        assert set(loaded) == {"utt0", "utt1"}
        assert loaded["utt0"].boundaries.indices == (2, 5, 7)
        assert loaded["utt1"].backend == "cif"
        # byte-identical re-serialization
        path2 = tmp_path / "b.jsonl"
        write_alignments(path2, [loaded["utt0"], loaded["utt1"]])
        assert path.read_bytes() == path2.read_bytes()

    def test_duplicate_utt_rejected(self, tmp_path):
        path = tmp_path / "a.jsonl"
        line = json.dumps({"utt_id": "u", "m": 1, "n": 2, "boundaries": [1], "backend": "ctc"})
        path.write_text(line + "\n" + line + "\n")
        with pytest.raises(ManifestError, match="duplicate"):
            read_alignments(path)

    def test_inconsistent_record_rejected(self, tmp_path):
        path = tmp_path / "a.jsonl"
        path.write_text(
            json.dumps({"utt_id": "u", "m": 2, "n": 8, "boundaries": [7], "backend": "ctc"}) + "\n"
        )
        with pytest.raises(ManifestError):
            read_alignments(path)

    def test_record_validates_backend(self):
        with pytest.raises(ValueError, match="backend"):
            AlignmentRecord("u", 1, 8, BoundaryIndices((7,)), "banana")


class TestManifest:
    def _feature(self, tmp_path, name="f.ssrf"):
        path = tmp_path / name
        save_feature_file(path, np.ones((4, 2)))
        return path

    def test_inline_and_file_tokens(self, tmp_path):
        feat = self._feature(tmp_path)
        tok = tmp_path / "t.txt"
        tok.write_text("4 5 6\n")
        manifest = tmp_path / "m.tsv"
        manifest.write_text(
            f"utt0\t{feat.name}\t1, 2, 3\n"
            f"utt1\t{feat.name}\t{tok.name}\n"
            "# comment line\n"
        )
        rows = read_manifest(manifest)
        assert manifest_tokens(rows[0]) == (1, 2, 3)
        assert manifest_tokens(rows[1]) == (4, 5, 6)
        assert rows[0].feature_path == str(feat)

    def test_duplicate_utt_id_rejected(self, tmp_path):
        feat = self._feature(tmp_path)
        manifest = tmp_path / "m.tsv"
        manifest.write_text(f"u\t{feat.name}\t1\nu\t{feat.name}\t2\n")
        with pytest.raises(ManifestError, match="duplicate"):
            read_manifest(manifest)

    def test_missing_feature_file_rejected(self, tmp_path):
        manifest = tmp_path / "m.tsv"
        manifest.write_text("u\tnothere.ssrf\t1\n")
        with pytest.raises(ManifestError, match="missing feature"):
            read_manifest(manifest)

    def test_aux_column(self, tmp_path):
        feat = self._feature(tmp_path)
        aux = self._feature(tmp_path, "aux.ssrf")
        manifest = tmp_path / "m.tsv"
        manifest.write_text(f"u\t{feat.name}\t1 2\t{aux.name}\n")
        rows = read_manifest(manifest)
        assert rows[0].aux_path == str(aux)

    def test_empty_manifest_rejected(self, tmp_path):
        manifest = tmp_path / "m.tsv"
        manifest.write_text("# nothing\n")
        with pytest.raises(ManifestError, match="no usable rows"):
            read_manifest(manifest)

    def test_no_stray_temp_files_after_writes(self, tmp_path):
        save_feature_file(tmp_path / "a.ssrf", np.ones((2, 2)))
        save_checkpoint(tmp_path / "b.ssrc", {"kind": "t"}, {"w": np.ones(2)})
        leftover = [p for p in os.listdir(tmp_path) if p.startswith(".tmp-")]
        assert leftover == []
