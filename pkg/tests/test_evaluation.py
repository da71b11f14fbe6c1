"""WER, choice scoring, boundary metrics, greedy transcription."""
import numpy as np
import pytest

from helpers import fresh_desk_models
from ssr.alignment import BoundaryIndices, TokenSequence
from ssr.connector import CompressedRepresentation
from ssr.evaluation import (
    BoundaryTimes,
    ChoiceTask,
    boundary_metrics,
    choice_eval,
    edit_distance,
    frames_to_times,
    normalize_words,
    transcribe_greedy,
    word_error_rate,
)
from ssr.lm import ToyLanguageModel
from ssr.nn import DecoderConfig


class TestWordErrorRate:
    def test_identical_is_zero(self):
        words = "the cat sat down".split()
        assert word_error_rate(words, words) == 0.0

    def test_one_substitution_in_four(self):
        ref = "the cat sat down".split()
        hyp = "the dog sat down".split()
        assert word_error_rate(hyp, ref) == pytest.approx(0.25)

    def test_empty_hypothesis_is_all_deletions(self):
        ref = ["a", "b", "c"]
        assert word_error_rate([], ref) == pytest.approx(1.0)

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError, match="reference"):
            word_error_rate(["a"], [])

    def test_symmetry_of_edit_distance(self):
        rng = np.random.default_rng(0)
        vocab = list("abcdef")
        for _ in range(30):
            a = [vocab[i] for i in rng.integers(0, 6, size=rng.integers(1, 9))]
            b = [vocab[i] for i in rng.integers(0, 6, size=rng.integers(1, 9))]
            assert word_error_rate(a, b) * len(b) == pytest.approx(
                word_error_rate(b, a) * len(a)
            )

    def test_insertions_count(self):
        assert edit_distance(["a", "x", "b"], ["a", "b"]) == 1

    def test_normalization(self):
        assert normalize_words("The CAT, sat!") == ["the", "cat", "sat"]


class TestChoiceEval:
    def _lm(self):
        cfg = DecoderConfig(model_dim=8, layers=2, heads=2, ffn_dim=16, max_len=32, seed=2)
        return ToyLanguageModel.create(6, cfg)

    def _prefix(self, lm):
        rows = np.random.default_rng(3).normal(size=(3, 8))
        return CompressedRepresentation(rows, BoundaryIndices((0, 1, 2)))

    def test_single_choice_returns_zero(self):
        lm = self._lm()
        task = ChoiceTask(self._prefix(lm), [[1, 2]], gold=0)
        chosen, ppls = choice_eval(lm, task)
        assert chosen == 0
        assert len(ppls) == 1

    def test_duplicate_choices_tie_to_first(self):
        lm = self._lm()
        task = ChoiceTask(self._prefix(lm), [[4, 2, 1], [4, 2, 1]], gold=0)
        chosen, ppls = choice_eval(lm, task)
        assert chosen == 0
        assert ppls[0] == pytest.approx(ppls[1])

    def test_ordering_of_other_choices_irrelevant(self):
        lm = self._lm()
        prefix = self._prefix(lm)
        choices = [[1, 2], [3, 4], [5, 0]]
        base_chosen, base_ppls = choice_eval(lm, ChoiceTask(prefix, choices, gold=0))
        swapped = [choices[0], choices[2], choices[1]]
        new_chosen, new_ppls = choice_eval(lm, ChoiceTask(prefix, swapped, gold=0))
        assert sorted(base_ppls) == pytest.approx(sorted(new_ppls))
        best = min(range(3), key=lambda i: base_ppls[i])
        assert base_ppls[base_chosen] == pytest.approx(new_ppls[new_chosen])

    def test_token_prefix_accepted(self):
        lm = self._lm()
        task = ChoiceTask(TokenSequence((1, 2), 6), [[3], [4]], gold=0)
        chosen, ppls = choice_eval(lm, task)
        assert chosen in (0, 1)
        assert all(p > 0 for p in ppls)

    def test_out_of_vocab_choice_rejected(self):
        lm = self._lm()
        with pytest.raises(ValueError, match="vocabulary"):
            choice_eval(lm, ChoiceTask(self._prefix(lm), [[7]], gold=0))

    def test_gold_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="gold"):
            ChoiceTask(TokenSequence((1,), 6), [[1], [2]], gold=2)


class TestBoundaryMetrics:
    def test_exact_prediction(self):
        gold = BoundaryTimes((100.0, 250.0, 400.0))
        wbe, wdur = boundary_metrics(gold, gold)
        assert wbe == 0.0
        assert wdur == pytest.approx((100 + 150 + 150) / 3)

    def test_uniform_shift(self):
        gold = BoundaryTimes((100.0, 250.0, 400.0))
        pred = BoundaryTimes((110.0, 260.0, 410.0))
        wbe, _ = boundary_metrics(pred, gold)
        assert wbe == pytest.approx(10.0)

    def test_frame_conversion_and_duration(self):
        times = frames_to_times((2, 5, 7), 20.0)
        assert times.times_ms == (60.0, 120.0, 160.0)
        _, wdur = boundary_metrics(times, times)
        assert wdur == pytest.approx(160.0 / 3)

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            boundary_metrics(BoundaryTimes((1.0,)), BoundaryTimes((1.0, 2.0)))

    def test_times_must_increase(self):
        with pytest.raises(ValueError):
            BoundaryTimes((5.0, 5.0))


class TestTranscribeGreedy:
    def test_uniform_model_emits_lowest_id(self):
        cfg = DecoderConfig(model_dim=8, layers=1, heads=2, ffn_dim=16, max_len=16, seed=4)
        lm = ToyLanguageModel.create(4, cfg)
        lm.tensors["out.weight"] = np.zeros_like(lm.tensors["out.weight"])
        rows = np.random.default_rng(5).normal(size=(4, 8))
        z = CompressedRepresentation(rows, BoundaryIndices((0, 1, 2, 3)))
        decoded = transcribe_greedy(lm, z)
        assert decoded.ids == (0, 0, 0, 0)

    def test_length_matches_rows(self):
        connector, lm = fresh_desk_models()
        rows = np.random.default_rng(6).normal(size=(5, 32))
        z = CompressedRepresentation(rows, BoundaryIndices((0, 1, 2, 3, 4)))
        decoded = transcribe_greedy(lm, z)
        assert len(decoded) == 5
        assert word_error_rate(
            [str(i) for i in decoded.ids], [str(i) for i in (1, 2, 3, 4, 5)]
        ) >= 0.0
