import math

import pytest

from synmask.bleu import BleuError, corpus_bleu


class TestCorpusBleu:
    def test_identical_corpora(self):
        corpus = [["the", "cat", "sat"], ["on", "the", "mat", "today"]]
        assert corpus_bleu(corpus, corpus) == 100.0

    def test_size_mismatch(self):
        with pytest.raises(BleuError):
            corpus_bleu([["a"]], [["a"], ["b"]])

    def test_empty_corpus(self):
        with pytest.raises(BleuError):
            corpus_bleu([], [])

    def test_smoothing_floor(self):
        # no 4-gram can match when every hypothesis is shorter than 4 tokens,
        # so the smoothed score stays below one BLEU point
        hyps = [["a", "b", "c"], ["d", "e"]]
        score = corpus_bleu(hyps, hyps)
        assert 0.0 < score < 1.0

    def test_brevity_penalty_only(self):
        # perfect clipped precisions at every order, hypothesis 4/5 of the
        # reference length: score = 100 * exp(1 - 5/4)
        score = corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
        assert score == pytest.approx(100.0 * math.exp(1.0 - 5.0 / 4.0),
                                      abs=1e-9)

    def test_two_sentence_hand_computation(self):
        # pooled clipped counts, worked by hand:
        #   1-gram 7/8, 2-gram 4/6, 3-gram 2/4, 4-gram 1/2, equal lengths
        hyps = [["a", "b", "c", "d"], ["a", "b", "x", "d"]]
        refs = [["a", "b", "c", "d"], ["a", "b", "c", "d"]]
        expected = 100.0 * (7 / 8 * 4 / 6 * 2 / 4 * 1 / 2) ** 0.25
        score = corpus_bleu(hyps, refs)
        assert score == pytest.approx(expected, abs=0.1)
        assert score == pytest.approx(61.7966, abs=0.01)

    def test_clipping(self):
        # repeated hypothesis unigrams are clipped to the reference count
        score_repeat = corpus_bleu([["a", "a", "a", "a"]], [["a", "b", "c", "d"]])
        score_single = corpus_bleu([["a", "x", "y", "z"]], [["a", "b", "c", "d"]])
        # both have one matching unigram after clipping
        assert score_repeat == pytest.approx(score_single, abs=1e-9)

    def test_empty_hypothesis_scores_zero(self):
        assert corpus_bleu([[]], [["a", "b"]]) == 0.0

    def test_order_matters(self):
        good = corpus_bleu([["a", "b", "c", "d", "e"]], [["a", "b", "c", "d", "e"]])
        scrambled = corpus_bleu([["e", "d", "c", "b", "a"]], [["a", "b", "c", "d", "e"]])
        assert scrambled < good
