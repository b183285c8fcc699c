import itertools
import math
from collections import Counter, OrderedDict

import numpy as np
import pytest

from apps.corpus.schemas import EOS_ID
from apps.decoding.bleu import bleu4, format_bleu
from apps.decoding.schemas import BeamConfig, CheckpointSet
from apps.decoding.service import (
    average_checkpoints,
    beam_search,
    check_context,
    greedy_decode,
    greedy_decode_batch,
    greedy_search,
    length_penalty,
    search,
    translate_all,
)
from apps.heads.schemas import HeadKind
from apps.model.schemas import ModelConfig
from apps.model.service import init_params
from core.exceptions import CheckpointError, ConfigError, ContextError, DataError, MathDomainError
from core.tensor import precision

VOCAB = 5


def table_step(prefixes):
    """Fixed pseudo-random next-token distribution per prefix."""
    rows = []
    for prefix in prefixes:
        logits = np.random.default_rng([7, *prefix]).normal(size=VOCAB) * 2.0
        rows.append(logits - np.log(np.exp(logits).sum()))
    return np.array(rows)


def ranked_step(seed):
    """Random per-prefix ranking of the vocabulary, ranks 10 nats apart with jitter."""

    def step(prefixes):
        rows = []
        for prefix in prefixes:
            rng = np.random.default_rng([seed, *prefix])
            logits = np.empty(VOCAB)
            logits[rng.permutation(VOCAB)] = -10.0 * np.arange(VOCAB) + rng.uniform(0.0, 0.5, size=VOCAB)
            rows.append(logits - np.log(np.exp(logits).sum()))
        return np.array(rows)

    return step


def exhaustive_best(step_fn, max_len, alpha):
    """Best penalized score over EOS-terminated outputs and unterminated ones of full length."""
    body_tokens = [t for t in range(VOCAB) if t != EOS_ID]
    candidates = [
        body + (EOS_ID,)
        for length in range(1, max_len + 1)
        for body in itertools.product(body_tokens, repeat=length - 1)
    ]
    candidates += list(itertools.product(body_tokens, repeat=max_len))
    best = None
    for tokens in candidates:
        logprob = sum(step_fn([tokens[:i]])[0][tokens[i]] for i in range(len(tokens)))
        score = logprob / length_penalty(len(tokens), alpha)
        if best is None or score > best[1]:
            best = (tokens, score)
    return best


@pytest.fixture
def params():
    config = ModelConfig(
        d_model=12, n_heads=3, d_ff=16, n_enc_layers=1, n_dec_layers=1, dropout=0.0, max_len=12, vocab_size=15
    )
    with precision(64):
        return init_params(config)


class TestLengthPenalty:
    def test_reference_values(self):
        assert length_penalty(1, 0.6) == pytest.approx(1.0)
        assert length_penalty(7, 0.6) == pytest.approx(2 ** 0.6)
        assert length_penalty(30, 0.0) == 1.0

    def test_zero_length(self):
        with pytest.raises(MathDomainError):
            length_penalty(0, 0.6)


class TestSearch:
    @pytest.mark.parametrize("alpha", [0.0, 0.6, 1.0])
    def test_wide_beam_is_exact(self, alpha):
        tokens, score = exhaustive_best(table_step, 4, alpha)
        found = search(table_step, beam=VOCAB ** 4, alpha=alpha, max_len=4)
        assert found.tokens == tokens
        assert found.score == pytest.approx(score)
        assert found.finished == (tokens[-1] == EOS_ID)

    @pytest.mark.parametrize("seed", range(20))
    def test_wide_beam_is_exact_on_random_models(self, seed):
        step = ranked_step(seed)
        alpha = (0.0, 0.6, 1.0)[seed % 3]
        tokens, score = exhaustive_best(step, 3, alpha)
        found = search(step, beam=VOCAB ** 3, alpha=alpha, max_len=3)
        assert found.tokens == tokens
        assert found.score == pytest.approx(score, abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_wider_beam_never_scores_lower(self, seed):
        step = ranked_step(100 + seed)
        scores = [search(step, beam=beam, alpha=0.6, max_len=3).score for beam in range(1, 9)]
        for narrow, wide in zip(scores, scores[1:]):
            assert wide >= narrow - 1e-12

    def test_alive_hypothesis_beats_weaker_finished_one(self):
        def step(prefixes):
            rows = np.full((len(prefixes), VOCAB), np.log(1e-6))
            for i, prefix in enumerate(prefixes):
                if prefix:
                    rows[i, 3] = np.log(0.9)
                else:
                    rows[i, EOS_ID] = np.log(0.3)
                    rows[i, 3] = np.log(0.7)
            return rows

        found = search(step, beam=2, alpha=0.6, max_len=2)
        assert found.tokens == (3, 3)
        assert not found.finished

    def test_length_penalty_crossover(self):
        tiny = 1e-12

        def step(prefixes):
            rows = []
            for prefix in prefixes:
                p = np.full(VOCAB, tiny)
                if prefix == ():
                    p[EOS_ID], p[3] = 0.55, 0.45
                elif prefix == (3,):
                    p[EOS_ID] = 1.0
                else:
                    p[:] = 1.0
                rows.append(np.log(p / p.sum()))
            return np.array(rows)

        short = step([()])[0][EOS_ID]
        long = step([()])[0][3] + step([(3,)])[0][EOS_ID]
        crossover = np.log(short / long) / np.log(6.0 / 7.0)
        assert short / length_penalty(1, crossover) == pytest.approx(long / length_penalty(2, crossover))
        assert search(step, beam=2, alpha=crossover - 0.05, max_len=2).tokens == (EOS_ID,)
        assert search(step, beam=2, alpha=crossover + 0.05, max_len=2).tokens == (3, EOS_ID)

    def test_beam_of_one_is_greedy(self):
        assert search(table_step, beam=1, alpha=0.6, max_len=6).tokens == greedy_search(table_step, 6)

    def test_unfinished_output_at_length_limit(self):
        def never_stop(prefixes):
            rows = np.full((len(prefixes), VOCAB), np.log(0.1))
            rows[:, 3] = np.log(0.6)
            return rows

        found = search(never_stop, beam=2, alpha=0.6, max_len=3)
        assert found.tokens == (3, 3, 3)
        assert not found.finished

    def test_invalid_beam_config(self):
        with pytest.raises(ConfigError):
            BeamConfig(beam=0)
        with pytest.raises(ConfigError):
            BeamConfig(alpha=-0.1)


class TestModelDecoding:
    def test_beam_of_one_matches_greedy_decoders(self, params):
        sources = [[4, 5, 6, 7], [8, 9, 10, 11], [12, 4, 13, 5]]
        cfg = BeamConfig(beam=1, max_len=8)
        beams = [beam_search(params, src, None, cfg).tokens for src in sources]
        singles = [greedy_decode(params, src, None, 8) for src in sources]
        assert beams == singles
        assert greedy_decode_batch(params, sources, None, 8) == singles

    def test_translate_all_keeps_order(self, params):
        sources = [[4, 5], [6, 7, 8], [9]]
        cfg = BeamConfig(beam=2, max_len=5)
        parallel = translate_all(params, sources, None, cfg, workers=3)
        assert [h.tokens for h in parallel] == [beam_search(params, s, None, cfg).tokens for s in sources]

    def test_output_respects_length_limit(self, params):
        hypothesis = beam_search(params, [4, 5, 6], None, BeamConfig(beam=3, max_len=4))
        assert 1 <= hypothesis.length <= 4

    def test_group_head_needs_context(self):
        config = ModelConfig(d_model=12, n_heads=3, vocab_size=15, head_kind=HeadKind.DOMEXTR, n_groups=2)
        params = init_params(config)
        assert check_context(params, 2) == 2
        with pytest.raises(ContextError):
            check_context(params, None)
        with pytest.raises(ContextError):
            check_context(params, 3)


def snapshot(value):
    return OrderedDict([("w", np.full((2, 2), value, dtype=np.float32)), ("b", np.array([value], dtype=np.float32))])


class TestCheckpointAveraging:
    def test_identical_snapshots_come_back_unchanged(self):
        checkpoints = CheckpointSet()
        base = OrderedDict([("w", np.random.default_rng(0).normal(size=(3, 3)).astype(np.float32))])
        for step in (10, 20, 30):
            checkpoints.add(step, OrderedDict((k, v.copy()) for k, v in base.items()))
        np.testing.assert_array_equal(average_checkpoints(checkpoints, 3)["w"], base["w"])

    def test_mean_of_last_k(self):
        checkpoints = CheckpointSet()
        for step, value in ((1, 1.0), (2, 2.0), (3, 3.0)):
            checkpoints.add(step, snapshot(value))
        averaged = average_checkpoints(checkpoints, 2)
        np.testing.assert_allclose(averaged["w"], np.full((2, 2), 2.5))
        np.testing.assert_allclose(averaged["b"], [2.5])

    def test_matches_coordinate_sums(self):
        rng = np.random.default_rng(4)
        checkpoints = CheckpointSet()
        for step in range(1, 7):
            checkpoints.add(step, OrderedDict([("w", rng.normal(size=(3, 4))), ("b", rng.normal(size=5) * 100.0)]))
        averaged = average_checkpoints(checkpoints, 4)
        chosen = checkpoints.snapshots[-4:]
        for name in ("w", "b"):
            assert averaged[name].dtype == np.float64
            for index in np.ndindex(averaged[name].shape):
                expected = sum(float(s[name][index]) for s in chosen) / 4
                assert abs(averaged[name][index] - expected) < 1e-12 * max(1.0, abs(expected))

    def test_too_few_checkpoints(self):
        checkpoints = CheckpointSet()
        checkpoints.add(1, snapshot(1.0))
        with pytest.raises(CheckpointError):
            average_checkpoints(checkpoints, 2)

    def test_steps_must_increase(self):
        checkpoints = CheckpointSet()
        checkpoints.add(5, snapshot(1.0))
        with pytest.raises(CheckpointError):
            checkpoints.add(5, snapshot(2.0))

    def test_shapes_must_agree(self):
        checkpoints = CheckpointSet()
        checkpoints.add(1, snapshot(1.0))
        with pytest.raises(CheckpointError):
            checkpoints.add(2, OrderedDict([("w", np.zeros((3, 2))), ("b", np.zeros(1))]))


def counted_bleu(hypotheses, references):
    """Clipped n-gram BLEU-4 with a 1e-9 floor on empty matches."""
    matches, totals = [0] * 4, [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = hyp.lower().split(), ref.lower().split()
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hyp_grams = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
            ref_grams = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
            matches[n - 1] += sum(min(count, ref_grams[gram]) for gram, count in hyp_grams.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    precisions = [(m if m else 1e-9) / t for m, t in zip(matches, totals)]
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(sum(math.log(p) for p in precisions) / 4)


def random_corpus(seed):
    rng = np.random.default_rng(seed)
    words = ["Alpha", "beta", "gamma", "delta", "eps", "zeta"]
    hypotheses, references = [], []
    for _ in range(int(rng.integers(5, 15))):
        ref = [words[i] for i in rng.integers(0, len(words), size=int(rng.integers(4, 10)))]
        hyp = [w if rng.random() < 0.7 else words[int(rng.integers(len(words)))] for w in ref]
        hyp = hyp[: int(rng.integers(4, len(hyp) + 1))]
        references.append(" ".join(ref))
        hypotheses.append(" ".join(hyp).lower() if rng.random() < 0.5 else " ".join(hyp))
    return hypotheses, references


class TestBleu:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_counted_ngrams(self, seed):
        hypotheses, references = random_corpus(seed)
        assert bleu4(hypotheses, references) == pytest.approx(counted_bleu(hypotheses, references), abs=0.01)

    @pytest.mark.parametrize("seed", range(3))
    def test_pair_order_does_not_matter(self, seed):
        hypotheses, references = random_corpus(seed)
        order = np.random.default_rng(seed).permutation(len(references))
        shuffled = bleu4([hypotheses[i] for i in order], [references[i] for i in order])
        assert shuffled == pytest.approx(bleu4(hypotheses, references), abs=1e-9)

    def test_identical_output(self):
        lines = ["the cat sat on the mat", "a b c d e"]
        assert bleu4(lines, lines) == pytest.approx(100.0)

    def test_case_is_ignored(self):
        assert bleu4(["The Cat sat on it"], ["the cat sat on it"]) == pytest.approx(100.0)

    def test_missing_four_grams_hit_the_floor(self):
        assert bleu4(["a b c d"], ["a b c e"]) == pytest.approx(0.3978, rel=1e-3)

    def test_no_overlap(self):
        assert bleu4(["p q r s"], ["a b c d"]) == pytest.approx(0.0, abs=1e-6)

    def test_line_count_mismatch(self):
        with pytest.raises(DataError):
            bleu4(["a"], ["a", "b"])

    def test_empty_reference(self):
        with pytest.raises(DataError):
            bleu4(["a"], [""])

    def test_reserved_tokens_never_scored(self):
        with pytest.raises(DataError):
            bleu4([("2d1", "a", "b")], [("a", "b")], reserved={"2d1"})

    def test_format(self):
        assert format_bleu(27.5) == "BLEU = 27.50"
