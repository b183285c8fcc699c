from collections import Counter

import numpy as np
import pytest

from apps.adaptation.convergence import ConvergenceMonitor, should_stop
from apps.adaptation.schemas import ExperimentPlan, Handoff, StrategyKind, TrainingConfig
from apps.adaptation.service import (
    corpus_contexts,
    evaluate_tests,
    prepare_lexicons,
    resume_params,
    run_fine_tuning,
    run_mixed_fine_tuning,
    run_proposed,
    run_strategy,
    stage_corpus,
    stage_layout,
    training_corpus,
)
from apps.corpus.schemas import ReorderRule, SynthCorpusSpec, SynthSpec
from apps.corpus.service import collate
from apps.corpus.synth import synth_tasks
from apps.decoding.schemas import BeamConfig
from apps.heads.schemas import HeadKind
from apps.model.schemas import ModelConfig, ModelParams
from apps.model.service import forward_logits, init_params
from core.exceptions import ConfigError, PlanError, VocabError

TINY_MODEL = ModelConfig(d_model=12, n_heads=2, d_ff=16, n_enc_layers=1, n_dec_layers=1, dropout=0.0, max_len=40)

FAST_TRAINING = TrainingConfig(
    max_tokens=64,
    eval_interval=2,
    window=1,
    max_batches=4,
    warmup=4,
    bpe_merges=10,
    vocab_cap=200,
    dev_limit=3,
    eval_batch_size=8,
    last_k=2,
)


@pytest.fixture(scope="module")
def bundles():
    spec = SynthSpec(
        corpora=(
            SynthCorpusSpec(name="ind", src_lang="j", domain="med", reorder=ReorderRule.SWAP_PAIRS, train=12, dev=3, test=3),
            SynthCorpusSpec(name="ood", src_lang="j", domain="news", train=24, dev=3, test=3),
            SynthCorpusSpec(name="ood_c", src_lang="c", domain="news", train=24, dev=3, test=3),
            SynthCorpusSpec(name="ood_f", src_lang="j", tgt_lang="f", domain="law", train=24, dev=3, test=3),
        ),
        in_domain="ind",
        region_size=8,
        min_len=3,
        max_len=5,
    )
    return synth_tasks(spec, seed=5)


def make_plan(bundles, strategy, parents=("ood",), head_kind=HeadKind.VANILLA, **overrides):
    values = dict(
        child=bundles["ind"],
        parents=tuple(bundles[name] for name in parents),
        strategy=strategy,
        head_kind=head_kind,
        model=TINY_MODEL,
        training=FAST_TRAINING,
        seed=1,
    )
    values.update(overrides)
    return ExperimentPlan(**values)


class TestStoppingRule:
    def test_flat_trace_stops_after_window(self):
        trace = [10.0, 10.01, 10.02, 10.03]
        assert not should_stop(trace[:3], window=3, min_delta=0.05)
        assert should_stop(trace, window=3, min_delta=0.05)

    def test_improving_trace_continues(self):
        assert not should_stop([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], window=5, min_delta=0.05)

    def test_regression_stops(self):
        assert should_stop([20.0, 19.0, 18.5], window=2, min_delta=0.05)

    def test_same_trace_same_decision(self):
        trace = [3.0, 3.2, 3.21, 3.22, 3.24, 3.25]
        monitor = ConvergenceMonitor(window=3)
        assert monitor.should_stop(trace) == monitor.should_stop(list(trace))

    def test_eval_steps(self):
        monitor = ConvergenceMonitor.from_training(FAST_TRAINING)
        assert [s for s in range(1, 6) if monitor.is_eval_step(s)] == [2, 4, 5]


class TestPlan:
    @pytest.mark.parametrize("strategy", [StrategyKind.FINE_TUNING, StrategyKind.PROPOSED, StrategyKind.PROPOSED_MFT])
    def test_single_target_strategies_reject_two_targets(self, bundles, strategy):
        head = HeadKind.DOMEXTR if strategy.uses_head else HeadKind.VANILLA
        with pytest.raises(PlanError):
            make_plan(bundles, strategy, parents=("ood", "ood_f"), head_kind=head)

    @pytest.mark.parametrize("strategy", [StrategyKind.MULTI_DOMAIN, StrategyKind.MIXED_FINE_TUNING])
    def test_tagged_strategies_accept_two_targets(self, bundles, strategy):
        plan = make_plan(bundles, strategy, parents=("ood", "ood_f"))
        assert plan.target_languages == ("e", "f")
        assert plan.tag_scheme.include_lang_tag

    def test_proposed_needs_group_head(self, bundles):
        with pytest.raises(PlanError):
            make_plan(bundles, StrategyKind.PROPOSED)

    def test_head_only_for_proposed(self, bundles):
        with pytest.raises(PlanError):
            make_plan(bundles, StrategyKind.MULTI_DOMAIN, head_kind=HeadKind.DOMEXTR)

    def test_fine_tuning_needs_parents(self, bundles):
        with pytest.raises(PlanError):
            make_plan(bundles, StrategyKind.FINE_TUNING, parents=())

    def test_group_ids_must_be_contiguous(self, bundles):
        with pytest.raises(PlanError):
            make_plan(bundles, StrategyKind.MULTI_DOMAIN, groups={"ind": 1, "ood": 3})

    def test_indivisible_specializing_width(self, bundles):
        # D = 3 needs d_model divisible by 4
        with pytest.raises(ConfigError):
            make_plan(
                bundles,
                StrategyKind.PROPOSED,
                parents=("ood", "ood_c"),
                head_kind=HeadKind.DOMSPEC,
                model=TINY_MODEL.model_copy(update={"d_model": 10}),
            )

    def test_head_covers_every_corpus(self, bundles):
        plan = make_plan(bundles, StrategyKind.PROPOSED, parents=("ood", "ood_c"), head_kind=HeadKind.DOMEXTR)
        assert plan.model_for(100).n_groups == 3
        assert plan.group_ids == {"ind": 1, "ood": 2, "ood_c": 3}


class TestStageData:
    def test_fine_tuning_develops_on_in_domain_data(self, bundles):
        layout = stage_layout(make_plan(bundles, StrategyKind.FINE_TUNING))
        assert [s.name for s in layout] == ["parent", "child"]
        assert [b.name for b in layout[1].dev] == ["ind"]
        assert [b.name for b in layout[0].train] == ["ood"]

    def test_mixed_fine_tuning_develops_on_mixed_data(self, bundles):
        layout = stage_layout(make_plan(bundles, StrategyKind.MIXED_FINE_TUNING))
        assert [b.name for b in layout[1].dev] == ["ind", "ood"]

    def test_multi_domain_data_is_tagged_and_balanced(self, bundles):
        plan = make_plan(bundles, StrategyKind.MULTI_DOMAIN)
        corpus = training_corpus(plan, plan.corpora, seed=1)
        assert Counter(src[0] for src in corpus.sources) == {"2d1": 24, "2d2": 24}
        assert corpus.groups is None

    def test_proposed_data_carries_groups_without_tags(self, bundles):
        plan = make_plan(bundles, StrategyKind.PROPOSED, head_kind=HeadKind.DOMEXTR)
        corpus = training_corpus(plan, plan.corpora, seed=1)
        assert Counter(corpus.groups) == {1: 24, 2: 24}
        assert not any(src[0].startswith("2d") for src in corpus.sources)

    def test_proposed_mft_parent_stage_never_sees_in_domain_group(self, bundles):
        plan = make_plan(bundles, StrategyKind.PROPOSED_MFT, head_kind=HeadKind.DOMEXTR)
        layout = stage_layout(plan)
        assert set(training_corpus(plan, layout[0].train, seed=1).groups) == {2}
        assert set(training_corpus(plan, layout[1].train, seed=2).groups) == {1, 2}

    def test_contexts(self, bundles):
        tagged = corpus_contexts(make_plan(bundles, StrategyKind.MULTI_DOMAIN))
        assert tagged["ood"].tag_prefix == ("2d2",)
        plain = corpus_contexts(make_plan(bundles, StrategyKind.PROPOSED, head_kind=HeadKind.DOMSPEC))
        assert plain["ind"].tag_prefix == ()
        assert plain["ind"].group == 1


class TestRuns:
    def test_mixed_fine_tuning_stages_hand_off_weights(self, bundles):
        result = run_mixed_fine_tuning(make_plan(bundles, StrategyKind.MIXED_FINE_TUNING))
        parent, child = result.stages
        assert (parent.name, child.name) == ("parent", "mixed")
        for name, array in parent.final_params.items():
            np.testing.assert_array_equal(child.start_params[name], array)
        assert parent.steps <= FAST_TRAINING.max_batches
        assert all(0.0 <= row.bleu <= 100.0 for row in parent.trace + child.trace)

    def test_single_evaluation_gives_one_checkpoint(self, bundles):
        training = FAST_TRAINING.model_copy(update={"eval_interval": 3, "max_batches": 3})
        result = run_strategy(make_plan(bundles, StrategyKind.IN_DOMAIN_ONLY, parents=(), training=training))
        assert len(result.checkpoints) == 1
        assert result.checkpoints.steps == [3]

    def test_last_checkpoint_handoff(self, bundles):
        training = FAST_TRAINING.model_copy(update={"handoff": Handoff.LAST})
        result = run_strategy(make_plan(bundles, StrategyKind.CONCAT, training=training))
        stage = result.stages[0]
        for name, array in stage.checkpoints.snapshots[-1].items():
            np.testing.assert_array_equal(stage.final_params[name], array)

    def test_proposed_run_scores_every_test_set(self, bundles):
        plan = make_plan(bundles, StrategyKind.PROPOSED, head_kind=HeadKind.DOMEXTR)
        result = run_proposed(plan)
        assert result.config.n_groups == 2
        scores = evaluate_tests(result, BeamConfig(beam=2, max_len=20), plan.corpora)
        assert set(scores) == {"ind", "ood"}
        assert all(0.0 <= s <= 100.0 for s in scores.values())

    def test_cross_lingual_fine_tuning_maps_vocabulary(self, bundles):
        plan = make_plan(bundles, StrategyKind.FINE_TUNING, parents=("ood_c",))
        assert plan.cross_lingual
        parent_lexicon, child_lexicon = prepare_lexicons(plan)
        assert len(child_lexicon.vocab) == len(parent_lexicon.vocab)
        result = run_fine_tuning(plan)
        assert [s.name for s in result.stages] == ["parent", "child"]

    def test_resume_from_parent_skips_first_stage(self, bundles):
        plan = make_plan(bundles, StrategyKind.FINE_TUNING)
        lexicons = prepare_lexicons(plan)
        parent = init_params(plan.model_for(len(lexicons[0].vocab)), seed=9)
        result = run_strategy(plan, lexicons, parent=parent)
        assert [s.name for s in result.stages] == ["child"]
        for name in parent:
            np.testing.assert_array_equal(result.stages[0].start_params[name], parent[name].data)

    def test_parent_with_other_dimensions(self, bundles):
        plan = make_plan(bundles, StrategyKind.FINE_TUNING)
        lexicons = prepare_lexicons(plan)
        config = plan.model_for(len(lexicons[0].vocab)).model_copy(update={"d_ff": 8})
        with pytest.raises(ConfigError):
            run_strategy(plan, lexicons, parent=init_params(config))

    def test_single_stage_strategy_has_no_parent_stage(self, bundles):
        plan = make_plan(bundles, StrategyKind.CONCAT)
        lexicons = prepare_lexicons(plan)
        with pytest.raises(PlanError):
            run_strategy(plan, lexicons, parent=init_params(plan.model_for(len(lexicons[0].vocab))))

    def test_stage_data_must_cover_every_stage(self, bundles):
        plan = make_plan(bundles, StrategyKind.MIXED_FINE_TUNING)
        lexicons = prepare_lexicons(plan)
        parent_data = stage_corpus(plan, stage_layout(plan)[0], lexicons[0], plan.seed)
        assert parent_data.name == "parent"
        with pytest.raises(PlanError):
            run_strategy(plan, lexicons, stage_data=[parent_data])

    def test_resume_needs_matching_vocabulary(self):
        params = init_params(TINY_MODEL.model_copy(update={"vocab_size": 30}))
        with pytest.raises(VocabError):
            resume_params(params, TINY_MODEL.model_copy(update={"vocab_size": 31}))


class TestStageContinuity:
    @pytest.mark.parametrize(
        "strategy, head_kind",
        [
            (StrategyKind.FINE_TUNING, HeadKind.VANILLA),
            (StrategyKind.MIXED_FINE_TUNING, HeadKind.VANILLA),
            (StrategyKind.PROPOSED_MFT, HeadKind.DOMEXTR),
        ],
    )
    def test_child_starts_where_parent_ended(self, bundles, strategy, head_kind):
        result = run_strategy(make_plan(bundles, strategy, head_kind=head_kind))
        parent, child = result.stages
        span = result.config.vocab_size - 4
        batch = collate(
            [[4 + i % span for i in range(3)], [4 + (i + 3) % span for i in range(2)]],
            [[4 + (i + 5) % span for i in range(2)], [4 + (i + 7) % span for i in range(3)]],
            groups=[1, 2],
        )
        ended = forward_logits(ModelParams.from_arrays(result.config, parent.final_params), batch).data
        started = forward_logits(ModelParams.from_arrays(result.config, child.start_params), batch).data
        np.testing.assert_array_equal(started, ended)
