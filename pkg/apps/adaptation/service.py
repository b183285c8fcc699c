"""Adaptation strategies: which data each stage sees and how stages hand off."""
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from apps.adaptation.convergence import ConvergenceMonitor, train_until_converged
from apps.adaptation.schemas import (
    AdaptationResult,
    CorpusContext,
    EvalSet,
    ExperimentPlan,
    Handoff,
    StageRecord,
    StrategyKind,
)
from apps.corpus.bpe import learn_bpe, segment_corpus
from apps.corpus.lexicon import Lexicon
from apps.corpus.schemas import CorpusBundle, ParallelCorpus, Split
from apps.corpus.service import concat_corpora, inject_tags, make_batches, oversample_merge, with_groups
from apps.corpus.vocab import build_vocab, random_vocab_map
from apps.decoding.bleu import bleu4
from apps.decoding.schemas import BeamConfig
from apps.decoding.service import average_checkpoints, translate_all
from apps.heads.schemas import HeadKind
from apps.model.schemas import ModelConfig, ModelParams
from apps.model.service import init_params
from core.exceptions import ConfigError, PlanError, VocabError
from core.optim import Adam
from core.settings import settings

logger = logging.getLogger(__name__)


@dataclass
class StageLayout:
    name: str
    train: Tuple[CorpusBundle, ...]
    dev: Tuple[CorpusBundle, ...]


def stage_layout(plan: ExperimentPlan) -> List[StageLayout]:
    """Training and dev corpora per stage.

    Fine tuning selects the in-domain dev set for its child stage; every
    other stage develops on the mix of the corpora it trains on.
    """
    child = (plan.child,)
    parents = tuple(plan.parents)
    everything = plan.corpora
    strategy = plan.strategy
    if strategy is StrategyKind.IN_DOMAIN_ONLY:
        return [StageLayout("in_domain", child, child)]
    if strategy is StrategyKind.CONCAT:
        return [StageLayout("concat", everything, everything)]
    if strategy in (StrategyKind.MULTI_DOMAIN, StrategyKind.PROPOSED):
        return [StageLayout("mixed", everything, everything)]
    if strategy is StrategyKind.FINE_TUNING:
        return [StageLayout("parent", parents, parents), StageLayout("child", child, child)]
    return [StageLayout("parent", parents, parents), StageLayout("mixed", everything, everything)]


def corpus_contexts(plan: ExperimentPlan) -> Dict[str, CorpusContext]:
    scheme = plan.tag_scheme
    contexts = {}
    for bundle in (plan.child,) + tuple(plan.parents):
        # corpora outside the plan (parents of an in-domain-only run) are only ever decoded untagged
        group = plan.group_ids.get(bundle.name, 0)
        prefix = scheme.prefix(group, bundle.tgt_lang) if plan.strategy.uses_tags else ()
        contexts[bundle.name] = CorpusContext(name=bundle.name, group=group, tag_prefix=prefix)
    return contexts


def _split_of(bundles: Sequence[CorpusBundle], split: Split) -> List[ParallelCorpus]:
    return [getattr(b, split.value) for b in bundles]


def build_lexicon(plan: ExperimentPlan, vocab_corpora: Optional[Sequence[CorpusBundle]] = None) -> Lexicon:
    """Joint subword model over every training corpus, vocabulary over `vocab_corpora`."""
    tags = plan.tag_scheme.tokens if plan.strategy.uses_tags else ()
    reserved = set(tags)
    subwords = learn_bpe(_split_of(plan.corpora, Split.TRAIN), plan.training.bpe_merges, reserved)
    sources = plan.corpora if vocab_corpora is None else vocab_corpora
    segmented = [segment_corpus(subwords, c, reserved) for c in _split_of(sources, Split.TRAIN)]
    vocab = build_vocab(segmented, plan.training.vocab_cap, tags)
    return Lexicon(subwords=subwords, vocab=vocab, tags=tuple(tags))


def cross_lingual_lexicons(plan: ExperimentPlan) -> Tuple[Lexicon, Lexicon]:
    """Parent lexicon plus a child lexicon randomly mapped onto the parent's id space."""
    parent = build_lexicon(plan, plan.parents)
    child = build_lexicon(plan, (plan.child,))
    mapping = random_vocab_map(parent.vocab, child.vocab, plan.seed)
    mapped = Lexicon(subwords=child.subwords, vocab=child.vocab.remap(mapping, len(parent.vocab)), tags=child.tags)
    return parent, mapped


def training_corpus(plan: ExperimentPlan, bundles: Sequence[CorpusBundle], seed: int) -> ParallelCorpus:
    """Tagged or group-labelled training data of one stage, merged."""
    scheme = plan.tag_scheme
    corpora = []
    for bundle in bundles:
        corpus = bundle.train
        group = plan.group_ids[bundle.name]
        if plan.strategy.uses_tags:
            corpus = inject_tags(corpus, scheme, group, corpus.tgt_lang)
        if plan.strategy.uses_head:
            corpus = with_groups(corpus, group)
        corpora.append(corpus)
    if plan.strategy is StrategyKind.CONCAT:
        return concat_corpora(corpora, seed)
    return oversample_merge(corpora, seed, plan.training.oversample_cap)


def stage_corpus(plan: ExperimentPlan, stage: StageLayout, lexicon: Lexicon, seed: int) -> ParallelCorpus:
    """Segmented training corpus of one stage, named after the stage."""
    merged = training_corpus(plan, stage.train, seed).replace(name=stage.name)
    return segment_corpus(lexicon.subwords, merged, lexicon.reserved)


def eval_set(
    plan: ExperimentPlan,
    lexicon: Lexicon,
    bundles: Sequence[CorpusBundle],
    split: Split,
    limit: Optional[int] = None,
) -> EvalSet:
    contexts = corpus_contexts(plan)
    sources, references, groups = [], [], []
    for bundle in bundles:
        context = contexts[bundle.name]
        pairs = getattr(bundle, split.value).pairs
        for src, tgt in pairs[:limit]:
            sources.append(lexicon.encode(context.tag_prefix + src))
            references.append(tgt)
            groups.append(context.group)
    name = "+".join(b.name for b in bundles)
    return EvalSet(name=name, sources=sources, references=references, groups=groups if plan.strategy.uses_head else None)


def _handoff_params(plan: ExperimentPlan, checkpoints) -> "OrderedDict":
    if plan.training.handoff is Handoff.LAST:
        return checkpoints.snapshots[-1]
    return average_checkpoints(checkpoints, min(plan.training.last_k, len(checkpoints)))


def resume_params(source: ModelParams, config: ModelConfig) -> ModelParams:
    """Trainable copy of `source` for the next stage; shapes must agree."""
    if source.config.vocab_size != config.vocab_size:
        raise VocabError(
            f"stage vocabularies differ ({source.config.vocab_size} vs {config.vocab_size}) "
            "and no vocabulary mapping was applied"
        )
    return ModelParams.from_arrays(config, source.snapshot())


def prepare_lexicons(plan: ExperimentPlan) -> List[Lexicon]:
    """One lexicon per stage; they differ only for cross-lingual fine tuning."""
    layout = stage_layout(plan)
    if plan.cross_lingual:
        return list(cross_lingual_lexicons(plan))
    joint = build_lexicon(plan)
    return [joint] * len(layout)


def run_strategy(
    plan: ExperimentPlan,
    lexicons: Optional[Sequence[Lexicon]] = None,
    parent: Optional[ModelParams] = None,
    stage_data: Optional[Sequence[ParallelCorpus]] = None,
) -> AdaptationResult:
    """Run every stage of the plan's strategy and return the stage records.

    With `parent`, the first stage of a two-stage strategy is skipped and
    the given parameters are its outcome. `stage_data` holds each stage's
    segmented training corpus as written by prepare; without it the data is
    rebuilt from the plan.
    """
    layout = stage_layout(plan)
    lexicons = list(lexicons) if lexicons is not None else prepare_lexicons(plan)
    if len(lexicons) != len(layout):
        raise PlanError(f"strategy '{plan.strategy.value}' has {len(layout)} stages, got {len(lexicons)} lexicons")
    if stage_data is not None and len(stage_data) != len(layout):
        raise PlanError(
            f"strategy '{plan.strategy.value}' has {len(layout)} stages, got {len(stage_data)} training corpora"
        )

    config = plan.model_for(len(lexicons[0].vocab))
    first = 0
    if parent is None:
        params = init_params(config)
    else:
        if len(layout) < 2:
            raise PlanError(f"strategy '{plan.strategy.value}' has no parent stage to resume from")
        # the init seed is irrelevant once weights are given
        diff = {k: v for k, v in parent.config.diff(config).items() if k != "seed"}
        if diff:
            raise ConfigError(f"parent checkpoint does not match the plan's model config: {diff}")
        params = ModelParams.from_arrays(config, parent.snapshot())
        first = 1

    monitor = ConvergenceMonitor.from_training(plan.training)
    training = plan.training
    optimizer = Adam(params.values(), config.d_model, training.warmup, training.lr_scale)
    result = AdaptationResult(
        strategy=plan.strategy,
        head_kind=plan.head_kind,
        config=config,
        lexicon=lexicons[-1],
        contexts=corpus_contexts(plan),
    )
    logger.info(
        f"Running '{plan.strategy.value}' (head {plan.head_kind.value}) over "
        f"{[b.name for b in plan.corpora]}, stages {[s.name for s in layout[first:]]}"
    )

    for index in range(first, len(layout)):
        stage, lexicon = layout[index], lexicons[index]
        seed = plan.seed + index
        if index > 0:
            params = resume_params(params, plan.model_for(len(lexicon.vocab)))
            optimizer = optimizer.rebind(params.values(), training.reset_moments, training.continue_schedule)

        if stage_data is None:
            corpus = stage_corpus(plan, stage, lexicon, seed)
        else:
            corpus = stage_data[index]
        batches = make_batches(corpus, lexicon.vocab, training.max_tokens, seed)
        dev = eval_set(plan, lexicon, stage.dev, Split.DEV, training.dev_limit)
        start = params.snapshot()
        checkpoints, trace = train_until_converged(
            params, batches, dev, lexicon, monitor, optimizer, training, seed, stage=stage.name
        )
        final = _handoff_params(plan, checkpoints)
        result.stages.append(
            StageRecord(
                name=stage.name,
                corpora=tuple(b.name for b in stage.train),
                start_params=start,
                final_params=final,
                checkpoints=checkpoints,
                trace=trace,
            )
        )
        params = ModelParams.from_arrays(params.config, final)
        logger.info(f"Stage '{stage.name}' done after {checkpoints.steps[-1]} batches, {len(trace)} evaluations")
    return result


def _expect(plan: ExperimentPlan, *kinds: StrategyKind) -> None:
    if plan.strategy not in kinds:
        raise PlanError(f"plan strategy is '{plan.strategy.value}', expected {[k.value for k in kinds]}")


def _with_head(plan: ExperimentPlan, head_kind: Optional[HeadKind]) -> ExperimentPlan:
    if head_kind is None or head_kind == plan.head_kind:
        return plan
    return ExperimentPlan(**{**dict(plan), "head_kind": head_kind})


def run_in_domain_only(plan: ExperimentPlan) -> AdaptationResult:
    _expect(plan, StrategyKind.IN_DOMAIN_ONLY)
    return run_strategy(plan)


def run_concat(plan: ExperimentPlan) -> AdaptationResult:
    _expect(plan, StrategyKind.CONCAT)
    return run_strategy(plan)


def run_fine_tuning(plan: ExperimentPlan) -> AdaptationResult:
    _expect(plan, StrategyKind.FINE_TUNING)
    return run_strategy(plan)


def run_multi_domain(plan: ExperimentPlan) -> AdaptationResult:
    _expect(plan, StrategyKind.MULTI_DOMAIN)
    return run_strategy(plan)


def run_mixed_fine_tuning(plan: ExperimentPlan) -> AdaptationResult:
    _expect(plan, StrategyKind.MIXED_FINE_TUNING)
    return run_strategy(plan)


def run_proposed(plan: ExperimentPlan, head_kind: Optional[HeadKind] = None) -> AdaptationResult:
    _expect(plan, StrategyKind.PROPOSED)
    return run_strategy(_with_head(plan, head_kind))


def run_proposed_mft(plan: ExperimentPlan, head_kind: Optional[HeadKind] = None) -> AdaptationResult:
    _expect(plan, StrategyKind.PROPOSED_MFT)
    return run_strategy(_with_head(plan, head_kind))


def translate_words(
    params: ModelParams,
    lexicon: Lexicon,
    sources: Sequence[Sequence[str]],
    context: CorpusContext,
    beam: BeamConfig,
    workers: Optional[int] = None,
) -> List[Tuple[str, ...]]:
    """Beam-translate word-level sentences of one corpus; output keeps input order."""
    ids = [lexicon.encode(tuple(context.tag_prefix) + tuple(src)) for src in sources]
    groups = [context.group] * len(ids) if params.config.head_kind.needs_group else None
    hypotheses = translate_all(
        params, ids, groups, beam, workers or settings.decode_workers, progress=settings.progress_bars
    )
    return [lexicon.decode(h.tokens) for h in hypotheses]


def evaluate_tests(
    result: AdaptationResult,
    beam: BeamConfig,
    bundles: Sequence[CorpusBundle],
) -> Dict[str, float]:
    """Test BLEU of the final model on the in-domain and every out-of-domain corpus."""
    params = result.final_params
    scores = {}
    for bundle in bundles:
        context = result.contexts[bundle.name]
        hypotheses = translate_words(params, result.lexicon, bundle.test.sources, context, beam)
        scores[bundle.name] = bleu4(hypotheses, bundle.test.targets, reserved=result.lexicon.reserved)
        logger.info(f"{result.strategy.value} on '{bundle.name}' test: BLEU {scores[bundle.name]:.2f}")
    return scores
