"""Experiment commands behind manage.py: synth-data, prepare, train, adapt, translate, evaluate, report."""
import hashlib
import logging
import shutil
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from apps.adaptation.schemas import AdaptationResult, ExperimentPlan, StrategyKind
from apps.adaptation.service import prepare_lexicons, run_strategy, stage_corpus, stage_layout
from apps.corpus.bpe import SubwordModel
from apps.corpus.lexicon import Lexicon
from apps.corpus.schemas import CorpusBundle, ParallelCorpus, Split
from apps.corpus.storage import corpus_paths, read_bundle, read_corpus, write_bundle, write_corpus
from apps.corpus.synth import synth_tasks
from apps.corpus.vocab import Vocab
from apps.decoding.bleu import bleu4, format_bleu
from apps.experiments.checkpoints import load_checkpoint, save_checkpoint, save_checkpoint_set
from apps.experiments.config import build_plan, config_hash, parent_names, spec_hash, synth_spec
from apps.experiments.runs import (
    LoadedRun,
    RunLayout,
    load_run,
    read_lines,
    read_manifest,
    write_lines,
    write_manifest,
    write_trace,
)
from apps.experiments.schemas import ContextEntry, ExperimentConfig, ReportRow, RunManifest, StageEntry
from apps.heads.schemas import HeadKind
from core.exceptions import ConfigError, DataError
from core.settings import settings

logger = logging.getLogger(__name__)

SYNTH_MANIFEST = "synth.manifest"
REPORT_HEADER = "strategy\ttest_set\tscope\tbleu\truns"


def run_seed(config: ExperimentConfig, seed: Optional[int]) -> int:
    return config.training.seed if seed is None else seed


def default_run_dir(config: ExperimentConfig, seed: Optional[int] = None) -> Path:
    return Path(settings.runs_dir) / f"{config.strategy.label}-seed{run_seed(config, seed)}"


def _run_layout(config: ExperimentConfig, out: Optional[Union[str, Path]], seed: Optional[int]) -> RunLayout:
    return RunLayout.at(out if out is not None else default_run_dir(config, seed))


def cmd_synth_data(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
    force: bool = False,
) -> Path:
    """Generate every configured corpus; identical config and seed give byte-identical files."""
    out_dir = Path(out_dir if out_dir is not None else config.data.dir)
    seed = config.data.seed if seed is None else seed
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise ConfigError(f"{out_dir} already exists; pass --force to overwrite it")
        shutil.rmtree(out_dir)
    spec = synth_spec(config)
    bundles = synth_tasks(spec, seed)
    for bundle in bundles.values():
        write_bundle(bundle, out_dir)
    lines = [f"seed={seed}", f"spec_hash={spec_hash(spec)}", f"corpora={','.join(bundles)}"]
    (out_dir / SYNTH_MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(bundles)} synthetic corpora to {out_dir} (seed {seed})")
    return out_dir


def load_bundles(config: ExperimentConfig) -> Dict[str, CorpusBundle]:
    names = [config.data.in_domain] + parent_names(config)
    return {name: read_bundle(config.data.dir, name) for name in names}


def _corpus_files(config: ExperimentConfig) -> List[Path]:
    files = []
    for name in [config.data.in_domain] + parent_names(config):
        for split in Split:
            files.extend(corpus_paths(config.data.dir, name, split))
    return files


def prepare_hash(config: ExperimentConfig, seed: int) -> str:
    """Content hash over the config, the seed and every corpus file the run reads."""
    digest = hashlib.sha256()
    digest.update(config_hash(config).encode("utf-8"))
    digest.update(f"seed={seed}".encode("utf-8"))
    for path in _corpus_files(config):
        if not path.is_file():
            raise DataError(f"corpus file {path} is missing; run synth-data first")
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _read_prepare_hash(layout: RunLayout) -> Optional[str]:
    if not layout.prepare_manifest.is_file():
        return None
    for line in layout.prepare_manifest.read_text(encoding="utf-8").splitlines():
        if line.startswith("hash="):
            return line[len("hash="):].strip()
    return None


def cmd_prepare(
    config: ExperimentConfig,
    out: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
    force: bool = False,
) -> bool:
    """Write subword model, vocabularies and per-stage training data. Returns False when already up to date."""
    seed = run_seed(config, seed)
    layout = _run_layout(config, out, seed)
    content_hash = prepare_hash(config, seed)
    if not force and _read_prepare_hash(layout) == content_hash:
        logger.info(f"{layout.prepared} is up to date")
        return False

    plan = build_plan(config, load_bundles(config), seed)
    lexicons = prepare_lexicons(plan)
    if layout.prepared.exists():
        shutil.rmtree(layout.prepared)
    layout.prepared.mkdir(parents=True)
    lexicons[0].subwords.save(layout.subwords)
    lexicons[0].vocab.save(layout.vocab)
    if plan.cross_lingual:
        lexicons[-1].vocab.save(layout.child_vocab)

    for index, (stage, lexicon) in enumerate(zip(stage_layout(plan), lexicons)):
        write_corpus(stage_corpus(plan, stage, lexicon, plan.seed + index), layout.stage_data(stage.name))

    layout.prepare_manifest.write_text(f"hash={content_hash}\nseed={seed}\n", encoding="utf-8")
    logger.info(f"Prepared {layout.prepared}: vocabulary of {len(lexicons[0].vocab)} entries")
    return True


def read_lexicons(layout: RunLayout, plan: ExperimentPlan) -> List[Lexicon]:
    tags = plan.tag_scheme.tokens if plan.strategy.uses_tags else ()
    subwords = SubwordModel.load(layout.subwords)
    joint = Lexicon(subwords=subwords, vocab=Vocab.load(layout.vocab), tags=tuple(tags))
    if plan.cross_lingual:
        return [joint, Lexicon(subwords=subwords, vocab=Vocab.load(layout.child_vocab), tags=tuple(tags))]
    return [joint] * len(stage_layout(plan))


def read_stage_data(layout: RunLayout, plan: ExperimentPlan) -> List[ParallelCorpus]:
    """Segmented per-stage training corpora written by prepare."""
    return [read_corpus(layout.stage_data(stage.name), stage.name, Split.TRAIN) for stage in stage_layout(plan)]


def _prepared_plan(
    config: ExperimentConfig, out: Optional[Union[str, Path]], seed: Optional[int]
) -> Tuple[RunLayout, ExperimentPlan, List[Lexicon], List[ParallelCorpus]]:
    seed = run_seed(config, seed)
    layout = _run_layout(config, out, seed)
    if _read_prepare_hash(layout) != prepare_hash(config, seed):
        raise DataError(f"prepared artifacts under {layout.prepared} are missing or stale; run prepare first")
    plan = build_plan(config, load_bundles(config), seed)
    return layout, plan, read_lexicons(layout, plan), read_stage_data(layout, plan)


def _write_run(
    layout: RunLayout, config: ExperimentConfig, plan: ExperimentPlan, result: AdaptationResult
) -> RunManifest:
    stages = []
    for record in result.stages:
        shutil.rmtree(layout.checkpoints(record.name), ignore_errors=True)
        save_checkpoint_set(layout.checkpoints(record.name), result.config, record.checkpoints)
        write_trace(layout.trace(record.name), record.trace)
        stages.append(
            StageEntry(
                name=record.name,
                corpora=record.corpora,
                steps=list(record.checkpoints.steps),
                trace=layout.trace(record.name).name,
            )
        )
    last = result.stages[-1]
    save_checkpoint(layout.final, last.steps, result.config, last.final_params)
    vocab = layout.child_vocab if plan.cross_lingual else layout.vocab
    manifest = RunManifest(
        strategy=plan.strategy,
        head=plan.head_kind,
        label=config.strategy.label,
        seed=plan.seed,
        in_domain=plan.child.name,
        config_hash=config_hash(config),
        subwords=str(layout.subwords.relative_to(layout.root)),
        vocab=str(vocab.relative_to(layout.root)),
        tags=result.lexicon.tags,
        contexts={
            name: ContextEntry(group=c.group, tag_prefix=c.tag_prefix) for name, c in result.contexts.items()
        },
        stages=stages,
        final_checkpoint=layout.final.name,
        decoding=config.decoding,
    )
    write_manifest(layout, manifest)
    return manifest


def cmd_train(
    config: ExperimentConfig, out: Optional[Union[str, Path]] = None, seed: Optional[int] = None
) -> RunManifest:
    """Run every stage of the configured strategy from scratch."""
    layout, plan, lexicons, stage_data = _prepared_plan(config, out, seed)
    result = run_strategy(plan, lexicons, stage_data=stage_data)
    manifest = _write_run(layout, config, plan, result)
    logger.info(f"Run {layout.root} trained: stages {[s.name for s in manifest.stages]}")
    return manifest


def cmd_adapt(
    config: ExperimentConfig,
    parent_checkpoint: Union[str, Path],
    out: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
) -> RunManifest:
    """Resume a two-stage strategy from an existing parent checkpoint."""
    layout, plan, lexicons, stage_data = _prepared_plan(config, out, seed)
    parent = load_checkpoint(parent_checkpoint)
    result = run_strategy(plan, lexicons, parent=parent.params(requires_grad=True), stage_data=stage_data)
    manifest = _write_run(layout, config, plan, result)
    logger.info(f"Run {layout.root} adapted from {parent_checkpoint} (parent step {parent.step})")
    return manifest


def cmd_translate(
    config: ExperimentConfig,
    out: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
    input_file: Optional[Union[str, Path]] = None,
    output_file: Optional[Union[str, Path]] = None,
    corpus: Optional[str] = None,
    checkpoint: Optional[Union[str, Path]] = None,
) -> List[Path]:
    """Translate `input_file`, or every test set of the run when no input is given.

    Test-set translations land in <run>/translations with their references.
    """
    layout = _run_layout(config, out, seed)
    run = load_run(layout.root, beam=config.decoding, checkpoint=checkpoint)
    if input_file is not None:
        sentences = read_lines(input_file)
        hypotheses = run.translate(sentences, corpus)
        target = Path(output_file) if output_file is not None else Path(f"{input_file}.hyp")
        write_lines(target, hypotheses)
        logger.info(f"Translated {len(sentences)} lines of {input_file} into {target}")
        return [target]
    return translate_test_sets(run, load_bundles(config))


def translate_test_sets(run: LoadedRun, bundles: Dict[str, CorpusBundle]) -> List[Path]:
    written = []
    for name, bundle in bundles.items():
        hypotheses = run.translate(bundle.test.sources, name)
        write_lines(run.layout.hypothesis_file(name), hypotheses)
        write_lines(run.layout.reference_file(name), bundle.test.targets)
        written.append(run.layout.hypothesis_file(name))
        logger.info(f"Translated test set '{name}' for run {run.layout.root}")
    return written


def score_files(hyp_file: Union[str, Path], ref_file: Union[str, Path]) -> float:
    hypotheses = read_lines(hyp_file)
    references = read_lines(ref_file)
    if len(hypotheses) != len(references):
        raise DataError(
            f"{hyp_file} has {len(hypotheses)} lines but {ref_file} has {len(references)}"
        )
    return bleu4(hypotheses, references)


def cmd_evaluate(hyp_file: Union[str, Path], ref_file: Union[str, Path]) -> str:
    return format_bleu(score_files(hyp_file, ref_file))


def _strategy_order(label: str) -> Tuple[int, int, str]:
    kind, _, head = label.partition("(")
    kinds = [k.value for k in StrategyKind]
    heads = [h.value for h in HeadKind]
    head = head.rstrip(")") or HeadKind.VANILLA.value
    return (
        kinds.index(kind) if kind in kinds else len(kinds),
        heads.index(head) if head in heads else len(heads),
        label,
    )


def collect_report(run_dirs: Sequence[Union[str, Path]]) -> List[ReportRow]:
    """Mean test BLEU per (strategy, test set) over the given runs.

    Rows are ordered by strategy, then in-domain test set first, then the
    other test sets by name.
    """
    scores: Dict[Tuple[str, str], List[float]] = defaultdict(list)
    in_domain: Dict[str, bool] = {}
    for run_dir in run_dirs:
        layout = RunLayout.at(run_dir)
        manifest = read_manifest(layout)
        hypotheses = sorted(layout.translations.glob("*.hyp"))
        if not hypotheses:
            logger.warning(f"Run {run_dir} has no translations; run translate first")
        for hyp in hypotheses:
            name = hyp.stem
            scores[(manifest.label, name)].append(score_files(hyp, layout.reference_file(name)))
            in_domain[name] = in_domain.get(name, False) or name == manifest.in_domain

    def order(key: Tuple[str, str]):
        label, test_set = key
        return _strategy_order(label), not in_domain[test_set], test_set

    return [
        ReportRow(
            strategy=label,
            test_set=test_set,
            in_domain=in_domain[test_set],
            bleu=sum(scores[(label, test_set)]) / len(scores[(label, test_set)]),
            runs=len(scores[(label, test_set)]),
        )
        for label, test_set in sorted(scores, key=order)
    ]


def format_report(rows: Sequence[ReportRow]) -> str:
    lines = [REPORT_HEADER]
    for row in rows:
        scope = "in" if row.in_domain else "out"
        lines.append(f"{row.strategy}\t{row.test_set}\t{scope}\t{row.bleu:.2f}\t{row.runs}")
    return "\n".join(lines) + "\n"


def cmd_report(run_dirs: Sequence[Union[str, Path]], output_file: Optional[Union[str, Path]] = None) -> str:
    if not run_dirs:
        raise DataError("report needs at least one run directory")
    report = format_report(collect_report(run_dirs))
    if output_file is not None:
        Path(output_file).write_text(report, encoding="utf-8")
        logger.info(f"Report written to {output_file}")
    return report
