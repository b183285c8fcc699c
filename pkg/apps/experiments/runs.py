"""Run directories.

    <run>/prepared/        subwords.txt, vocab.txt [, vocab.child.txt], prepare.manifest,
                           one directory of segmented training data per stage
    <run>/checkpoints/<stage>/step-000200.ckpt ...
    <run>/trace.<stage>.tsv
    <run>/final.ckpt
    <run>/run.json
    <run>/translations/<corpus>.hyp, <corpus>.ref
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from apps.adaptation.schemas import CorpusContext, TraceRow
from apps.adaptation.service import translate_words
from apps.corpus.bpe import SubwordModel
from apps.corpus.lexicon import Lexicon
from apps.corpus.vocab import Vocab
from apps.decoding.schemas import BeamConfig
from apps.decoding.service import average_checkpoints
from apps.experiments.checkpoints import load_checkpoint, load_checkpoint_set
from apps.experiments.schemas import RunManifest
from apps.model.schemas import ModelParams
from core.exceptions import CheckpointError, ContextError, DataError
from core.tensor import default_dtype

logger = logging.getLogger(__name__)

TRACE_HEADER = "step\tbleu\tloss"


@dataclass(frozen=True)
class RunLayout:
    root: Path

    @classmethod
    def at(cls, root: Union[str, Path]) -> "RunLayout":
        return cls(Path(root))

    @property
    def prepared(self) -> Path:
        return self.root / "prepared"

    @property
    def subwords(self) -> Path:
        return self.prepared / "subwords.txt"

    @property
    def vocab(self) -> Path:
        return self.prepared / "vocab.txt"

    @property
    def child_vocab(self) -> Path:
        return self.prepared / "vocab.child.txt"

    @property
    def prepare_manifest(self) -> Path:
        return self.prepared / "prepare.manifest"

    def stage_data(self, stage: str) -> Path:
        return self.prepared / stage

    def checkpoints(self, stage: str) -> Path:
        return self.root / "checkpoints" / stage

    def trace(self, stage: str) -> Path:
        return self.root / f"trace.{stage}.tsv"

    @property
    def final(self) -> Path:
        return self.root / "final.ckpt"

    @property
    def manifest(self) -> Path:
        return self.root / "run.json"

    @property
    def translations(self) -> Path:
        return self.root / "translations"

    def hypothesis_file(self, corpus: str) -> Path:
        return self.translations / f"{corpus}.hyp"

    def reference_file(self, corpus: str) -> Path:
        return self.translations / f"{corpus}.ref"


def write_trace(path: Union[str, Path], trace: Sequence[TraceRow]) -> None:
    rows = [TRACE_HEADER] + [f"{row.step}\t{row.bleu:.4f}\t{row.loss:.6f}" for row in trace]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_trace(path: Union[str, Path]) -> List[TraceRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise DataError(f"{path}: not a training trace")
    rows = []
    for line in lines[1:]:
        step, bleu, loss = line.split("\t")
        rows.append(TraceRow(step=int(step), bleu=float(bleu), loss=float(loss)))
    return rows


def write_manifest(layout: RunLayout, manifest: RunManifest) -> None:
    layout.root.mkdir(parents=True, exist_ok=True)
    layout.manifest.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_manifest(layout: RunLayout) -> RunManifest:
    if not layout.manifest.is_file():
        raise DataError(f"{layout.root} is not a trained run (no {layout.manifest.name})")
    return RunManifest.model_validate_json(layout.manifest.read_text(encoding="utf-8"))


def read_lines(path: Union[str, Path]) -> List[Tuple[str, ...]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    return [tuple(line.split()) for line in path.read_text(encoding="utf-8").splitlines()]


def write_lines(path: Union[str, Path], sentences: Sequence[Sequence[str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")


@dataclass
class LoadedRun:
    """Frozen decoding parameters of a trained run plus how to feed them."""

    layout: RunLayout
    manifest: RunManifest
    params: ModelParams
    lexicon: Lexicon

    @property
    def beam(self) -> BeamConfig:
        return self.manifest.decoding

    def context(self, corpus: Optional[str]) -> Optional[CorpusContext]:
        """Tag prefix and group of `corpus`; None only for models that need neither."""
        needs_context = self.params.config.head_kind.needs_group or bool(self.manifest.tags)
        if corpus is None:
            if needs_context:
                raise ContextError(
                    f"run '{self.manifest.label}' decodes per corpus; pass one of {sorted(self.manifest.contexts)}"
                )
            return None
        entry = self.manifest.contexts.get(corpus)
        if entry is None:
            raise ContextError(f"unknown corpus '{corpus}'; run knows {sorted(self.manifest.contexts)}")
        if needs_context and entry.group == 0:
            raise ContextError(f"corpus '{corpus}' was not part of training for run '{self.manifest.label}'")
        return CorpusContext(name=corpus, group=entry.group, tag_prefix=tuple(entry.tag_prefix))

    def translate(
        self,
        sentences: Sequence[Sequence[str]],
        corpus: Optional[str] = None,
        beam: Optional[BeamConfig] = None,
        workers: Optional[int] = None,
    ) -> List[Tuple[str, ...]]:
        context = self.context(corpus) or CorpusContext(name="", group=0)
        return translate_words(self.params, self.lexicon, sentences, context, beam or self.beam, workers)


def load_decoding_params(layout: RunLayout, manifest: RunManifest, last_k: int, checkpoint: Optional[Path] = None) -> ModelParams:
    """Average of the last `last_k` checkpoints of the final stage, or one explicit checkpoint file."""
    if checkpoint is not None:
        ckpt = load_checkpoint(checkpoint)
        return ckpt.params().astype(default_dtype())
    if not manifest.stages:
        raise CheckpointError(f"run '{manifest.label}' has no trained stages")
    stage = manifest.stages[-1].name
    config, checkpoints = load_checkpoint_set(layout.checkpoints(stage))
    k = min(last_k, len(checkpoints))
    if k < last_k:
        logger.info(f"Stage '{stage}' kept {len(checkpoints)} checkpoints; averaging all of them instead of {last_k}")
    arrays = average_checkpoints(checkpoints, k)
    return ModelParams.from_arrays(config, arrays, requires_grad=False).astype(default_dtype())


def load_run(
    root: Union[str, Path],
    beam: Optional[BeamConfig] = None,
    checkpoint: Optional[Union[str, Path]] = None,
) -> LoadedRun:
    layout = RunLayout.at(root)
    manifest = read_manifest(layout)
    if beam is not None:
        manifest = manifest.model_copy(update={"decoding": beam})
    params = load_decoding_params(
        layout, manifest, manifest.decoding.last_k, Path(checkpoint) if checkpoint is not None else None
    )
    subwords = SubwordModel.load(layout.root / manifest.subwords)
    vocab = Vocab.load(layout.root / manifest.vocab)
    if len(vocab) != params.config.vocab_size:
        raise CheckpointError(
            f"vocabulary {manifest.vocab} has {len(vocab)} entries, the checkpoint expects {params.config.vocab_size}"
        )
    lexicon = Lexicon(subwords=subwords, vocab=vocab, tags=tuple(manifest.tags))
    logger.info(f"Loaded run {layout.root} ({manifest.label}, seed {manifest.seed})")
    return LoadedRun(layout=layout, manifest=manifest, params=params, lexicon=lexicon)
