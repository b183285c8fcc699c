"""Corpus files: one TAB-separated pair per line plus a key=value manifest.

Corpora that carry group ids get a third TAB-separated field and
`grouped=yes` in the manifest.
"""
import logging
from pathlib import Path
from typing import Dict, Union

from apps.corpus.schemas import CorpusBundle, ParallelCorpus, Split
from core.exceptions import DataError

logger = logging.getLogger(__name__)

MANIFEST_KEYS = ("name", "src_lang", "tgt_lang", "domain", "split")


def corpus_paths(directory: Union[str, Path], name: str, split: Split):
    stem = f"{name}.{Split(split).value}"
    return Path(directory) / f"{stem}.tsv", Path(directory) / f"{stem}.manifest"


def write_corpus(corpus: ParallelCorpus, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    text_path, manifest_path = corpus_paths(directory, corpus.name, corpus.split)
    with open(text_path, "w", encoding="utf-8", newline="\n") as f:
        for i, (src, tgt) in enumerate(corpus.pairs):
            group = "" if corpus.groups is None else f"\t{corpus.groups[i]}"
            f.write(f"{' '.join(src)}\t{' '.join(tgt)}{group}\n")
    meta = {key: getattr(corpus, key) for key in MANIFEST_KEYS}
    meta["split"] = corpus.split.value
    meta["pairs"] = len(corpus)
    if corpus.groups is not None:
        meta["grouped"] = "yes"
    manifest_path.write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    return text_path


def read_manifest(path: Union[str, Path]) -> Dict[str, str]:
    meta = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise DataError(f"{path}:{line_no}: expected key=value")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    missing = [k for k in MANIFEST_KEYS if k not in meta]
    if missing:
        raise DataError(f"{path}: manifest lacks {', '.join(missing)}")
    return meta


def read_corpus(directory: Union[str, Path], name: str, split: Split) -> ParallelCorpus:
    text_path, manifest_path = corpus_paths(directory, name, split)
    if not text_path.exists() or not manifest_path.exists():
        raise DataError(f"corpus '{name}' ({Split(split).value}) not found under {directory}")
    meta = read_manifest(manifest_path)
    grouped = meta.get("grouped") == "yes"
    width = 3 if grouped else 2
    pairs, groups = [], []
    for line_no, line in enumerate(text_path.read_text(encoding="utf-8").splitlines(), start=1):
        fields = line.split("\t")
        if len(fields) != width:
            raise DataError(f"{text_path}:{line_no}: expected {width} TAB-separated fields, got {len(fields)}")
        pairs.append((tuple(fields[0].split()), tuple(fields[1].split())))
        if grouped:
            try:
                groups.append(int(fields[2]))
            except ValueError as e:
                raise DataError(f"{text_path}:{line_no}: group id is not an integer") from e
    return ParallelCorpus(
        name=meta["name"],
        src_lang=meta["src_lang"],
        tgt_lang=meta["tgt_lang"],
        domain=meta["domain"],
        split=Split(meta["split"]),
        pairs=tuple(pairs),
        groups=tuple(groups) if grouped else None,
    )


def write_bundle(bundle: CorpusBundle, directory: Union[str, Path]) -> None:
    for corpus in (bundle.train, bundle.dev, bundle.test):
        write_corpus(corpus, directory)
    logger.debug(f"Wrote corpus '{bundle.name}' to {directory}")


def read_bundle(directory: Union[str, Path], name: str) -> CorpusBundle:
    return CorpusBundle(
        train=read_corpus(directory, name, Split.TRAIN),
        dev=read_corpus(directory, name, Split.DEV),
        test=read_corpus(directory, name, Split.TEST),
    )
