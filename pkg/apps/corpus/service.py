"""Corpus tagging, merging and batching."""
import logging
from typing import List, Optional, Sequence

import numpy as np

from apps.corpus.schemas import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    Batch,
    Pair,
    ParallelCorpus,
    Split,
    TagScheme,
)
from apps.corpus.vocab import Vocab
from core.exceptions import DataError, LengthError, SchemeError

logger = logging.getLogger(__name__)


def inject_tags(corpus: ParallelCorpus, scheme: TagScheme, domain_index: int, tgt_lang: Optional[str] = None) -> ParallelCorpus:
    """Prefix every source sentence with [lang tag][domain tag]."""
    prefix = scheme.prefix(domain_index, tgt_lang or corpus.tgt_lang)
    pairs = tuple((prefix + src, tgt) for src, tgt in corpus.pairs)
    return corpus.replace(pairs=pairs)


def strip_tags(corpus: ParallelCorpus, scheme: TagScheme) -> ParallelCorpus:
    tags = set(scheme.tokens)
    width = 2 if scheme.include_lang_tag else 1
    pairs = []
    for i, (src, tgt) in enumerate(corpus.pairs):
        if len(src) <= width or any(tok not in tags for tok in src[:width]):
            raise SchemeError(f"corpus '{corpus.name}' pair {i} does not start with a tag prefix")
        pairs.append((src[width:], tgt))
    return corpus.replace(pairs=tuple(pairs))


def with_groups(corpus: ParallelCorpus, group: int) -> ParallelCorpus:
    """Attach the same corpus-group id to every pair."""
    return corpus.replace(groups=(group,) * len(corpus))


def _merged_identity(corpora: Sequence[ParallelCorpus], name: str) -> dict:
    def joined(values):
        return "+".join(dict.fromkeys(values))

    return {
        "name": name,
        "src_lang": joined(c.src_lang for c in corpora),
        "tgt_lang": joined(c.tgt_lang for c in corpora),
        "domain": joined(c.domain for c in corpora),
        "split": Split.TRAIN,
    }


def _check_mergeable(corpora: Sequence[ParallelCorpus]) -> None:
    if not corpora:
        raise DataError("nothing to merge")
    for corpus in corpora:
        if corpus.split is not Split.TRAIN:
            raise DataError(f"only training corpora can be merged, '{corpus.name}' is {corpus.split.value}")
        if len(corpus) == 0:
            raise DataError(f"corpus '{corpus.name}' is empty")
    with_ids = [c.groups is not None for c in corpora]
    if any(with_ids) and not all(with_ids):
        raise DataError("either every merged corpus carries group ids or none does")


def _shuffled(pairs: List[Pair], groups: Optional[List[int]], seed: int, identity: dict) -> ParallelCorpus:
    order = np.random.default_rng(seed).permutation(len(pairs))
    return ParallelCorpus(
        **identity,
        pairs=tuple(pairs[i] for i in order),
        groups=None if groups is None else tuple(groups[i] for i in order),
    )


def oversample_merge(
    corpora: Sequence[ParallelCorpus],
    seed: int,
    max_ratio: Optional[float] = None,
    name: str = "merged",
) -> ParallelCorpus:
    """Equalize corpus sizes by repetition, concatenate and shuffle.

    With M the largest size, a corpus of n pairs contributes floor(M/n) full
    copies plus its first M mod n pairs. `max_ratio` caps a corpus at
    max_ratio * n pairs.
    """
    _check_mergeable(corpora)
    target = max(len(c) for c in corpora)
    pairs: List[Pair] = []
    groups: Optional[List[int]] = [] if corpora[0].groups is not None else None
    for corpus in corpora:
        n = len(corpus)
        quota = target
        if max_ratio is not None and target > max_ratio * n:
            quota = int(max_ratio * n)
            logger.warning(f"Oversampling of '{corpus.name}' capped at {quota} pairs (ratio {max_ratio})")
        copies, rest = divmod(quota, n)
        pairs.extend(corpus.pairs * copies + corpus.pairs[:rest])
        if groups is not None:
            groups.extend(corpus.groups * copies + corpus.groups[:rest])
        logger.debug(f"'{corpus.name}': {n} pairs -> {quota} ({copies} copies + {rest})")
    return _shuffled(pairs, groups, seed, _merged_identity(corpora, name))


def concat_corpora(corpora: Sequence[ParallelCorpus], seed: int, name: str = "concat") -> ParallelCorpus:
    """Plain concatenation, shuffled, without size equalization."""
    _check_mergeable(corpora)
    pairs: List[Pair] = [pair for corpus in corpora for pair in corpus.pairs]
    groups = None
    if corpora[0].groups is not None:
        groups = [g for corpus in corpora for g in corpus.groups]
    return _shuffled(pairs, groups, seed, _merged_identity(corpora, name))


def _pad(rows: Sequence[Sequence[int]], width: int) -> np.ndarray:
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, : len(row)] = row
    return out


def collate(
    sources: Sequence[Sequence[int]],
    targets: Sequence[Sequence[int]],
    groups: Optional[Sequence[int]] = None,
) -> Batch:
    """Pad id rows into a Batch; targets become BOS+y inputs and y+EOS outputs."""
    src_width = max(len(s) for s in sources)
    tgt_width = max(len(t) for t in targets) + 1
    src = _pad(sources, src_width)
    tgt_in = _pad([[BOS_ID] + list(t) for t in targets], tgt_width)
    tgt_out = _pad([list(t) + [EOS_ID] for t in targets], tgt_width)
    src_pad = np.arange(src_width)[None, :] >= np.array([len(s) for s in sources])[:, None]
    tgt_pad = np.arange(tgt_width)[None, :] >= np.array([len(t) + 1 for t in targets])[:, None]
    return Batch(
        src=src,
        tgt_in=tgt_in,
        tgt_out=tgt_out,
        src_pad=src_pad,
        tgt_pad=tgt_pad,
        groups=None if groups is None else np.asarray(groups, dtype=np.int64),
    )


def make_batches(corpus: ParallelCorpus, vocab: Vocab, max_tokens: int, seed: int) -> List[Batch]:
    """Length-bucketed batches whose padded cost stays within `max_tokens`.

    Cost of a batch is rows * max(longest source, longest target + 1).
    Batch order is shuffled with `seed`.
    """
    sources = [vocab.encode(src) for src in corpus.sources]
    targets = [vocab.encode(tgt) for tgt in corpus.targets]
    widths = [max(len(s), len(t) + 1) for s, t in zip(sources, targets)]
    for i, width in enumerate(widths):
        if width > max_tokens:
            raise LengthError(f"pair {i} of '{corpus.name}' needs {width} tokens, over the batch cap {max_tokens}")

    order = sorted(range(len(widths)), key=lambda i: (widths[i], i))
    buckets: List[List[int]] = []
    current: List[int] = []
    for i in order:
        # widths ascend, so the newest row sets the batch width
        if current and (len(current) + 1) * widths[i] > max_tokens:
            buckets.append(current)
            current = []
        current.append(i)
    if current:
        buckets.append(current)

    batches = [
        collate(
            [sources[i] for i in rows],
            [targets[i] for i in rows],
            None if corpus.groups is None else [corpus.groups[i] for i in rows],
        )
        for rows in buckets
    ]
    shuffled = np.random.default_rng(seed).permutation(len(batches))
    logger.debug(f"'{corpus.name}': {len(corpus)} pairs in {len(batches)} batches (cap {max_tokens})")
    return [batches[i] for i in shuffled]
