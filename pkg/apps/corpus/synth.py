"""Synthetic multilingual multi-domain translation tasks.

Sentences are drawn over integer base tokens. Each domain owns a region of
base tokens, each corpus reorders its target with a fixed rule, and each
language renders base tokens through a seeded bijective substitution.
"""
import logging
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from apps.corpus.schemas import (
    CorpusBundle,
    ParallelCorpus,
    ReorderRule,
    Sentence,
    Split,
    SynthCorpusSpec,
    SynthSpec,
)
from core.exceptions import GeneratorError

logger = logging.getLogger(__name__)

IDENTITY_LANGUAGE = "e"
MAX_DRAWS_PER_SENTENCE = 200


def reorder(base: Sequence[int], rule: ReorderRule, window: int = 3) -> Tuple[int, ...]:
    tokens = list(base)
    if rule is ReorderRule.SWAP_PAIRS:
        for i in range(0, len(tokens) - 1, 2):
            tokens[i], tokens[i + 1] = tokens[i + 1], tokens[i]
    elif rule is ReorderRule.REVERSE_WINDOW:
        tokens = [tok for start in range(0, len(tokens), window) for tok in reversed(tokens[start : start + window])]
    return tuple(tokens)


@dataclass
class SynthWorld:
    """Regions and language substitutions derived from (spec, seed)."""

    spec: SynthSpec
    seed: int
    regions: Dict[str, Tuple[int, ...]]
    lexicons: Dict[str, np.ndarray]

    @property
    def shared_size(self) -> int:
        return int(round(self.spec.overlap * self.spec.region_size))

    def corpus_spec(self, name: str) -> SynthCorpusSpec:
        for corpus in self.spec.corpora:
            if corpus.name == name:
                return corpus
        raise GeneratorError(f"unknown synthetic corpus '{name}'")

    def render(self, lang: str, base: Sequence[int]) -> Sentence:
        if lang == IDENTITY_LANGUAGE:
            return tuple(f"{lang}{tok}" for tok in base)
        lexicon = self.lexicons[lang]
        return tuple(f"{lang}{lexicon[tok]}" for tok in base)

    def parse(self, lang: str, sentence: Sequence[str]) -> Tuple[int, ...]:
        try:
            surface = [int(tok[len(lang):]) for tok in sentence]
        except ValueError as e:
            raise GeneratorError(f"sentence is not in language '{lang}': {e}") from e
        if lang == IDENTITY_LANGUAGE:
            return tuple(surface)
        inverse = np.argsort(self.lexicons[lang])
        return tuple(int(inverse[tok]) for tok in surface)

    def translate(self, name: str, source: Sequence[str]) -> Sentence:
        """Target sentence the generator's rule assigns to `source` in corpus `name`."""
        corpus = self.corpus_spec(name)
        base = self.parse(corpus.src_lang, source)
        return self.render(corpus.tgt_lang, reorder(base, corpus.reorder, self.spec.window))


def build_world(spec: SynthSpec, seed: int) -> SynthWorld:
    R = spec.region_size
    shared = int(round(spec.overlap * R))
    in_domain = next(c.domain for c in spec.corpora if c.name == spec.in_domain)
    domains = [in_domain] + [d for d in dict.fromkeys(c.domain for c in spec.corpora) if d != in_domain]

    regions: Dict[str, Tuple[int, ...]] = {in_domain: tuple(range(R))}
    own = R - shared
    for k, domain in enumerate(domains[1:]):
        start = R + k * own
        regions[domain] = tuple(range(shared)) + tuple(range(start, start + own))
    size = R + (len(domains) - 1) * own

    lexicons = {}
    for lang in sorted({c.src_lang for c in spec.corpora} | {c.tgt_lang for c in spec.corpora}):
        rng = np.random.default_rng([seed, zlib.crc32(lang.encode("utf-8"))])
        lexicons[lang] = rng.permutation(size)
    return SynthWorld(spec=spec, seed=seed, regions=regions, lexicons=lexicons)


def _draw(rng: np.random.Generator, region: Tuple[int, ...], spec: SynthSpec, first: Optional[int] = None) -> Tuple[int, ...]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    tokens = [region[int(i)] for i in rng.integers(0, len(region), size=length)]
    if first is not None:
        tokens[0] = first
    return tuple(tokens)


def _sample_split(
    rng: np.random.Generator,
    region: Tuple[int, ...],
    spec: SynthSpec,
    count: int,
    taken: Set[Tuple[int, ...]],
    name: str,
    split: Split,
) -> List[Tuple[int, ...]]:
    sentences = []
    for _ in range(count):
        for _ in range(MAX_DRAWS_PER_SENTENCE):
            base = _draw(rng, region, spec)
            if base not in taken:
                break
        else:
            raise GeneratorError(f"cannot draw a {split.value} sentence for '{name}' disjoint from the other splits")
        taken.add(base)
        sentences.append(base)
    return sentences


def synth_tasks(spec: SynthSpec, seed: int) -> Dict[str, CorpusBundle]:
    """Deterministic train/dev/test corpora for every corpus in `spec`.

    Train sentence i starts with region token i mod |region| so that every
    region token occurs in training; dev and test sentences never repeat a
    training sentence or each other.
    """
    world = build_world(spec, seed)
    bundles: Dict[str, CorpusBundle] = {}
    for corpus in spec.corpora:
        region = world.regions[corpus.domain]
        rng = np.random.default_rng([seed, zlib.crc32(corpus.name.encode("utf-8"))])
        train = [_draw(rng, region, spec, first=region[i % len(region)]) for i in range(corpus.train)]
        taken = set(train)
        dev = _sample_split(rng, region, spec, corpus.dev, taken, corpus.name, Split.DEV)
        test = _sample_split(rng, region, spec, corpus.test, taken, corpus.name, Split.TEST)

        def to_corpus(split: Split, sentences: List[Tuple[int, ...]]) -> ParallelCorpus:
            pairs = tuple(
                (
                    world.render(corpus.src_lang, base),
                    world.render(corpus.tgt_lang, reorder(base, corpus.reorder, spec.window)),
                )
                for base in sentences
            )
            return ParallelCorpus(
                name=corpus.name,
                src_lang=corpus.src_lang,
                tgt_lang=corpus.tgt_lang,
                domain=corpus.domain,
                split=split,
                pairs=pairs,
            )

        bundles[corpus.name] = CorpusBundle(
            train=to_corpus(Split.TRAIN, train),
            dev=to_corpus(Split.DEV, dev),
            test=to_corpus(Split.TEST, test),
        )
        logger.info(
            f"Generated '{corpus.name}' ({corpus.src_lang}->{corpus.tgt_lang}, {corpus.domain}): "
            f"{len(train)}/{len(dev)}/{len(test)} pairs"
        )
    return bundles
