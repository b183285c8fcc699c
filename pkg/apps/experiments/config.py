"""Experiment configuration files (INI sections, strict keys)."""
import configparser
import hashlib
import logging
from pathlib import Path
from typing import Dict, Optional, Union

from pydantic import ValidationError

from apps.adaptation.schemas import ExperimentPlan, StrategyKind
from apps.corpus.schemas import CorpusBundle, SynthCorpusSpec, SynthSpec
from apps.experiments.schemas import ExperimentConfig
from apps.heads.schemas import HeadKind
from apps.model.schemas import ModelConfig
from core.exceptions import ConfigError, PlanError

logger = logging.getLogger(__name__)

SECTIONS = ("data", "model", "training", "strategy", "decoding")
CORPUS_PREFIX = "corpus."


def _describe(error: ValidationError, section: str) -> str:
    problems = []
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"]) or section
        problems.append(f"[{section}] {where}: {item['msg']}")
    return "; ".join(problems)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e

    raw: Dict[str, object] = {"corpora": {}}
    unknown = []
    for section in parser.sections():
        values = dict(parser[section])
        if section.startswith(CORPUS_PREFIX):
            raw["corpora"][section[len(CORPUS_PREFIX):]] = values
        elif section in SECTIONS:
            raw[section] = values
        else:
            unknown.append(section)
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {unknown}; expected {list(SECTIONS)} and [corpus.<name>]")
    for required in ("data", "strategy"):
        if required not in raw:
            raise ConfigError(f"{source}: missing [{required}] section")
    if not raw["corpora"]:
        raise ConfigError(f"{source}: no [corpus.<name>] sections")

    try:
        config = ExperimentConfig(**raw)
    except ValidationError as e:
        raise ConfigError(f"{source}: {_describe(e, 'config')}") from e
    validate_config(config)
    return config


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    config = parse_config(path.read_text(encoding="utf-8"), source=str(path))
    logger.info(f"Loaded experiment config {path} (strategy {config.strategy.label})")
    return config


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(config.model_dump_json().encode("utf-8")).hexdigest()


def synth_spec(config: ExperimentConfig) -> SynthSpec:
    data = config.data
    corpora = tuple(
        SynthCorpusSpec(name=name, **section.model_dump()) for name, section in config.corpora.items()
    )
    return SynthSpec(
        corpora=corpora,
        in_domain=data.in_domain,
        region_size=data.region_size,
        overlap=data.overlap,
        min_len=data.min_len,
        max_len=data.max_len,
        window=data.window,
    )


def spec_hash(spec: SynthSpec) -> str:
    return hashlib.sha256(spec.model_dump_json().encode("utf-8")).hexdigest()


def parent_names(config: ExperimentConfig) -> list:
    names = config.strategy.parent_names or [n for n in config.corpora if n != config.data.in_domain]
    missing = [n for n in names if n not in config.corpora]
    if missing:
        raise PlanError(f"[strategy] parents name unknown corpora {missing}")
    if config.data.in_domain in names:
        raise PlanError("the in-domain corpus cannot also be a parent")
    return names


def build_plan(config: ExperimentConfig, bundles: Dict[str, CorpusBundle], seed: Optional[int] = None) -> ExperimentPlan:
    if config.data.in_domain not in bundles:
        raise PlanError(f"in-domain corpus '{config.data.in_domain}' has no data")
    return ExperimentPlan(
        child=bundles[config.data.in_domain],
        parents=tuple(bundles[name] for name in parent_names(config)),
        strategy=config.strategy.kind,
        head_kind=config.strategy.head,
        model=ModelConfig(**config.model.model_dump()),
        training=config.training.training_config(),
        seed=config.training.seed if seed is None else seed,
    )


def validate_config(config: ExperimentConfig) -> None:
    """Cross-section checks that need no data: synthetic spec, parents, model/plan invariants."""
    synth_spec(config)
    names = parent_names(config)
    corpora = [config.data.in_domain] + names
    kind = config.strategy.kind
    if kind.single_target and len({config.corpora[n].tgt_lang for n in corpora}) > 1:
        raise PlanError(f"strategy '{kind.value}' supports one target language")
    if kind.uses_head and config.strategy.head is HeadKind.VANILLA:
        raise PlanError(f"strategy '{kind.value}' needs a non-vanilla head")
    if not kind.uses_head and config.strategy.head is not HeadKind.VANILLA:
        raise PlanError(f"head '{config.strategy.head.value}' only applies to the proposed strategies")
    n_groups = 1 if kind is StrategyKind.IN_DOMAIN_ONLY else len(corpora)
    fields = config.model.model_dump()
    ModelConfig(**fields, vocab_size=config.training.vocab_cap, head_kind=config.strategy.head, n_groups=n_groups)
