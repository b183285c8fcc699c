from enum import Enum


class ErrorCategory(str, Enum):
    SHAPE = "shape"
    CONFIG = "config"
    VOCAB = "vocab"
    GRAPH = "graph"
    NUMERIC = "numeric"
    DOMAIN = "domain"
    LENGTH = "length"
    GROUP = "group"
    BATCH = "batch"
    SCHEME = "scheme"
    DATA = "data"
    MAPPING = "mapping"
    GENERATOR = "generator"
    PLAN = "plan"
    CONTEXT = "context"
    CHECKPOINT = "checkpoint"
    PRECISION = "precision"
    INTERNAL = "internal"


EXIT_CODES = {
    ErrorCategory.CONFIG: 2,
    ErrorCategory.PLAN: 2,
    ErrorCategory.DATA: 3,
    ErrorCategory.VOCAB: 3,
    ErrorCategory.SCHEME: 3,
    ErrorCategory.GENERATOR: 3,
    ErrorCategory.MAPPING: 3,
    ErrorCategory.NUMERIC: 4,
    ErrorCategory.SHAPE: 4,
    ErrorCategory.GRAPH: 4,
    ErrorCategory.PRECISION: 4,
    ErrorCategory.CHECKPOINT: 5,
    ErrorCategory.CONTEXT: 5,
}


class DomainAdaptError(Exception):
    """Base error; `category` prefixes every message shown to users."""

    category = ErrorCategory.INTERNAL

    @property
    def exit_code(self) -> int:
        return EXIT_CODES.get(self.category, 1)

    def describe(self) -> str:
        return f"{self.category.value} error: {self}"


class ShapeError(DomainAdaptError):
    category = ErrorCategory.SHAPE


class ConfigError(DomainAdaptError):
    category = ErrorCategory.CONFIG


class VocabError(DomainAdaptError):
    category = ErrorCategory.VOCAB


class GraphError(DomainAdaptError):
    category = ErrorCategory.GRAPH


class NumericError(DomainAdaptError):
    category = ErrorCategory.NUMERIC


class MathDomainError(DomainAdaptError):
    """Argument outside a function's mathematical domain (e.g. step 0)."""

    category = ErrorCategory.DOMAIN


class LengthError(DomainAdaptError):
    category = ErrorCategory.LENGTH


class GroupError(DomainAdaptError):
    category = ErrorCategory.GROUP


class BatchError(DomainAdaptError):
    category = ErrorCategory.BATCH


class SchemeError(DomainAdaptError):
    category = ErrorCategory.SCHEME


class DataError(DomainAdaptError):
    category = ErrorCategory.DATA


class MappingError(DomainAdaptError):
    category = ErrorCategory.MAPPING


class GeneratorError(DomainAdaptError):
    category = ErrorCategory.GENERATOR


class PlanError(DomainAdaptError):
    category = ErrorCategory.PLAN


class ContextError(DomainAdaptError):
    category = ErrorCategory.CONTEXT


class CheckpointError(DomainAdaptError):
    category = ErrorCategory.CHECKPOINT


class PrecisionError(DomainAdaptError):
    category = ErrorCategory.PRECISION
