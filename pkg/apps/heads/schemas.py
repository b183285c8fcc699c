from dataclasses import dataclass
from enum import Enum
from typing import Optional

from core.tensor import Tensor


class HeadKind(str, Enum):
    VANILLA = "vanilla"
    DOMSPEC = "domspec"
    DOMEXTR = "domextr"
    DOMSPECEXTR = "domspecextr"

    @property
    def specializes(self) -> bool:
        return self in (HeadKind.DOMSPEC, HeadKind.DOMSPECEXTR)

    @property
    def extremizes(self) -> bool:
        return self in (HeadKind.DOMEXTR, HeadKind.DOMSPECEXTR)

    @property
    def needs_group(self) -> bool:
        return self is not HeadKind.VANILLA


@dataclass
class HeadParams:
    """Output-head weights.

    W_t maps a (possibly specialized) state to vocabulary logits, W_d
    down-projects the decoder state for specializing heads and `bias` holds
    one |V|-row per corpus group (row g-1 for group g) for extremizing heads.
    """

    W_t: Tensor
    W_d: Optional[Tensor] = None
    bias: Optional[Tensor] = None
