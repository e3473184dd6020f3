"""Ablation variants and the model/reward wiring each one implies."""
from dataclasses import dataclass
from enum import Enum

from . import fusion

DEFAULT_WEIGHTS = (0.1, 0.8, 0.1)


class AblationVariant(str, Enum):
    FULL = "FULL"
    OSKGR = "OSKGR"   # structural features only
    STKGR = "STKGR"   # no image half
    SIKGR = "SIKGR"   # no text half
    FAKGR = "FAKGR"   # no irrelevance filter
    FGKGR = "FGKGR"   # no attention fusion
    DEKGR = "DEKGR"   # destination reward only
    DSKGR = "DSKGR"   # destination + distance
    DVKGR = "DVKGR"   # destination + diversity
    ZOKGR = "ZOKGR"   # terminal 0/1 reward

    @classmethod
    def parse(cls, name):
        try:
            return cls(str(name).upper())
        except ValueError:
            raise ValueError(f"unknown ablation variant {name!r}; "
                             f"choose from {[v.value for v in cls]}") from None


@dataclass(frozen=True)
class Wiring:
    variant: AblationVariant = AblationVariant.FULL
    fusion_mode: str = fusion.FULL
    use_text: bool = True
    use_image: bool = True
    structural_only: bool = False
    weights: tuple = DEFAULT_WEIGHTS
    zero_one: bool = False


def _renorm(w):
    s = sum(w)
    return tuple(x / s for x in w)


def apply_ablation(variant, weights=DEFAULT_WEIGHTS):
    v = AblationVariant.parse(variant) if not isinstance(variant, AblationVariant) else variant
    l1, l2, l3 = weights
    base = dict(variant=v, weights=tuple(weights))
    if v is AblationVariant.FULL:
        return Wiring(**base)
    if v is AblationVariant.OSKGR:
        return Wiring(**base, structural_only=True)
    if v is AblationVariant.STKGR:
        return Wiring(**base, use_image=False)
    if v is AblationVariant.SIKGR:
        return Wiring(**base, use_text=False)
    if v is AblationVariant.FAKGR:
        return Wiring(**base, fusion_mode=fusion.SKIP_FILTER)
    if v is AblationVariant.FGKGR:
        return Wiring(**base, fusion_mode=fusion.SKIP_ATTENTION)
    if v is AblationVariant.DEKGR:
        return Wiring(variant=v, weights=(1.0, 0.0, 0.0))
    if v is AblationVariant.DSKGR:
        return Wiring(variant=v, weights=_renorm((l1, l2, 0.0)))
    if v is AblationVariant.DVKGR:
        return Wiring(variant=v, weights=_renorm((l1, 0.0, l3)))
    if v is AblationVariant.ZOKGR:
        return Wiring(**base, zero_one=True)
    raise ValueError(f"unhandled variant {v}")
