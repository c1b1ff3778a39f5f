"""SCP code -> diagnostic superclass -> binary normal/abnormal target.

The code table lives in ``data/superclasses.tsv`` so it can be diffed by eye.
"""
import enum
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import DegenerateDistribution, UnknownCode, UnlabeledRecord


class Superclass(str, enum.Enum):
    NORM = "NORM"
    STTC = "STTC"
    MI = "MI"
    HYP = "HYP"
    CD = "CD"
    OTHER = "OTHER"


NORMAL, ABNORMAL = 0, 1

# Later entries win a cross-class tie at equal confidence.
DEFAULT_PRIORITY = (Superclass.NORM, Superclass.OTHER, Superclass.STTC,
                    Superclass.MI, Superclass.HYP, Superclass.CD)


@lru_cache(maxsize=1)
def code_table():
    """Mapping of every known SCP code to its superclass."""
    text = resources.files("ecglite").joinpath("data/superclasses.tsv").read_text()
    table = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        code, sc = line.split("\t")
        if code in table:
            raise ValueError(f"code {code} listed twice in superclasses.tsv")
        table[code] = Superclass(sc)
    return table


def map_to_superclass(code):
    try:
        return code_table()[code]
    except KeyError:
        raise UnknownCode(f"SCP code {code!r} belongs to no superclass") from None


def binary_of(superclass):
    return NORMAL if superclass is Superclass.NORM else ABNORMAL


def select_superclass(scp, priority=DEFAULT_PRIORITY):
    """Superclass of the highest-confidence mappable code in ``scp``."""
    table = code_table()
    known = {c: conf for c, conf in scp.items() if c in table}
    if not known:
        raise UnlabeledRecord(f"no mappable code among {sorted(scp)}")
    top = max(known.values())
    tied = {table[c] for c, conf in known.items() if conf == top}
    rank = {sc: i for i, sc in enumerate(priority)}
    return max(tied, key=rank.__getitem__)


def select_binary_label(scp, priority=DEFAULT_PRIORITY):
    """0 for normal, 1 for abnormal, from the highest-confidence mappable code."""
    return binary_of(select_superclass(scp, priority))


@dataclass(frozen=True)
class ClassWeights:
    weight_normal: float
    weight_abnormal: float

    def as_dict(self):
        return {NORMAL: self.weight_normal, ABNORMAL: self.weight_abnormal}

    def for_labels(self, y):
        """Per-sample weight vector for an array of 0/1 labels."""
        y = np.asarray(y)
        return np.where(y == ABNORMAL, self.weight_abnormal, self.weight_normal)


def compute_class_weights(labels):
    """Balanced weights ``N / (2 * N_c)``."""
    labels = list(labels)
    n = len(labels)
    n_abn = sum(1 for v in labels if int(v) == ABNORMAL)
    n_norm = sum(1 for v in labels if int(v) == NORMAL)
    if n_norm + n_abn != n:
        raise ValueError("labels must be 0 or 1")
    if n_norm == 0 or n_abn == 0:
        raise DegenerateDistribution(
            f"both classes are required (normal={n_norm}, abnormal={n_abn})")
    return ClassWeights(n / (2 * n_norm), n / (2 * n_abn))
