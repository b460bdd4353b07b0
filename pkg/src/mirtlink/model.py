"""Item response functions for mixed-format tests.

Dichotomous (MC) items follow the compensatory multidimensional 3PL,

    P(X=1 | theta) = c + (1 - c) * logistic(a . theta + d),

and polytomous (CR) items the multidimensional generalized partial credit
model with step thresholds ``delta``,

    P(X=k | theta) ∝ exp(sum_{v<=k} (a . theta - delta_v)).

The logistic metric is used throughout (no 1.7 scaling constant). Slope and
intercept form is canonical; the unidimensional difficulty ``b = -d / a`` and
GPC step locations ``delta_v / a`` are derived views.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.special import expit, log_expit


class Family(str, Enum):
    UIRT = "UIRT"
    SIMPLE = "SimpleStructure"
    BIFACTOR = "Bifactor"

    @property
    def dim(self) -> int:
        return {"UIRT": 1, "SimpleStructure": 2, "Bifactor": 3}[self.value]


class Format(str, Enum):
    MC = "MC"
    CR = "CR"


def loading_mask(family: Family, fmt: Format) -> tuple[bool, ...]:
    """Dimensions on which an item of this family/format may load."""
    family, fmt = Family(family), Format(fmt)
    if family is Family.UIRT:
        return (True,)
    if family is Family.SIMPLE:
        return (True, False) if fmt is Format.MC else (False, True)
    return (True, True, False) if fmt is Format.MC else (True, False, True)


def _check_slopes(a: tuple[float, ...], family: Family, fmt: Format, linked: bool) -> None:
    if len(a) != family.dim:
        raise ValueError(f"{family.value} items need {family.dim} slopes, got {len(a)}")
    if not all(math.isfinite(x) for x in a):
        raise ValueError("slopes must be finite")
    if linked:
        # a rotation legitimately mixes dimensions
        return
    mask = loading_mask(family, fmt)
    for x, allowed in zip(a, mask):
        if x != 0.0 and not allowed:
            raise ValueError(f"{fmt.value} item violates the {family.value} loading pattern: a={a}")
    if family is Family.SIMPLE and sum(x != 0.0 for x in a) != 1:
        raise ValueError(f"simple-structure items load on exactly one dimension: a={a}")


@dataclass(frozen=True)
class DichotomousItem:
    """Multidimensional 3PL item.

    ``linked`` marks an item that has been carried through a coordinate
    transformation; such items keep their family tag but are exempt from the
    loading-mask check.
    """

    id: str
    a: tuple[float, ...]
    d: float
    c: float = 0.0
    format: Format = Format.MC
    model_family: Family = Family.UIRT
    anchor: bool = False
    linked: bool = False

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(x) for x in self.a))
        object.__setattr__(self, "d", float(self.d))
        object.__setattr__(self, "c", float(self.c))
        object.__setattr__(self, "format", Format(self.format))
        object.__setattr__(self, "model_family", Family(self.model_family))
        if not 0.0 <= self.c < 1.0:
            raise ValueError(f"guessing parameter must lie in [0, 1), got {self.c}")
        if not math.isfinite(self.d):
            raise ValueError("intercept must be finite")
        _check_slopes(self.a, self.model_family, self.format, self.linked)

    @property
    def dim(self) -> int:
        return len(self.a)

    @property
    def n_categories(self) -> int:
        return 2

    @property
    def b(self) -> float:
        """Unidimensional difficulty view, ``-d / a``."""
        if self.dim != 1:
            raise ValueError("difficulty view is only defined for D=1")
        return -self.d / self.a[0]

    @classmethod
    def from_abc(cls, id: str, a: float, b: float, c: float = 0.0, **kw) -> "DichotomousItem":
        return cls(id=id, a=(a,), d=-a * b, c=c, **kw)


@dataclass(frozen=True)
class PolytomousItem:
    """Multidimensional generalized partial credit item with K-1 step thresholds."""

    id: str
    a: tuple[float, ...]
    deltas: tuple[float, ...]
    format: Format = Format.CR
    model_family: Family = Family.UIRT
    anchor: bool = False
    linked: bool = False

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(x) for x in self.a))
        object.__setattr__(self, "deltas", tuple(float(x) for x in self.deltas))
        object.__setattr__(self, "format", Format(self.format))
        object.__setattr__(self, "model_family", Family(self.model_family))
        if len(self.deltas) < 1:
            raise ValueError("a partial credit item needs at least two categories")
        if not all(math.isfinite(x) for x in self.deltas):
            raise ValueError("thresholds must be finite")
        _check_slopes(self.a, self.model_family, self.format, self.linked)

    @property
    def dim(self) -> int:
        return len(self.a)

    @property
    def n_categories(self) -> int:
        return len(self.deltas) + 1

    @property
    def steps(self) -> tuple[float, ...]:
        """Step locations ``delta_v / a`` on the theta metric (D=1 only)."""
        if self.dim != 1:
            raise ValueError("step view is only defined for D=1")
        return tuple(x / self.a[0] for x in self.deltas)


Item = Union[DichotomousItem, PolytomousItem]


@dataclass(frozen=True)
class TestForm:
    name: str
    items: tuple = field(default_factory=tuple)

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if not self.items:
            raise ValueError(f"form {self.name!r} has no items")
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError(f"form {self.name!r} has duplicate item ids")

    @property
    def max_score(self) -> int:
        return sum(it.n_categories - 1 for it in self.items)

    @property
    def anchors(self) -> tuple:
        return tuple(it for it in self.items if it.anchor)

    def by_id(self) -> dict:
        return {it.id: it for it in self.items}

    def subset(self, ids: Iterable[str]) -> list:
        lookup = self.by_id()
        return [lookup[i] for i in ids]


def _as_theta(item_dim: int, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0:
        theta = theta.reshape(1)
    if theta.shape[-1] != item_dim:
        raise ValueError(f"theta has dimension {theta.shape[-1]}, item expects {item_dim}")
    return theta


def prob_dichotomous(item: DichotomousItem, theta) -> np.ndarray | float:
    """P(X=1 | theta). ``theta`` may be one vector (D,) or a batch (N, D)."""
    theta = _as_theta(item.dim, theta)
    z = theta @ np.asarray(item.a) + item.d
    p = item.c + (1.0 - item.c) * expit(z)
    return float(p) if np.ndim(p) == 0 else p


def _gpc_log_probs(z: np.ndarray, cum_deltas: np.ndarray) -> np.ndarray:
    """Category log-probabilities; ``z`` is (...,), ``cum_deltas`` is (K,) with leading 0."""
    k = np.arange(cum_deltas.shape[-1])
    num = z[..., None] * k - cum_deltas
    num = num - num.max(axis=-1, keepdims=True)
    return num - np.log(np.exp(num).sum(axis=-1, keepdims=True))


def prob_polytomous(item: PolytomousItem, theta) -> np.ndarray:
    """Category probabilities, shape (K,) or (N, K)."""
    theta = _as_theta(item.dim, theta)
    z = theta @ np.asarray(item.a)
    cum = np.concatenate([[0.0], np.cumsum(item.deltas)])
    return np.exp(_gpc_log_probs(np.asarray(z), cum))


def expected_score(item: Item, theta):
    if isinstance(item, DichotomousItem):
        return prob_dichotomous(item, theta)
    probs = prob_polytomous(item, theta)
    e = probs @ np.arange(item.n_categories)
    return float(e) if np.ndim(e) == 0 else e


def item_probabilities(item: Item, theta) -> np.ndarray:
    """Full category probability vector for either item kind."""
    if isinstance(item, DichotomousItem):
        p = prob_dichotomous(item, theta)
        return np.stack([1.0 - np.asarray(p), np.asarray(p)], axis=-1)
    return prob_polytomous(item, theta)


class PackedItems:
    """Array view of an item list for vectorized evaluation.

    Thresholds are stored cumulatively and padded with +inf so that padded
    categories receive zero probability.
    """

    def __init__(self, items: Sequence[Item]):
        items = list(items)
        if not items:
            raise ValueError("item list is empty")
        dims = {it.dim for it in items}
        if len(dims) != 1:
            raise ValueError(f"items have mixed dimensionality {sorted(dims)}")
        self.dim = dims.pop()
        self.n_items = len(items)
        self.ids = [it.id for it in items]
        self.slopes = np.array([it.a for it in items], dtype=float)
        self.is_poly = np.array([isinstance(it, PolytomousItem) for it in items])
        self.ncat = np.array([it.n_categories for it in items])
        self.kmax = int(self.ncat.max())
        self.intercept = np.array([0.0 if p else it.d for it, p in zip(items, self.is_poly)])
        self.guess = np.array([0.0 if p else it.c for it, p in zip(items, self.is_poly)])
        cum = np.full((self.n_items, self.kmax), np.inf)
        cum[:, 0] = 0.0
        for j, it in enumerate(items):
            if self.is_poly[j]:
                cum[j, 1 : it.n_categories] = np.cumsum(it.deltas)
        self.cum_deltas = cum
        self.dich_idx = np.flatnonzero(~self.is_poly)
        self.poly_idx = np.flatnonzero(self.is_poly)
        # contiguous copies for the summed-score fast path
        self._sd = self.slopes[self.dich_idx].T.copy()
        self._dd = self.intercept[self.dich_idx]
        self._cd = self.guess[self.dich_idx]
        self._sp = self.slopes[self.poly_idx].T.copy()
        self._kp = np.arange(self.kmax, dtype=float)
        self._cp = self.cum_deltas[self.poly_idx]

    def total_scores(self, theta: np.ndarray) -> np.ndarray:
        """Summed expected score (the TRF) at each row of ``theta``, shape (N,)."""
        theta = np.atleast_2d(theta)
        total = np.zeros(theta.shape[0])
        if self._dd.size:
            total += self._cd.sum() + expit(theta @ self._sd + self._dd) @ (1.0 - self._cd)
        if self._cp.size:
            z = theta @ self._sp
            # category axis kept outermost: reductions over K become elementwise ops
            num = [k * z - self._cp[:, k] for k in range(1, self.kmax)]
            top = np.maximum.reduce(num + [np.zeros_like(z)])
            denom = np.exp(-top)
            expect = np.zeros_like(z)
            for k, nk in enumerate(num, start=1):
                ek = np.exp(nk - top)
                denom += ek
                expect += k * ek
            total += (expect / denom).sum(axis=1)
        return total

    def expected_scores(self, theta: np.ndarray) -> np.ndarray:
        """Expected item scores, shape (N, J)."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if theta.shape[1] != self.dim:
            raise ValueError(f"theta has dimension {theta.shape[1]}, items expect {self.dim}")
        z = theta @ self.slopes.T
        out = np.empty_like(z)
        di = self.dich_idx
        if di.size:
            out[:, di] = self.guess[di] + (1.0 - self.guess[di]) * expit(z[:, di] + self.intercept[di])
        pi = self.poly_idx
        if pi.size:
            logp = _gpc_log_probs(z[:, pi], self.cum_deltas[pi])
            out[:, pi] = np.exp(logp) @ np.arange(self.kmax)
        return out

    def log_prob_matrix(self, theta: np.ndarray, responses: np.ndarray) -> np.ndarray:
        """log P(observed score) per cell, shape (N, J); missing cells (< 0) give 0."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        z = theta @ self.slopes.T
        out = np.zeros_like(z)
        miss = responses < 0
        di = self.dich_idx
        if di.size:
            x = z[:, di] + self.intercept[di]
            c = self.guess[di]
            with np.errstate(divide="ignore"):
                log_c = np.log(c)
            lp1 = np.logaddexp(log_c, np.log1p(-c) + log_expit(x))
            lp0 = np.log1p(-c) + log_expit(-x)
            out[:, di] = np.where(responses[:, di] == 1, lp1, lp0)
        pi = self.poly_idx
        if pi.size:
            logp = _gpc_log_probs(z[:, pi], self.cum_deltas[pi])
            r = np.clip(responses[:, pi], 0, None)
            out[:, pi] = np.take_along_axis(logp, r[..., None], axis=-1)[..., 0]
        out[miss] = 0.0
        return out


def trf(items: Sequence[Item], theta) -> np.ndarray | float:
    """Test response function: summed expected item scores at ``theta``."""
    packed = PackedItems(items)
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim <= 1
    t = packed.expected_scores(theta.reshape(1, -1) if single else theta).sum(axis=1)
    return float(t[0]) if single else t


# item bank CSV -------------------------------------------------------------

BANK_COLUMNS = ["id", "format", "model_family", "K", "a1", "a2", "a3", "d", "c"]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_item_bank(items: Sequence[Item], path=None) -> str:
    """Serialize items to the bank CSV; returns the text and writes it if ``path`` is given.

    Blank slope cells mean zero. Floats are written with ``repr`` so that
    reading the text back gives bit-identical values. A trailing ``linked``
    column is added only when some item carries transformed (off-pattern)
    slopes.
    """
    kmax = max((it.n_categories for it in items), default=2)
    any_linked = any(it.linked for it in items)
    cols = BANK_COLUMNS + [f"delta{v}" for v in range(1, kmax)] + ["anchor"] + (["linked"] if any_linked else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for it in items:
        slopes = [(_fmt(x) if x != 0.0 else "") for x in it.a] + [""] * (3 - it.dim)
        if isinstance(it, DichotomousItem):
            d, c, deltas = _fmt(it.d), _fmt(it.c), []
        else:
            d, c, deltas = "", "", [_fmt(x) for x in it.deltas]
        deltas += [""] * (kmax - 1 - len(deltas))
        row = [it.id, it.format.value, it.model_family.value, it.n_categories, *slopes, d, c, *deltas, int(it.anchor)]
        w.writerow(row + ([int(it.linked)] if any_linked else []))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_item_bank(source) -> list:
    """Parse bank CSV text or a path into a list of items."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text()
    else:
        text = source
    rows = list(csv.DictReader(io.StringIO(text)))
    items = []
    for n, row in enumerate(rows, start=2):
        try:
            family = Family(row["model_family"])
            k = int(row["K"])
            a = tuple(float(row[f"a{i}"]) if row.get(f"a{i}") else 0.0 for i in range(1, family.dim + 1))
            anchor = row["anchor"].strip() == "1"
            linked = (row.get("linked") or "0").strip() == "1"
            if row.get("d"):
                items.append(DichotomousItem(row["id"], a, float(row["d"]), float(row["c"] or 0.0),
                                             row["format"], family, anchor, linked))
            else:
                deltas = tuple(float(row[f"delta{v}"]) for v in range(1, k))
                items.append(PolytomousItem(row["id"], a, deltas, row["format"], family, anchor, linked))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"item bank line {n}: {exc}") from exc
    return items


def with_anchor(item: Item, anchor: bool) -> Item:
    return replace(item, anchor=anchor)
