"""
Subset-correspondence side information and the metrics built on it.

A `Correspondence` lists index subsets ``(S_X^k, S_Y^k)`` that are known to
map onto each other. The smaller side (by probability mass under uniform
weights) must be sent entirely inside its partner; every cell that would
violate this lands in the `ForbiddenSet`. Pair supervision is the special
case of singleton subsets.
"""

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .core import TransportPlan
from .errors import InputError, InstanceError, ParseError


class SideInfoWarning(UserWarning):
    """Side information is vacuous, overlapping, or blocks whole rows/columns."""


def _gamma(plan):
    return plan.gamma if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)


@dataclass(frozen=True)
class Correspondence:
    """Corresponding index subsets ``[(source_indices, target_indices), ...]``."""

    pairs: tuple = ()

    def __post_init__(self):
        clean = []
        for k, pair in enumerate(self.pairs):
            try:
                sx, sy = pair
            except (TypeError, ValueError) as exc:
                raise InputError(f"pair {k} must be a (source, target) tuple") from exc
            sx = np.array(sx, dtype=int).ravel()
            sy = np.array(sy, dtype=int).ravel()
            for side, idx in (("source", sx), ("target", sy)):
                if len(np.unique(idx)) != len(idx):
                    raise InputError(f"pair {k}: duplicate {side} indices")
            sx.setflags(write=False)
            sy.setflags(write=False)
            clean.append((sx, sy))
        object.__setattr__(self, "pairs", tuple(clean))

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def from_labels(cls, source_labels, target_labels, classes=None):
        """One subset pair per class shared by both label arrays."""
        source_labels = np.asarray(source_labels)
        target_labels = np.asarray(target_labels)
        if classes is None:
            classes = np.intersect1d(np.unique(source_labels), np.unique(target_labels))
        return cls(tuple((np.flatnonzero(source_labels == c), np.flatnonzero(target_labels == c))
                         for c in classes))

    @classmethod
    def from_pairs(cls, pairs):
        """Singleton subsets from a list of ``(i, j)`` matches."""
        pairs = [(int(i), int(j)) for i, j in pairs]
        src = [i for i, _ in pairs]
        tgt = [j for _, j in pairs]
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise InputError("pair list repeats a source or target index")
        return cls(tuple(([i], [j]) for i, j in pairs))

    def validate(self, n_x, n_y):
        for k, (sx, sy) in enumerate(self.pairs):
            if sx.size and (sx.min() < 0 or sx.max() >= n_x):
                raise InputError(f"pair {k}: source index out of range [0, {n_x})")
            if sy.size and (sy.min() < 0 or sy.max() >= n_y):
                raise InputError(f"pair {k}: target index out of range [0, {n_y})")
        return self

    def overlaps(self):
        """True if some index appears in more than one subset on the same side."""
        for side in (0, 1):
            idx = np.concatenate([p[side] for p in self.pairs]) if self.pairs else np.array([])
            if len(np.unique(idx)) != len(idx):
                return True
        return False

    def to_json(self):
        return json.dumps([{"source": sx.tolist(), "target": sy.tolist()} for sx, sy in self.pairs])

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"correspondence is not valid JSON: {exc}") from exc
        if not isinstance(doc, list):
            raise ParseError("correspondence JSON must be an array of objects")
        pairs = []
        for k, item in enumerate(doc):
            if not isinstance(item, dict) or "source" not in item or "target" not in item:
                raise ParseError(f"entry {k} needs 'source' and 'target' index arrays")
            pairs.append((item["source"], item["target"]))
        return cls(tuple(pairs))


def save_correspondence(corr, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(corr.to_json())
        fh.write("\n")


def load_correspondence(path):
    with open(path, encoding="utf-8") as fh:
        return Correspondence.from_json(fh.read())


def save_pairs_csv(pairs, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "target"])
        for i, j in pairs:
            w.writerow([int(i), int(j)])


def load_pairs_csv(path):
    """Two-column ``source,target`` CSV (header required) into a list of pairs."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("pair file is empty", line=1)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 columns, got {len(row)}", line=lineno)
        try:
            out.append((int(row[0]), int(row[1])))
        except ValueError as exc:
            raise ParseError(f"non-integer index in {row}", line=lineno) from exc
    return out


@dataclass(frozen=True)
class ForbiddenSet:
    """Cells that the side information forces to zero.

    ``mask[i, j]`` is True for forbidden cells; ``indices`` lists the same
    cells as ``(i, j)`` rows in row-major order.
    """

    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise InstanceError("forbidden mask must be 2-D")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        idx = np.argwhere(mask)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def shape(self):
        return self.mask.shape

    def __len__(self):
        return len(self.indices)

    @property
    def blocked_rows(self):
        return np.flatnonzero(self.mask.all(axis=1))

    @property
    def blocked_cols(self):
        return np.flatnonzero(self.mask.all(axis=0))


def build_forbidden(corr, n_x, n_y):
    """Union over subset pairs of the cells that break the correspondence.

    For a pair with masses ``p = |S_X|/n_x`` and ``q = |S_Y|/n_y``: if
    ``p <= q`` the rows of ``S_X`` may only use columns in ``S_Y``; if
    ``q <= p`` the columns of ``S_Y`` may only use rows in ``S_X``. Both
    apply when the masses are equal.
    """
    corr.validate(n_x, n_y)
    mask = np.zeros((n_x, n_y), dtype=bool)
    for sx, sy in corr.pairs:
        in_x = np.zeros(n_x, dtype=bool)
        in_y = np.zeros(n_y, dtype=bool)
        in_x[sx] = True
        in_y[sy] = True
        # integer cross-multiplication keeps the equality case exact
        lhs, rhs = len(sx) * n_y, len(sy) * n_x
        if lhs <= rhs:
            mask |= np.outer(in_x, ~in_y)
        if rhs <= lhs:
            mask |= np.outer(~in_x, in_y)
    forb = ForbiddenSet(mask)
    if len(forb.blocked_rows) or len(forb.blocked_cols):
        warnings.warn(
            f"side information forbids every cell of rows {forb.blocked_rows.tolist()} / "
            f"columns {forb.blocked_cols.tolist()}; masked transport will be infeasible",
            SideInfoWarning, stacklevel=2)
    return forb


def side_info_loss(plan, forb):
    """Sum of squared plan entries over the forbidden cells."""
    G = _gamma(plan)
    if G.shape != forb.shape:
        raise InstanceError(f"plan shape {G.shape} does not match forbidden set shape {forb.shape}")
    return float(np.sum(G[forb.mask] ** 2))


def subset_accuracy(plan, corr):
    """Mass moved into corresponding subsets over the attainable maximum.

    Clamped to 1; overlapping subsets can otherwise count mass twice.
    """
    G = _gamma(plan)
    n_x, n_y = G.shape
    corr.validate(n_x, n_y)
    num = 0.0
    den = 0.0
    for sx, sy in corr.pairs:
        num += G[np.ix_(sx, sy)].sum()
        den += min(len(sx) / n_x, len(sy) / n_y)
    if den == 0:
        raise InputError("subset accuracy needs at least one non-empty subset pair")
    acc = num / den
    if acc > 1.0:
        if corr.overlaps() and acc > 1.0 + 1e-9:
            warnings.warn("overlapping subsets inflate subset accuracy; clamped to 1",
                          SideInfoWarning, stacklevel=2)
        acc = 1.0
    return float(acc)


def pair_accuracy(plan, pairs):
    """Subset accuracy with every known match ``(i, j)`` as a singleton pair."""
    return subset_accuracy(plan, Correspondence.from_pairs(pairs))


def hard_assignment(plan):
    """Row-wise argmax of the plan; ties go to the lowest column index."""
    return np.argmax(_gamma(plan), axis=1)
