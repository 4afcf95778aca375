"""Nested areal geography and the count tables that live on it.

Levels are indexed 1 (finest, e.g. Mesh Block) to 3 (coarsest, e.g. SA2).
After loading, every unit is addressed by a dense 0-based index within its
level; string identifiers are only used when reading or writing files.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StructureError, ValidationError, DataError

LEVELS = (1, 2, 3)
DEFAULT_LEVEL_NAMES = ("MB", "SA1", "SA2")
UNITS_HEADER = ["unit_id", "level", "parent_id", "centroid_x", "centroid_y", "covariate_decile"]
COUNTS_HEADER = ["unit_id", "class_index", "count"]


@dataclass(frozen=True, eq=False)
class SpatialHierarchy:
    """Three nested levels of areal units.

    ``parent1[j]`` is the level-2 index of level-1 unit ``j`` and
    ``parent2[u]`` the level-3 index of level-2 unit ``u``. Centroids and
    covariate deciles are attached to level-2 units only.
    """

    unit_ids: tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]
    parent1: np.ndarray
    parent2: np.ndarray
    centroids: np.ndarray
    decile: np.ndarray
    level_names: tuple[str, str, str] = DEFAULT_LEVEL_NAMES
    _lookup: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        for arr in (self.parent1, self.parent2, self.centroids, self.decile):
            arr.setflags(write=False)
        self._validate()
        lookup = {}
        for k, ids in zip(LEVELS, self.unit_ids):
            for idx, uid in enumerate(ids):
                lookup[uid] = (k, idx)
        self._lookup.update(lookup)

    def _validate(self):
        n1, n2, n3 = self.sizes
        if self.parent1.shape != (n1,) or self.parent2.shape != (n2,):
            raise StructureError("parent arrays do not match unit counts")
        if n1 and (self.parent1.min() < 0 or self.parent1.max() >= n2):
            raise StructureError("level-1 parent index out of range")
        if n2 and (self.parent2.min() < 0 or self.parent2.max() >= n3):
            raise StructureError("level-2 parent index out of range")
        if np.unique(self.parent1).size != n2:
            orphan = sorted(set(range(n2)) - set(self.parent1.tolist()))[0]
            raise StructureError(f"level-2 unit {self.unit_ids[1][orphan]!r} has no level-1 children")
        if np.unique(self.parent2).size != n3:
            orphan = sorted(set(range(n3)) - set(self.parent2.tolist()))[0]
            raise StructureError(f"level-3 unit {self.unit_ids[2][orphan]!r} has no level-2 children")
        if self.centroids.shape != (n2, 2) or not np.all(np.isfinite(self.centroids)):
            raise ValidationError("every level-2 unit needs a finite centroid")
        if self.decile.shape != (n2,) or np.any((self.decile < 1) | (self.decile > 10)):
            raise ValidationError("covariate decile outside 1..10")

    @classmethod
    def from_arrays(cls, parent1, parent2, centroids, decile, unit_ids=None, level_names=DEFAULT_LEVEL_NAMES):
        parent1 = np.asarray(parent1, dtype=np.int64)
        parent2 = np.asarray(parent2, dtype=np.int64)
        n3 = int(parent2.max()) + 1 if parent2.size else 0
        if unit_ids is None:
            unit_ids = (
                tuple(f"L1_{i}" for i in range(parent1.size)),
                tuple(f"L2_{i}" for i in range(parent2.size)),
                tuple(f"L3_{i}" for i in range(n3)),
            )
        return cls(
            unit_ids=tuple(tuple(ids) for ids in unit_ids),
            parent1=parent1,
            parent2=parent2,
            centroids=np.asarray(centroids, dtype=float).reshape(-1, 2),
            decile=np.asarray(decile, dtype=np.int64),
            level_names=tuple(level_names),
        )

    @property
    def sizes(self) -> tuple[int, int, int]:
        return tuple(len(ids) for ids in self.unit_ids)

    @property
    def parent13(self) -> np.ndarray:
        """Composed level-1 -> level-3 map."""
        return self.parent2[self.parent1]

    def index_of(self, unit_id: str) -> tuple[int, int]:
        """Return ``(level, index)`` for an identifier."""
        try:
            return self._lookup[unit_id]
        except KeyError:
            raise DataError(f"unknown unit_id {unit_id!r}") from None

    def parent_map(self, level: int) -> np.ndarray:
        if level == 1:
            return self.parent1
        if level == 2:
            return self.parent2
        raise ValueError("level-3 units have no parent")

    def aggregate(self, values: np.ndarray, to_level: int, from_level: int = 1) -> np.ndarray:
        """Sum rows of ``values`` (indexed by ``from_level`` units) up to ``to_level``."""
        values = np.asarray(values)
        if to_level == from_level:
            return values.copy()
        if from_level == 1 and to_level == 3:
            index, n_out = self.parent13, self.sizes[2]
        elif to_level == from_level + 1:
            index, n_out = self.parent_map(from_level), self.sizes[to_level - 1]
        else:
            raise ValueError(f"cannot aggregate level {from_level} to level {to_level}")
        out = np.zeros((n_out,) + values.shape[1:], dtype=values.dtype)
        np.add.at(out, index, values)
        return out

    def children(self, level: int) -> list[np.ndarray]:
        """Child indices (at ``level - 1``) of each unit at ``level``."""
        pmap = self.parent_map(level - 1)
        order = np.argsort(pmap, kind="stable")
        bounds = np.searchsorted(pmap[order], np.arange(self.sizes[level - 1] + 1))
        return [order[bounds[u]:bounds[u + 1]] for u in range(self.sizes[level - 1])]

    def distance_matrix(self) -> np.ndarray:
        diff = self.centroids[:, None, :] - self.centroids[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))


def load_hierarchy(path) -> SpatialHierarchy:
    """Read a units file (see ``UNITS_HEADER``) and return a validated hierarchy."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"units file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != UNITS_HEADER:
            raise StructureError(f"units file header must be {','.join(UNITS_HEADER)}")
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    ids: list[list[str]] = [[], [], []]
    level_of: dict[str, int] = {}
    parent_of: dict[str, str] = {}
    extra: dict[str, tuple[float, float, int]] = {}
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(UNITS_HEADER):
            raise StructureError(f"line {lineno}: expected {len(UNITS_HEADER)} columns")
        uid, level_s, parent, cx, cy, dec = (c.strip() for c in row)
        if uid in level_of:
            raise StructureError(f"duplicate unit_id {uid!r}")
        try:
            level = int(level_s)
        except ValueError:
            raise ValidationError(f"unit {uid!r}: bad level {level_s!r}") from None
        if level not in LEVELS:
            raise ValidationError(f"unit {uid!r}: level must be 1, 2 or 3")
        level_of[uid] = level
        ids[level - 1].append(uid)
        if level < 3:
            if not parent:
                raise StructureError(f"missing parent for unit {uid!r}")
            parent_of[uid] = parent
        if level == 2:
            try:
                x, y, d = float(cx), float(cy), int(dec)
            except ValueError:
                raise ValidationError(f"unit {uid!r}: centroid and decile required at level 2") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValidationError(f"unit {uid!r}: non-finite centroid")
            if not 1 <= d <= 10:
                raise ValidationError(f"unit {uid!r}: covariate_decile {d} outside 1..10")
            extra[uid] = (x, y, d)

    index = [{uid: i for i, uid in enumerate(level_ids)} for level_ids in ids]
    parents = []
    for level in (1, 2):
        arr = np.empty(len(ids[level - 1]), dtype=np.int64)
        for i, uid in enumerate(ids[level - 1]):
            p = parent_of[uid]
            if p not in level_of:
                raise StructureError(f"missing parent {p!r} for unit {uid!r}")
            if level_of[p] != level + 1:
                raise StructureError(f"parent level mismatch: unit {uid!r} (level {level}) -> {p!r} (level {level_of[p]})")
            arr[i] = index[level][p]
        parents.append(arr)

    cent = np.array([extra[u][:2] for u in ids[1]], dtype=float).reshape(-1, 2)
    dec = np.array([extra[u][2] for u in ids[1]], dtype=np.int64)
    return SpatialHierarchy(
        unit_ids=tuple(tuple(x) for x in ids),
        parent1=parents[0],
        parent2=parents[1],
        centroids=cent,
        decile=dec,
    )


def write_hierarchy(h: SpatialHierarchy, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(UNITS_HEADER)
        for uid in h.unit_ids[2]:
            w.writerow([uid, 3, "", "", "", ""])
        for u, uid in enumerate(h.unit_ids[1]):
            x, y = h.centroids[u]
            w.writerow([uid, 2, h.unit_ids[2][h.parent2[u]], repr(float(x)), repr(float(y)), int(h.decile[u])])
        for j, uid in enumerate(h.unit_ids[0]):
            w.writerow([uid, 1, h.unit_ids[1][h.parent1[j]], "", "", ""])


@dataclass(eq=False)
class CountTable:
    """Counts ``c[i, j, k]`` stored as one ``(N_k, M)`` integer array per level.

    Column ``M - 1`` holds the row total. For perturbed tables the total is an
    independent observation and need not equal the class sum.
    """

    hierarchy: SpatialHierarchy
    values: tuple[np.ndarray, np.ndarray, np.ndarray]
    perturbed: bool = False

    def __post_init__(self):
        self.values = tuple(np.asarray(v, dtype=np.int64) for v in self.values)
        m = self.values[0].shape[1]
        for k, v in zip(LEVELS, self.values):
            if v.shape != (self.hierarchy.sizes[k - 1], m):
                raise DataError(f"level-{k} table shape {v.shape} does not match hierarchy")
            if np.any(v < 0):
                raise ValidationError("negative count")
        if self.perturbed:
            thr_hits = [(v == 1) | (v == 2) for v in self.values]
            if any(h.any() for h in thr_hits):
                raise ValidationError("value impossible under suppression (1 or 2) in perturbed table")

    @property
    def M(self) -> int:
        return self.values[0].shape[1]

    def level(self, k: int) -> np.ndarray:
        return self.values[k - 1]

    @classmethod
    def from_level1(cls, h: SpatialHierarchy, classes: np.ndarray) -> "CountTable":
        """Build an internally consistent table from level-1 class counts ``(N1, M-1)``."""
        classes = np.asarray(classes, dtype=np.int64)
        full1 = np.concatenate([classes, classes.sum(1, keepdims=True)], axis=1)
        return cls(h, (full1, h.aggregate(full1, 2), h.aggregate(full1, 3)), perturbed=False)

    def is_consistent(self) -> bool:
        v1, v2, v3 = self.values
        h = self.hierarchy
        rows_ok = all(np.array_equal(v[:, :-1].sum(1), v[:, -1]) for v in self.values)
        return rows_ok and np.array_equal(h.aggregate(v1, 2), v2) and np.array_equal(h.aggregate(v2, 3, 2), v3)

    def copy(self) -> "CountTable":
        return CountTable(self.hierarchy, tuple(v.copy() for v in self.values), self.perturbed)


def load_counts(path, h: SpatialHierarchy, perturbed: bool) -> CountTable:
    """Read a sparse counts file into a dense table; absent cells are 0."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"counts file not found: {path}")
    with path.open(newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("M="):
            raise DataError("counts file must start with a 'M=<int>' line")
        try:
            m = int(first[2:])
        except ValueError:
            raise DataError(f"bad class count line {first!r}") from None
        if m < 2:
            raise ValidationError("M must be at least 2 (one class plus the total)")
        reader = csv.reader(fh)
        header = [c.strip() for c in next(reader, [])]
        if header != COUNTS_HEADER:
            raise DataError(f"counts header must be {','.join(COUNTS_HEADER)}")
        values = [np.zeros((n, m), dtype=np.int64) for n in h.sizes]
        for row in reader:
            if not row or not any(c.strip() for c in row):
                continue
            uid, cls_s, cnt_s = (c.strip() for c in row)
            level, idx = h.index_of(uid)
            cls_i, cnt = int(cls_s), int(cnt_s)
            if not 1 <= cls_i <= m:
                raise ValidationError(f"class_index {cls_i} outside 1..{m}")
            if cnt < 0:
                raise ValidationError(f"negative count for {uid!r}")
            if perturbed and cnt in (1, 2):
                raise ValidationError(f"value impossible under suppression: {uid!r} class {cls_i} = {cnt}")
            values[level - 1][idx, cls_i - 1] = cnt
    return CountTable(h, tuple(values), perturbed=perturbed)


def write_counts(table: CountTable, path) -> None:
    """Write the nonzero cells of ``table`` in the sparse counts format."""
    path = Path(path)
    h = table.hierarchy
    with path.open("w", newline="") as fh:
        fh.write(f"M={table.M}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COUNTS_HEADER)
        for k in LEVELS:
            v = table.level(k)
            rows, cols = np.nonzero(v)
            ids = h.unit_ids[k - 1]
            for j, i in zip(rows.tolist(), cols.tolist()):
                w.writerow([ids[j], i + 1, int(v[j, i])])
