"""Aggregation structures: trees, grouped structures, temporal hierarchies.

A structure over ``m`` bottom series is a set of summing constraints, each
tying one upper series to a subset of the bottoms.  When the constraint
leaf sets form a laminar family (every pair nested or disjoint) the
structure is a tree and can be organised into levels; otherwise it is a
grouped structure, which we split into a maximal tree part plus residual
constraints.

Conventions fixed here and used everywhere else:

* the full vector is ``y = [u; b]`` with upper entries first;
* upper rows of a tree are ordered top level first, then descending level,
  left to right within a level;
* a grouped structure keeps its constraints in the order they were given.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    EmptyNodeError,
    NestingError,
    NonDivisorError,
    OverlapError,
)

LeafSet = tuple[int, ...]


def _as_leaf_tuple(leaves, n_bottom: int) -> LeafSet:
    out = tuple(sorted(int(i) for i in leaves))
    if not out:
        raise EmptyNodeError("upper node with empty leaf set")
    if len(set(out)) != len(out):
        raise OverlapError(f"node lists a leaf twice: {out}")
    if out[0] < 0 or out[-1] >= n_bottom:
        raise DimensionError(
            f"leaf index out of range [0, {n_bottom}): {out}"
        )
    return out


def _mask(leaves: LeafSet) -> int:
    m = 0
    for i in leaves:
        m |= 1 << i
    return m


@dataclass(frozen=True, eq=False)
class Hierarchy:
    """Tree-structured aggregation constraints.

    ``levels`` is ordered bottom-up: ``levels[0]`` holds the upper nodes
    closest to the bottom series, ``levels[-1]`` the coarsest ones.  Each
    node is the sorted tuple of bottom indices it aggregates.
    """

    n_bottom: int
    levels: tuple[tuple[LeafSet, ...], ...]
    labels: tuple[str, ...] | None = None

    @property
    def n_upper(self) -> int:
        return sum(len(level) for level in self.levels)

    @property
    def n_total(self) -> int:
        return self.n_bottom + self.n_upper

    @cached_property
    def constraints(self) -> tuple[LeafSet, ...]:
        """Upper leaf sets in row order: top level first, left to right."""
        out: list[LeafSet] = []
        for level in reversed(self.levels):
            out.extend(level)
        return tuple(out)

    def aggregating_matrix(self) -> np.ndarray:
        return _aggregating_matrix(self.constraints, self.n_bottom)

    def summing_matrix(self) -> np.ndarray:
        return _summing_matrix(self.constraints, self.n_bottom)


@dataclass(frozen=True, eq=False)
class GroupedStructure:
    """A full constraint set split into a tree part plus residual constraints.

    ``constraints`` keeps the caller's order and is the row order of the
    aggregating matrix.  ``sub_index`` maps the sub-hierarchy's row order
    onto ``constraints``; ``extra_index`` does the same for the residuals.
    """

    n_bottom: int
    constraints: tuple[LeafSet, ...]
    subhierarchy: Hierarchy
    extra_constraints: tuple[LeafSet, ...]
    sub_index: tuple[int, ...]
    extra_index: tuple[int, ...]
    labels: tuple[str, ...] | None = None

    @property
    def n_upper(self) -> int:
        return len(self.constraints)

    @property
    def n_total(self) -> int:
        return self.n_bottom + self.n_upper

    @property
    def is_tree(self) -> bool:
        return not self.extra_constraints

    def aggregating_matrix(self) -> np.ndarray:
        return _aggregating_matrix(self.constraints, self.n_bottom)

    def summing_matrix(self) -> np.ndarray:
        return _summing_matrix(self.constraints, self.n_bottom)


Structure = Hierarchy | GroupedStructure


def _aggregating_matrix(constraints: tuple[LeafSet, ...], n_bottom: int) -> np.ndarray:
    a = np.zeros((len(constraints), n_bottom), dtype=float)
    for r, leaves in enumerate(constraints):
        a[r, list(leaves)] = 1.0
    return a


def _summing_matrix(constraints: tuple[LeafSet, ...], n_bottom: int) -> np.ndarray:
    a = _aggregating_matrix(constraints, n_bottom)
    return np.vstack([a, np.eye(n_bottom)])


def aggregating_matrix(structure: Structure) -> np.ndarray:
    """Binary (n-m) x m matrix A with one row per upper constraint."""
    return structure.aggregating_matrix()


def summing_matrix(structure: Structure) -> np.ndarray:
    """The n x m matrix S = [A; I]."""
    return structure.summing_matrix()


def build_hierarchy(levels_spec, n_bottom: int, labels=None) -> Hierarchy:
    """Validate a per-level list of leaf-index sets and build a tree.

    ``levels_spec`` is ordered bottom-up; each entry is a list of leaf-index
    collections, one per upper node at that level.  An empty list yields the
    trivial single-series hierarchy.

    Raises :class:`OverlapError` if siblings share a leaf,
    :class:`NestingError` if a node crosses a higher-level node's boundary,
    and :class:`EmptyNodeError` for nodes with no leaves.
    """
    if n_bottom < 1:
        raise DimensionError("n_bottom must be >= 1")
    levels: list[tuple[LeafSet, ...]] = []
    for level_no, level_spec in enumerate(levels_spec, start=1):
        if not list(level_spec):
            raise EmptyNodeError(f"level {level_no} has no nodes")
        nodes = tuple(_as_leaf_tuple(node, n_bottom) for node in level_spec)
        seen = 0
        for node in nodes:
            m = _mask(node)
            if seen & m:
                raise OverlapError(
                    f"level {level_no}: sibling nodes share leaves {node}"
                )
            seen |= m
        levels.append(nodes)
    h = Hierarchy(n_bottom=n_bottom, levels=tuple(levels))
    _validate_nesting(h)
    if labels is not None:
        h = Hierarchy(n_bottom=n_bottom, levels=h.levels,
                      labels=_check_labels(labels, h.n_total, h.n_bottom))
    return h


def _check_labels(labels, n_total, n_bottom=None):
    if labels is None:
        return None
    labels = tuple(str(x) for x in labels)
    if n_bottom is not None and len(labels) not in (n_total, n_bottom):
        raise DimensionError(
            f"labels must have length {n_total} (all nodes) or {n_bottom} (bottoms)"
        )
    return labels


def _validate_nesting(h: Hierarchy) -> None:
    masks_by_level = [[_mask(node) for node in level] for level in h.levels]
    for low in range(len(h.levels)):
        for node, nm in zip(h.levels[low], masks_by_level[low]):
            for high in range(low + 1, len(h.levels)):
                for other, om in zip(h.levels[high], masks_by_level[high]):
                    inter = nm & om
                    if inter and inter != nm:
                        raise NestingError(
                            f"node {node} crosses higher-level node {other}"
                        )


def bottom_labels(structure: Structure) -> list[str]:
    """Display names for the bottom series (defaults to b0..b{m-1})."""
    labels = structure.labels
    m = structure.n_bottom
    if labels is not None:
        if len(labels) == m:
            return list(labels)
        if len(labels) == structure.n_total:
            return list(labels[-m:])
    return [f"b{j}" for j in range(m)]


def coherence_check(y, structure: Structure, tol: float = 0.0) -> bool:
    """True iff the upper block of ``y`` equals A times its bottom block.

    ``y`` follows the ``[u; b]`` convention; the check is
    ``max |u - A b| <= tol``.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    y = np.asarray(y, dtype=float).reshape(-1)
    n = structure.n_total
    if y.shape[0] != n:
        raise DimensionError(f"expected vector of length {n}, got {y.shape[0]}")
    n_upper = structure.n_upper
    u, b = y[:n_upper], y[n_upper:]
    if n_upper == 0:
        return True
    resid = u - structure.aggregating_matrix() @ b
    return bool(np.max(np.abs(resid)) <= tol)


def temporal_structure(base_periods_per_year: int,
                       aggregation_factors) -> GroupedStructure:
    """Constraints for aggregating a base-frequency year into coarser blocks.

    Each factor ``k`` contributes ``base/k`` constraints over the contiguous
    aligned blocks {0..k-1}, {k..2k-1}, ...  Constraint order is coarsest
    factor first.  Factors must be distinct, greater than 1 and divide the
    base period count; otherwise :class:`NonDivisorError` is raised.
    """
    base = int(base_periods_per_year)
    if base < 1:
        raise NonDivisorError("base period count must be >= 1")
    factors = [int(k) for k in aggregation_factors]
    if len(set(factors)) != len(factors):
        raise NonDivisorError(f"duplicate aggregation factors: {factors}")
    for k in factors:
        if k <= 1 or base % k != 0:
            raise NonDivisorError(
                f"factor {k} must be > 1 and divide {base}"
            )
    constraints: list[LeafSet] = []
    for k in sorted(factors, reverse=True):
        for block in range(base // k):
            constraints.append(tuple(range(block * k, (block + 1) * k)))
    return extract_max_subhierarchy(constraints, base)


def _group_compatible(group_a: list[int], group_b: list[int]) -> bool:
    # masks; every cross pair must be nested or disjoint
    for x in group_a:
        for y in group_b:
            inter = x & y
            if inter and inter != x and inter != y:
                return False
    return True


def _heights(members: list[LeafSet]) -> list[int]:
    masks = [_mask(c) for c in members]
    order = sorted(range(len(members)), key=lambda i: len(members[i]))
    heights = [1] * len(members)
    for pos, i in enumerate(order):
        for j in order[:pos]:
            ij = masks[i] & masks[j]
            if ij == masks[j] and masks[i] != masks[j]:
                heights[i] = max(heights[i], heights[j] + 1)
    return heights


def _level_decomposition(members: list[LeafSet]) -> list[list[LeafSet]]:
    heights = _heights(members)
    n_levels = max(heights, default=0)
    levels: list[list[LeafSet]] = [[] for _ in range(n_levels)]
    for c, h in zip(members, heights):
        levels[h - 1].append(c)
    for level in levels:
        level.sort(key=lambda c: c[0])
    return levels


def extract_max_subhierarchy(constraints, n_bottom: int,
                             labels=None) -> GroupedStructure:
    """Split constraints into a maximal tree part plus residual constraints.

    Constraints are grouped by leaf-set size; a tree candidate is any
    selection of whole groups that is pairwise nesting-compatible (for
    temporal structures these are exactly the divisor chains).  Among
    candidates with the most constraints, ties go to the one whose
    per-level node counts are lexicographically largest from the bottom
    level up.  The leftover constraints become ``extra_constraints``.
    """
    n_bottom = int(n_bottom)
    leaf_sets = tuple(_as_leaf_tuple(c, n_bottom) for c in constraints)
    if len(set(leaf_sets)) != len(leaf_sets):
        raise OverlapError("duplicate constraints in structure")

    by_size: dict[int, list[int]] = {}
    for idx, c in enumerate(leaf_sets):
        by_size.setdefault(len(c), []).append(idx)

    # a group is usable only if its members are pairwise disjoint
    usable: list[tuple[int, list[int], list[int]]] = []  # (size, idxs, masks)
    for size in sorted(by_size):
        idxs = by_size[size]
        masks = [_mask(leaf_sets[i]) for i in idxs]
        union = 0
        disjoint = True
        for m in masks:
            if union & m:
                disjoint = False
                break
            union |= m
        if disjoint:
            usable.append((size, idxs, masks))

    compat = {}
    for (sa, ia, ma), (sb, ib, mb) in itertools.combinations(usable, 2):
        compat[(sa, sb)] = _group_compatible(ma, mb)

    def feasible(selection) -> bool:
        for (a, _, _), (b, _, _) in itertools.combinations(selection, 2):
            if not compat[(min(a, b), max(a, b))]:
                return False
        return True

    best: list[tuple[int, list[int], list[int]]] = []
    best_key: tuple | None = None
    if len(usable) <= 16:
        candidates = itertools.chain.from_iterable(
            itertools.combinations(usable, r) for r in range(len(usable) + 1)
        )
    else:
        # greedy fallback for very wide inputs: largest groups first
        ordered = sorted(usable, key=lambda g: (-len(g[1]), g[0]))
        chosen: list = []
        for g in ordered:
            if all(_group_compatible(g[2], h[2]) for h in chosen):
                chosen.append(g)
        candidates = [tuple(chosen)]
    for sel in candidates:
        if len(sel) > 1 and not feasible(sel):
            continue
        count = sum(len(g[1]) for g in sel)
        members = [leaf_sets[i] for g in sel for i in g[1]]
        level_counts = tuple(len(lv) for lv in _level_decomposition(members))
        tie = tuple(sorted(i for g in sel for i in g[1]))
        key = (count, level_counts, tuple(-i for i in tie))
        if best_key is None or key > best_key:
            best_key = key
            best = list(sel)

    chosen_idx = sorted(i for g in best for i in g[1])
    chosen_set = set(chosen_idx)
    # greedy augmentation keeps the result maximal when a size group was
    # unusable as a whole (e.g. two same-size constraints overlap)
    chosen_masks = [_mask(leaf_sets[i]) for i in chosen_idx]
    leftovers = sorted((i for i in range(len(leaf_sets)) if i not in chosen_set),
                       key=lambda i: (len(leaf_sets[i]), i))
    for i in leftovers:
        mi = _mask(leaf_sets[i])
        ok = True
        for mj in chosen_masks:
            inter = mi & mj
            if inter and inter != mi and inter != mj:
                ok = False
                break
        if ok:
            chosen_set.add(i)
            chosen_masks.append(mi)
    chosen_idx = sorted(chosen_set)
    members = [leaf_sets[i] for i in chosen_idx]
    levels = _level_decomposition(members)
    sub = Hierarchy(n_bottom=n_bottom,
                    levels=tuple(tuple(lv) for lv in levels))
    _validate_nesting(sub)

    by_leafset = {leaf_sets[i]: i for i in range(len(leaf_sets))}
    sub_index = tuple(by_leafset[c] for c in sub.constraints)
    extra_index = tuple(i for i in range(len(leaf_sets)) if i not in chosen_set)
    extra = tuple(leaf_sets[i] for i in extra_index)

    return GroupedStructure(
        n_bottom=n_bottom,
        constraints=leaf_sets,
        subhierarchy=sub,
        extra_constraints=extra,
        sub_index=sub_index,
        extra_index=extra_index,
        labels=_check_labels(labels, n_bottom + len(leaf_sets), n_bottom),
    )


def tree_of(structure: Structure):
    """Return (hierarchy, upper index map) if the structure is a tree.

    The index map gives, for each hierarchy constraint row, the position of
    that constraint in the structure's own row order.  Raises
    :class:`~probreconc.errors.NotATreeError` for grouped structures with
    residual constraints.
    """
    from .errors import NotATreeError

    if isinstance(structure, Hierarchy):
        return structure, tuple(range(structure.n_upper))
    if isinstance(structure, GroupedStructure):
        if not structure.is_tree:
            raise NotATreeError(
                f"structure has {len(structure.extra_constraints)} residual "
                "constraints and is not a tree"
            )
        return structure.subhierarchy, structure.sub_index
    raise TypeError(f"not a structure: {type(structure).__name__}")


def structure_digest(structure: Structure) -> str:
    """Short content hash of (n_bottom, constraints) for provenance records."""
    payload = {
        "n_bottom": structure.n_bottom,
        "constraints": [list(c) for c in structure.constraints],
    }
    raw = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(raw).hexdigest()[:12]


def load_structure(source) -> GroupedStructure:
    """Load a structure from a JSON file, path or already-parsed dict.

    Expected shape ``{"n_bottom": int, "constraints": [[leaf indices]...],
    "labels": [...]}``.  The tree/grouped decomposition happens here; a pure
    tree simply comes back with no residual constraints.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    else:
        data = source
    try:
        n_bottom = int(data["n_bottom"])
        constraints = data["constraints"]
    except (KeyError, TypeError) as exc:
        raise DimensionError(f"malformed structure JSON: {exc}") from exc
    labels = data.get("labels")
    return extract_max_subhierarchy(constraints, n_bottom, labels=labels)


def dump_structure(structure: Structure, path) -> None:
    data = {
        "n_bottom": structure.n_bottom,
        "constraints": [list(c) for c in structure.constraints],
    }
    if structure.labels is not None:
        data["labels"] = list(structure.labels)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")
