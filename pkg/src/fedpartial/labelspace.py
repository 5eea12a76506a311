"""Full and partial label schemes.

A site annotates a subset of the organs; every unannotated organ is folded
into that site's background. The resulting merged classes form a partition
of the full label set.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_ORGANS = ("liver", "spleen", "pancreas", "left_kidney", "right_kidney")


@dataclass(frozen=True)
class LabelSpace:
    num_classes: int
    class_names: tuple[str, ...]

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")
        if len(set(self.class_names)) != self.num_classes:
            raise ValueError("class names must be unique")
        if self.class_names[0] != "background":
            raise ValueError("class 0 must be 'background'")

    @classmethod
    def default(cls, num_classes: int = 6) -> "LabelSpace":
        organs = list(DEFAULT_ORGANS[: num_classes - 1])
        organs += [f"organ{i}" for i in range(len(organs) + 1, num_classes)]
        return cls(num_classes, ("background", *organs))


@dataclass(frozen=True)
class PartialScheme:
    space: LabelSpace
    merged_classes: tuple[frozenset, ...]
    labeled_foreground: frozenset

    def __post_init__(self):
        n = self.space.num_classes
        seen: set[int] = set()
        for phi in self.merged_classes:
            if not phi:
                raise ValueError("empty merged class")
            if seen & phi:
                raise ValueError("merged classes overlap")
            seen |= phi
        if seen != set(range(n)):
            raise ValueError("merged classes do not cover the label space")
        if sum(len(phi) for phi in self.merged_classes) != n:
            raise ValueError("merged classes are not a partition")
        if sum(0 in phi for phi in self.merged_classes) != 1:
            raise ValueError("background must sit in exactly one merged class")
        singletons = {next(iter(phi)) for phi in self.merged_classes if len(phi) == 1}
        if not set(self.labeled_foreground) <= singletons:
            raise ValueError("every labeled class must be a singleton merged class")
        # cached lookup tables
        full_to_merged = np.empty(n, dtype=np.int64)
        for m, phi in enumerate(self.merged_classes):
            for c in phi:
                full_to_merged[c] = m
        object.__setattr__(self, "_full_to_merged", full_to_merged)
        member = np.zeros((n, len(self.merged_classes)))
        member[np.arange(n), full_to_merged] = 1.0
        object.__setattr__(self, "_membership", member)

    @property
    def num_merged(self) -> int:
        return len(self.merged_classes)

    @property
    def num_classes(self) -> int:
        return self.space.num_classes

    @property
    def is_full(self) -> bool:
        return self.num_merged == self.num_classes

    @property
    def background_index(self) -> int:
        return int(self._full_to_merged[0])

    @property
    def full_to_merged(self) -> np.ndarray:
        """Lookup table: full class index -> merged class index."""
        return self._full_to_merged

    @property
    def membership(self) -> np.ndarray:
        """N x M 0/1 matrix; entry (n, m) is 1 iff class n belongs to merged class m."""
        return self._membership

    def merged_to_full(self) -> np.ndarray:
        """Representative full class for each merged class.

        Singletons map to their class; the merged background maps to 0.
        """
        out = np.empty(self.num_merged, dtype=np.int64)
        for m, phi in enumerate(self.merged_classes):
            out[m] = 0 if 0 in phi else next(iter(phi))
        return out

    def to_merged(self, full_mask: np.ndarray) -> np.ndarray:
        return self._full_to_merged[np.asarray(full_mask)]

    def exclusion_sets(self) -> "ExclusionSets":
        return default_exclusion_sets(self)

    def to_json(self) -> dict:
        return {"num_classes": self.num_classes, "labeled": sorted(int(c) for c in self.labeled_foreground)}

    @classmethod
    def from_json(cls, obj: dict | str, space: LabelSpace | None = None) -> "PartialScheme":
        if isinstance(obj, str):
            obj = json.loads(obj)
        n = int(obj["num_classes"])
        space = space or LabelSpace.default(n)
        if space.num_classes != n:
            raise ValueError("scheme num_classes does not match label space")
        return make_scheme(space, set(obj["labeled"]))


def make_scheme(space: LabelSpace, labeled) -> PartialScheme:
    labeled = {int(c) for c in labeled}
    bad = sorted(c for c in labeled if not 1 <= c < space.num_classes)
    if bad:
        raise ValueError(f"labeled classes must lie in 1..{space.num_classes - 1}, got {bad}")
    background = frozenset(c for c in range(space.num_classes) if c not in labeled)
    merged = (background,) + tuple(frozenset({c}) for c in sorted(labeled))
    return PartialScheme(space, merged, frozenset(labeled))


def full_scheme(space: LabelSpace) -> PartialScheme:
    return make_scheme(space, range(1, space.num_classes))


def merge_onehot(scheme: PartialScheme, pixel_label: int) -> np.ndarray:
    if not 0 <= pixel_label < scheme.num_merged:
        raise ValueError(f"merged label {pixel_label} out of range 0..{scheme.num_merged - 1}")
    y = np.zeros(scheme.num_merged)
    y[pixel_label] = 1.0
    return y


@dataclass(frozen=True)
class ExclusionSets:
    """Per-class exclusive subsets; ``sets[n]`` holds the classes that rule out class n."""

    sets: tuple[frozenset, ...]
    table: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.sets)
        for c, s in enumerate(self.sets):
            if c in s:
                raise ValueError(f"class {c} may not exclude itself")
            if any(not 0 <= k < n for k in s):
                raise ValueError("exclusion set index out of range")
        if self.sets and self.sets[0]:
            raise ValueError("background must have an empty exclusion set")
        # table[label, n] = 1 iff label in E_n
        table = np.zeros((n, n))
        for c, s in enumerate(self.sets):
            for k in s:
                table[k, c] = 1.0
        object.__setattr__(self, "table", table)

    @property
    def num_classes(self) -> int:
        return len(self.sets)


def default_exclusion_sets(scheme: PartialScheme) -> ExclusionSets:
    # Only annotated organs give trustworthy negative evidence.
    labeled = frozenset(scheme.labeled_foreground)
    sets = [frozenset()] + [labeled - {c} for c in range(1, scheme.num_classes)]
    return ExclusionSets(tuple(sets))


def exclusion_vector(excl: ExclusionSets, pixel_label: int, num_classes: int | None = None) -> np.ndarray:
    n = excl.num_classes if num_classes is None else num_classes
    if n != excl.num_classes:
        raise ValueError("num_classes does not match exclusion sets")
    if not 0 <= pixel_label < n:
        raise ValueError(f"label {pixel_label} out of range 0..{n - 1}")
    return excl.table[pixel_label].copy()


def exclusion_field(excl: ExclusionSets, full_labels: np.ndarray) -> np.ndarray:
    """Vectorised exclusion_vector over a label grid: (..., ) -> (..., N)."""
    return excl.table[np.asarray(full_labels)]
