"""State/object composition bookkeeping: primitive sets, splits, and indices.

A :class:`CompositionSpace` holds the ordered state and object name lists
plus the seen/unseen/test pair splits, all as integer index pairs. It is
immutable after construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InvariantError

Pair = "tuple[int, int]"

WORLDS = ("closed", "open")


@dataclass(frozen=True)
class CompositionSpace:
    states: tuple
    objects: tuple
    seen_pairs: tuple
    unseen_pairs: tuple
    test_pairs: tuple
    world: str

    @property
    def num_states(self):
        return len(self.states)

    @property
    def num_objects(self):
        return len(self.objects)

    @cached_property
    def seen_lookup(self):
        return frozenset(self.seen_pairs)

    def pair_names(self, pair):
        s, o = pair
        return self.states[s], self.objects[o]


@dataclass(frozen=True, eq=False)
class PairIndex:
    """Per-seen-pair state and object index arrays (parallel to seen_pairs)."""

    state_idx: np.ndarray
    object_idx: np.ndarray

    def __len__(self):
        return self.state_idx.size


def _validated_pairs(pairs, num_states, num_objects, label):
    out = []
    seen = set()
    for k, pair in enumerate(pairs):
        if len(pair) != 2:
            raise InvariantError(f"{label} pair #{k} is not a (state, object) pair: {pair!r}")
        s, o = int(pair[0]), int(pair[1])
        if not (0 <= s < num_states and 0 <= o < num_objects):
            raise InvariantError(
                f"{label} pair #{k} ({s}, {o}) out of range for "
                f"{num_states} states x {num_objects} objects"
            )
        if (s, o) in seen:
            raise InvariantError(f"duplicate {label} pair ({s}, {o})")
        seen.add((s, o))
        out.append((s, o))
    return tuple(out)


def build_space(states, objects, seen_pairs, unseen_pairs, world="closed"):
    """Validate the splits and assemble a CompositionSpace.

    Open-world test pairs enumerate the full state x object product in
    state-major order; closed world is the seen list followed by the
    unseen list. Every state and every object must occur in at least one
    seen pair, because primitive decomposition averages over the seen
    pairs of each primitive and is undefined otherwise.
    """
    states = tuple(str(s) for s in states)
    objects = tuple(str(o) for o in objects)
    if not states or not objects:
        raise InvariantError("state and object name lists must be nonempty")
    if world not in WORLDS:
        raise InvariantError(f"world must be one of {WORLDS}, got {world!r}")
    n, m = len(states), len(objects)
    seen = _validated_pairs(seen_pairs, n, m, "seen")
    unseen = _validated_pairs(unseen_pairs, n, m, "unseen")
    if not seen:
        raise InvariantError("at least one seen pair is required")
    overlap = set(seen) & set(unseen)
    if overlap:
        raise InvariantError(f"seen and unseen pair sets overlap: {sorted(overlap)[:5]}")
    missing_states = sorted(set(range(n)) - {s for s, _ in seen})
    if missing_states:
        names = [states[i] for i in missing_states[:5]]
        raise InvariantError(f"states absent from every seen pair: {names}")
    missing_objects = sorted(set(range(m)) - {o for _, o in seen})
    if missing_objects:
        names = [objects[i] for i in missing_objects[:5]]
        raise InvariantError(f"objects absent from every seen pair: {names}")
    if world == "open":
        test = tuple((s, o) for s in range(n) for o in range(m))
    else:
        test = seen + unseen
    return CompositionSpace(states, objects, seen, unseen, test, world)


def pair_index(space):
    """Project seen_pairs into parallel state/object index arrays."""
    state_idx = np.array([s for s, _ in space.seen_pairs], dtype=np.int64)
    object_idx = np.array([o for _, o in space.seen_pairs], dtype=np.int64)
    return PairIndex(state_idx, object_idx)
