"""Dataset plumbing: manifest directories and a synthetic generator.

Manifest layout (all formats are bit-exact and framework-free):

    states.txt            one state name per line
    objects.txt           one object name per line
    pairs_train.txt       one "state object" pair per line (seen pairs)
    pairs_val_seen.txt    validation candidates drawn from the train pairs
    pairs_val_unseen.txt  validation-only pairs
    pairs_test_seen.txt   test candidates drawn from the train pairs
    pairs_test_unseen.txt test-only pairs
    features.bin          flat little-endian float64 sample features
    index.csv             sample_id,offset,state,object,split (split in
                          train/val/test; offset is the byte offset of the
                          sample's first float in features.bin)

Names must not contain whitespace. The feature dimension is implied by
file size / sample count. Synthetic data places one latent unit vector per
primitive and emits normalized (state latent + object latent + noise)
samples, holding out unseen pairs while keeping every primitive covered.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .composition import build_space
from .errors import InvariantError, NumericalError

SPLITS = ("train", "val", "test")
PAIR_LIST_KEYS = ("train", "val_seen", "val_unseen", "test_seen", "test_unseen")


@dataclass(frozen=True)
class SyntheticSpec:
    num_states: int = 5
    num_objects: int = 5
    feature_dim: int = 16
    samples_per_pair: int = 20
    noise: float = 0.05
    unseen_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_states < 2 or self.num_objects < 2:
            raise InvariantError("synthetic spaces need at least 2 states and 2 objects")
        if self.feature_dim < 1:
            raise InvariantError("feature_dim must be >= 1")
        if self.samples_per_pair < 1:
            raise InvariantError("samples_per_pair must be >= 1")
        if not (0.0 < self.unseen_fraction < 1.0):
            raise InvariantError("unseen_fraction must lie strictly between 0 and 1")
        if self.noise < 0:
            raise InvariantError("noise must be >= 0")


@dataclass(eq=False)
class SampleStore:
    """Feature vectors with labels and split tags, plus the manifest pair lists."""

    features: np.ndarray
    state_idx: np.ndarray
    object_idx: np.ndarray
    split: np.ndarray
    pair_lists: dict
    latents: dict | None = field(default=None, repr=False)

    def __len__(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def split_indices(self, name):
        if name not in SPLITS:
            raise InvariantError(f"unknown split {name!r}, expected one of {SPLITS}")
        return np.flatnonzero(self.split == name)

    def pairs_of(self, indices):
        return [
            (int(self.state_idx[i]), int(self.object_idx[i])) for i in np.asarray(indices)
        ]


def _unit_rows(rows, rng):
    vectors = rng.normal(size=rows)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / norms


def _holdout_unseen(num_states, num_objects, fraction, rng):
    """Pick unseen pairs uniformly at random, never uncovering a primitive."""
    target = int(round(fraction * num_states * num_objects))
    state_count = np.full(num_states, num_objects)
    object_count = np.full(num_objects, num_states)
    all_pairs = [(s, o) for s in range(num_states) for o in range(num_objects)]
    order = rng.permutation(len(all_pairs))
    unseen = set()
    for k in order:
        if len(unseen) == target:
            break
        s, o = all_pairs[k]
        if state_count[s] > 1 and object_count[o] > 1:
            unseen.add((s, o))
            state_count[s] -= 1
            object_count[o] -= 1
    if len(unseen) < target:
        raise InvariantError(
            f"unseen_fraction {fraction} incompatible with keeping every primitive "
            f"covered (reached {len(unseen)} of {target} pairs)"
        )
    seen = tuple(p for p in all_pairs if p not in unseen)
    return seen, tuple(p for p in all_pairs if p in unseen)


def _split_counts(total, seen):
    if seen:
        n_train = max(1, round(0.6 * total))
        n_val = min(round(0.2 * total), total - n_train)
        n_test = total - n_train - n_val
        return n_train, n_val, n_test
    n_val = total // 2
    return 0, n_val, total - n_val


def generate_synthetic(spec):
    """Deterministic compositional toy data: (CompositionSpace, SampleStore)."""
    rng = np.random.default_rng(spec.seed)
    state_latents = _unit_rows((spec.num_states, spec.feature_dim), rng)
    object_latents = _unit_rows((spec.num_objects, spec.feature_dim), rng)
    seen, unseen = _holdout_unseen(
        spec.num_states, spec.num_objects, spec.unseen_fraction, rng
    )
    states = tuple(f"state{i}" for i in range(spec.num_states))
    objects = tuple(f"object{j}" for j in range(spec.num_objects))
    space = build_space(states, objects, seen, unseen, world="closed")

    seen_set = set(seen)
    features = []
    state_idx = []
    object_idx = []
    split = []
    for s in range(spec.num_states):
        for o in range(spec.num_objects):
            block = state_latents[s] + object_latents[o]
            noise = spec.noise * rng.normal(size=(spec.samples_per_pair, spec.feature_dim))
            block = block[None, :] + noise
            norms = np.linalg.norm(block, axis=1, keepdims=True)
            if np.any(norms <= 1e-12):
                raise NumericalError(f"degenerate synthetic sample for pair ({s}, {o})")
            block = block / norms
            n_train, n_val, n_test = _split_counts(spec.samples_per_pair, (s, o) in seen_set)
            tags = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
            features.append(block)
            state_idx.extend([s] * spec.samples_per_pair)
            object_idx.extend([o] * spec.samples_per_pair)
            split.extend(tags)

    store = SampleStore(
        features=np.concatenate(features, axis=0),
        state_idx=np.array(state_idx, dtype=np.int64),
        object_idx=np.array(object_idx, dtype=np.int64),
        split=np.array(split),
        pair_lists={
            "train": seen,
            "val_seen": seen,
            "val_unseen": unseen,
            "test_seen": seen,
            "test_unseen": unseen,
        },
        latents={"states": state_latents, "objects": object_latents},
    )
    return space, store


def _check_name(name, path):
    if not name or name != name.strip() or any(c.isspace() for c in name):
        raise InvariantError(f"{path}: names must be nonempty and whitespace-free: {name!r}")
    return name


def _read_names(path):
    names = []
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        name = line.strip()
        if not name:
            continue
        _check_name(name, f"{path}:{lineno}")
        if name in seen:
            raise InvariantError(f"{path}:{lineno}: duplicate name {name!r}")
        seen.add(name)
        names.append(name)
    if not names:
        raise InvariantError(f"{path}: no names found")
    return names


def _read_pairs(path, state_index, object_index):
    pairs = []
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 2:
            raise InvariantError(f"{path}:{lineno}: expected 'state object', got {text!r}")
        s_name, o_name = parts
        if s_name not in state_index:
            raise InvariantError(f"{path}:{lineno}: unknown state {s_name!r}")
        if o_name not in object_index:
            raise InvariantError(f"{path}:{lineno}: unknown object {o_name!r}")
        pair = (state_index[s_name], object_index[o_name])
        if pair in seen:
            raise InvariantError(f"{path}:{lineno}: duplicate pair {text!r}")
        seen.add(pair)
        pairs.append(pair)
    return tuple(pairs)


def write_manifest(space, store, out_dir):
    """Write the manifest directory; the inverse of load_manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in list(space.states) + list(space.objects):
        _check_name(name, str(out))
    (out / "states.txt").write_text("".join(f"{s}\n" for s in space.states))
    (out / "objects.txt").write_text("".join(f"{o}\n" for o in space.objects))
    for key in PAIR_LIST_KEYS:
        if key not in store.pair_lists:
            raise InvariantError(f"store is missing pair list {key!r}")
        lines = "".join(
            f"{space.states[s]} {space.objects[o]}\n" for s, o in store.pair_lists[key]
        )
        (out / f"pairs_{key}.txt").write_text(lines)
    features = np.ascontiguousarray(store.features, dtype="<f8")
    (out / "features.bin").write_bytes(features.tobytes())
    dim = store.feature_dim
    rows = ["sample_id,offset,state,object,split"]
    for i in range(len(store)):
        rows.append(
            f"{i},{i * dim * 8},{space.states[store.state_idx[i]]},"
            f"{space.objects[store.object_idx[i]]},{store.split[i]}"
        )
    (out / "index.csv").write_text("".join(f"{r}\n" for r in rows))
    return out


def load_manifest(path, world="closed"):
    """Parse and validate a manifest directory: (CompositionSpace, SampleStore).

    Any invariant violation is rejected with a file/line diagnostic: train
    samples must carry train pairs, val/test samples must carry pairs from
    their split lists, and the seen candidate lists must be subsets of the
    train pairs.
    """
    root = Path(path)
    if not root.is_dir():
        raise InvariantError(f"manifest directory not found: {root}")
    states = _read_names(root / "states.txt")
    objects = _read_names(root / "objects.txt")
    state_index = {name: i for i, name in enumerate(states)}
    object_index = {name: j for j, name in enumerate(objects)}

    pair_lists = {}
    for key in PAIR_LIST_KEYS:
        pair_lists[key] = _read_pairs(root / f"pairs_{key}.txt", state_index, object_index)
    train_set = set(pair_lists["train"])
    for key in ("val_seen", "test_seen"):
        extra = set(pair_lists[key]) - train_set
        if extra:
            raise InvariantError(
                f"{root / f'pairs_{key}.txt'}: pairs not present in the train list: "
                f"{sorted(extra)[:5]}"
            )
    for key in ("val_unseen", "test_unseen"):
        overlap = set(pair_lists[key]) & train_set
        if overlap:
            raise InvariantError(
                f"{root / f'pairs_{key}.txt'}: unseen pairs overlap the train list: "
                f"{sorted(overlap)[:5]}"
            )

    index_path = root / "index.csv"
    lines = index_path.read_text().splitlines()
    if not lines or lines[0].strip() != "sample_id,offset,state,object,split":
        raise InvariantError(f"{index_path}:1: bad or missing header")
    blob = (root / "features.bin").read_bytes()
    num_samples = len(lines) - 1
    if num_samples == 0:
        raise InvariantError(f"{index_path}: no samples")
    if len(blob) % (8 * num_samples) != 0:
        raise InvariantError(
            f"{root / 'features.bin'}: size {len(blob)} is not divisible by "
            f"8 * {num_samples} samples"
        )
    dim = len(blob) // (8 * num_samples)
    features = np.frombuffer(blob, dtype="<f8").reshape(num_samples, dim).astype(np.float64)
    if not np.all(np.isfinite(features)):
        raise NumericalError(f"{root / 'features.bin'}: non-finite feature values")

    allowed = {
        "train": train_set,
        "val": set(pair_lists["val_seen"]) | set(pair_lists["val_unseen"]),
        "test": set(pair_lists["test_seen"]) | set(pair_lists["test_unseen"]),
    }
    state_idx = np.empty(num_samples, dtype=np.int64)
    object_idx = np.empty(num_samples, dtype=np.int64)
    split = np.empty(num_samples, dtype=object)
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.strip().split(",")
        if len(parts) != 5:
            raise InvariantError(f"{index_path}:{lineno}: expected 5 columns, got {len(parts)}")
        sid_text, offset_text, s_name, o_name, tag = parts
        i = lineno - 2
        try:
            sid = int(sid_text)
            offset = int(offset_text)
        except ValueError as exc:
            raise InvariantError(f"{index_path}:{lineno}: bad integer field: {exc}") from exc
        if sid != i:
            raise InvariantError(f"{index_path}:{lineno}: sample_id {sid} out of order")
        if offset != i * dim * 8:
            raise InvariantError(
                f"{index_path}:{lineno}: offset {offset} does not match row-major layout"
            )
        if s_name not in state_index:
            raise InvariantError(f"{index_path}:{lineno}: unknown state {s_name!r}")
        if o_name not in object_index:
            raise InvariantError(f"{index_path}:{lineno}: unknown object {o_name!r}")
        if tag not in SPLITS:
            raise InvariantError(f"{index_path}:{lineno}: unknown split {tag!r}")
        pair = (state_index[s_name], object_index[o_name])
        if pair not in allowed[tag]:
            raise InvariantError(
                f"{index_path}:{lineno}: {tag} sample carries pair "
                f"('{s_name}', '{o_name}') outside its split's pair lists"
            )
        state_idx[i] = pair[0]
        object_idx[i] = pair[1]
        split[i] = tag

    space = build_space(states, objects, pair_lists["train"], pair_lists["test_unseen"], world)
    store = SampleStore(
        features=features,
        state_idx=state_idx,
        object_idx=object_idx,
        split=np.array([str(t) for t in split]),
        pair_lists=pair_lists,
    )
    return space, store
