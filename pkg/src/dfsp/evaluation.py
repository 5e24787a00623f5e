"""Generalized seen/unseen evaluation.

Predictions are argmax pair scores over the active candidate set. The
bias sweep adds a scalar to every unseen-pair column and traces seen and
unseen accuracy as the scalar runs from "seen always wins" to "unseen
always wins"; accuracies only change where some sample's best seen and
best unseen scores cross, so sweeping the exact breakpoints (plus
midpoints) reproduces the full curve. Open-world candidate sets can be
pruned by a feasibility score built from primitive-embedding cosines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvariantError, NumericalError
from .training import model_from_checkpoint

DEFAULT_FEASIBILITY_THRESHOLD = 0.4


@dataclass
class MetricsReport:
    world: str
    best_seen: float
    best_unseen: float
    best_harmonic: float
    best_harmonic_bias: float
    auc: float
    curve: list  # (bias, seen_acc, unseen_acc) tuples, sorted by bias

    def to_dict(self):
        return {
            "world": self.world,
            "best_seen": self.best_seen,
            "best_unseen": self.best_unseen,
            "best_harmonic": self.best_harmonic,
            "best_harmonic_bias": self.best_harmonic_bias,
            "auc": self.auc,
            "num_curve_points": len(self.curve),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def curve_csv(self):
        lines = ["bias,seen_acc,unseen_acc"]
        lines += [f"{b!r},{s!r},{u!r}" for b, s, u in self.curve]
        return "".join(line + "\n" for line in lines)


@dataclass
class FeasibilityScores:
    pairs: tuple  # full state x object product, state-major
    q: np.ndarray
    threshold: float
    retained: tuple

    def csv(self, space):
        lines = ["state,object,q,retained"]
        kept = set(self.retained)
        for pair, q in zip(self.pairs, self.q):
            s, o = space.pair_names(pair)
            lines.append(f"{s},{o},{q!r},{int(pair in kept)}")
        return "".join(line + "\n" for line in lines)


def candidate_pairs_for(space, world):
    if world == "closed":
        return space.seen_pairs + space.unseen_pairs
    if world == "open":
        return tuple(
            (s, o) for s in range(space.num_states) for o in range(space.num_objects)
        )
    raise InvariantError(f"world must be 'closed' or 'open', got {world!r}")


def predict(checkpoint, features, space, world="closed", candidate_pairs=None,
            batch_size=128):
    """Pair scores (batch x |candidates|) and argmax labels.

    Candidates default to the world's pair set; ties in the argmax break
    toward the lowest column index.
    """
    features = np.asarray(features, dtype=np.float64)
    model = model_from_checkpoint(checkpoint, space)
    if features.ndim != 2 or features.shape[1] != checkpoint.input_dim:
        raise InvariantError(
            f"features must be (batch, {checkpoint.input_dim}), got {features.shape}"
        )
    pairs = tuple(candidate_pairs) if candidate_pairs is not None else candidate_pairs_for(
        space, world
    )
    chunks = [
        model.scores(features[lo : lo + batch_size], pairs)
        for lo in range(0, features.shape[0], batch_size)
    ]
    scores = np.concatenate(chunks, axis=0)
    return scores, scores.argmax(axis=1)


def _harmonic(a, b):
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


def bias_sweep(scores, true_pairs, space, candidate_pairs=None):
    """Sweep the seen/unseen calibration bias and report S, U, H, AUC.

    Samples are tagged seen or unseen by their true pair's membership in
    the space's seen set. Adding bias b to all unseen columns flips each
    sample between its best seen column and its best unseen column, so
    accuracies are evaluated exactly at every crossing gap (plus midpoints
    and outer endpoints). AUC integrates unseen accuracy over seen
    accuracy by trapezoid.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise InvariantError("scores must be a 2-D matrix")
    if not np.all(np.isfinite(scores)):
        raise NumericalError("non-finite scores in bias sweep")
    pairs = tuple(candidate_pairs) if candidate_pairs is not None else space.test_pairs
    true_pairs = [tuple(p) for p in true_pairs]
    if scores.shape[0] != len(true_pairs):
        raise InvariantError(
            f"{scores.shape[0]} score rows vs {len(true_pairs)} true pairs"
        )
    if scores.shape[1] != len(pairs):
        raise InvariantError(f"{scores.shape[1]} score columns vs {len(pairs)} candidates")

    seen_lookup = space.seen_lookup
    col_unseen = np.array([p not in seen_lookup for p in pairs])
    if not col_unseen.any() or col_unseen.all():
        raise InvariantError("candidate set needs both seen and unseen pair columns")
    sample_seen = np.array([p in seen_lookup for p in true_pairs])
    if not sample_seen.any() or sample_seen.all():
        raise InvariantError("test set needs both seen and unseen samples")

    col_of = {pair: j for j, pair in enumerate(pairs)}
    true_col = np.array([col_of.get(p, -1) for p in true_pairs])

    seen_scores = np.where(~col_unseen, scores, -np.inf)
    unseen_scores = np.where(col_unseen, scores, -np.inf)
    best_seen_val = seen_scores.max(axis=1)
    best_seen_col = seen_scores.argmax(axis=1)
    best_unseen_val = unseen_scores.max(axis=1)
    best_unseen_col = unseen_scores.argmax(axis=1)

    gaps = np.concatenate(
        [
            (best_seen_val[:, None] - scores[:, col_unseen]).ravel(),
            (scores[:, ~col_unseen] - best_unseen_val[:, None]).ravel(),
        ]
    )
    score_range = float(scores.max() - scores.min())
    ends = np.array([-(score_range + 1.0), score_range + 1.0])
    breakpoints = np.unique(np.concatenate([gaps, ends]))
    midpoints = (breakpoints[:-1] + breakpoints[1:]) / 2.0
    biases = np.unique(np.concatenate([breakpoints, midpoints]))

    correct_seen_choice = best_seen_col == true_col
    correct_unseen_choice = best_unseen_col == true_col
    num_seen = int(sample_seen.sum())
    num_unseen = int((~sample_seen).sum())

    curve = []
    for b in biases:
        shifted = best_unseen_val + b
        choose_seen = (best_seen_val > shifted) | (
            (best_seen_val == shifted) & (best_seen_col < best_unseen_col)
        )
        correct = np.where(choose_seen, correct_seen_choice, correct_unseen_choice)
        seen_acc = float(correct[sample_seen].sum()) / num_seen
        unseen_acc = float(correct[~sample_seen].sum()) / num_unseen
        curve.append((float(b), seen_acc, unseen_acc))

    seen_accs = np.array([p[1] for p in curve])
    unseen_accs = np.array([p[2] for p in curve])
    harmonics = np.array([_harmonic(s, u) for _, s, u in curve])
    best_h = int(harmonics.argmax())

    order = np.lexsort((unseen_accs, seen_accs))
    s_sorted = seen_accs[order]
    u_sorted = unseen_accs[order]
    auc = float(np.sum((s_sorted[1:] - s_sorted[:-1]) * (u_sorted[1:] + u_sorted[:-1]) / 2.0))

    return MetricsReport(
        world=space.world,
        best_seen=float(seen_accs.max()),
        best_unseen=float(unseen_accs.max()),
        best_harmonic=float(harmonics[best_h]),
        best_harmonic_bias=curve[best_h][0],
        auc=auc,
        curve=curve,
    )


def feasibility_filter(space, state_embeddings, object_embeddings,
                       threshold=DEFAULT_FEASIBILITY_THRESHOLD):
    """Prune implausible open-world pairs by primitive-embedding similarity.

    For a candidate (s, o): the object score is the best cosine between o
    and the other objects seen with s; the state score is symmetric over
    states seen with o; the feasibility score is their mean. Candidates
    score -1 on a side with no co-occurring partner, so they are filtered
    under any threshold above -1. Seen pairs are always retained.

    Returns (retained pairs in state-major product order, FeasibilityScores).
    """
    n, m = space.num_states, space.num_objects
    states = np.asarray(state_embeddings, dtype=np.float64)
    objects = np.asarray(object_embeddings, dtype=np.float64)
    if states.shape[0] != n or objects.shape[0] != m:
        raise InvariantError(
            f"need one embedding per primitive: got {states.shape[0]} state rows "
            f"for {n} states and {objects.shape[0]} object rows for {m} objects"
        )

    def unit(rows, what):
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if np.any(norms <= 1e-12):
            raise NumericalError(f"zero-norm {what} embedding")
        return rows / norms

    state_cos = unit(states, "state") @ unit(states, "state").T
    object_cos = unit(objects, "object") @ unit(objects, "object").T

    objects_seen_with = [[] for _ in range(n)]
    states_seen_with = [[] for _ in range(m)]
    for s, o in space.seen_pairs:
        objects_seen_with[s].append(o)
        states_seen_with[o].append(s)

    pairs = tuple((s, o) for s in range(n) for o in range(m))
    q = np.empty(len(pairs))
    retained = []
    seen_lookup = space.seen_lookup
    for idx, (s, o) in enumerate(pairs):
        partner_objects = [oo for oo in objects_seen_with[s] if oo != o]
        q_obj = max((object_cos[o, oo] for oo in partner_objects), default=-1.0)
        partner_states = [ss for ss in states_seen_with[o] if ss != s]
        q_state = max((state_cos[s, ss] for ss in partner_states), default=-1.0)
        q[idx] = 0.5 * (q_state + q_obj)
        if (s, o) in seen_lookup or q[idx] > threshold:
            retained.append((s, o))

    return tuple(retained), FeasibilityScores(pairs, q, float(threshold), tuple(retained))


def evaluate_checkpoint(checkpoint, store, space, world="closed",
                        threshold=DEFAULT_FEASIBILITY_THRESHOLD, split="test",
                        state_embeddings=None, object_embeddings=None):
    """One-stop evaluation: scores, sweep, and (open world) feasibility.

    Returns (MetricsReport, FeasibilityScores or None). Primitive
    embeddings for the filter default to the checkpoint's learned prompt
    rows.
    """
    indices = store.split_indices(split)
    if indices.size == 0:
        raise InvariantError(f"split {split!r} has no samples")
    feasibility = None
    if world == "open":
        if state_embeddings is None:
            state_embeddings = checkpoint.params["prompt.state_emb"]
        if object_embeddings is None:
            object_embeddings = checkpoint.params["prompt.object_emb"]
        candidates, feasibility = feasibility_filter(
            space, state_embeddings, object_embeddings, threshold
        )
    else:
        candidates = candidate_pairs_for(space, world)
    scores, _ = predict(
        checkpoint, store.features[indices], space, world, candidate_pairs=candidates
    )
    report = bias_sweep(scores, store.pairs_of(indices), space, candidates)
    report.world = world
    return report, feasibility


def write_report(report, json_path, curve_path=None):
    Path(json_path).write_text(report.to_json())
    if curve_path is not None:
        Path(curve_path).write_text(report.curve_csv())
