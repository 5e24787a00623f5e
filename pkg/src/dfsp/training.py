"""Mini-batch Adam optimization with validation-loss checkpoint selection.

Training runs the full three-term objective on the seen-pair class set.
After every epoch the same objective is evaluated on the validation split,
whose candidate classes are the seen pairs plus the validation-unseen
pairs, and the checkpoint with the lowest validation loss wins.

Checkpoints are versioned JSON: floats survive the round trip exactly and
two runs with identical config and seed write byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .composition import build_space
from .errors import InvariantError, NumericalError
from .fusion import VARIANTS
from .losses import LossWeights, loss_dfm, loss_spm, loss_st_obj, total_loss
from .model import DfspModel, model_from_arrays

CHECKPOINT_FORMAT = "dfsp-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    alpha: float = 0.01
    beta: float = 0.1
    num_blocks: int = 1
    variant: str = "t2i"
    temperature: float = 0.01
    prompt_dim: int = 16
    feature_dim: int = 16
    prefix_length: int = 3
    num_image_tokens: int = 4
    spm_only: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise InvariantError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvariantError("batch_size must be >= 1")
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise InvariantError("learning_rate must be finite and >= 0")
        if self.variant not in VARIANTS:
            raise InvariantError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.temperature <= 0:
            raise InvariantError("temperature must be positive")
        for name in ("prompt_dim", "feature_dim", "num_blocks", "num_image_tokens"):
            if getattr(self, name) < 1:
                raise InvariantError(f"{name} must be >= 1")
        if self.prefix_length < 0:
            raise InvariantError("prefix_length must be >= 0")
        LossWeights(self.alpha, self.beta)  # validates weight range

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise InvariantError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict
    epoch: int
    val_loss: float
    input_dim: int
    space_digest: dict

    def save(self, path):
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "input_dim": self.input_dim,
            "space_digest": self.space_digest,
            "params": {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in self.params.items()
            },
        }
        text = json.dumps(payload, sort_keys=True, indent=1)
        Path(path).write_text(text + "\n")

    @classmethod
    def load(cls, path):
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvariantError(f"cannot read checkpoint {path}: {exc}") from exc
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise InvariantError(f"{path} is not a checkpoint file")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise InvariantError(f"unsupported checkpoint version {payload.get('version')}")
        params = {
            name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload["params"].items()
        }
        return cls(
            config=TrainConfig.from_dict(payload["config"]),
            params=params,
            epoch=payload["epoch"],
            val_loss=payload["val_loss"],
            input_dim=payload["input_dim"],
            space_digest=payload["space_digest"],
        )


def space_digest(space, store=None):
    """SHA-256 fingerprints of the split structure (and sample split sizes)."""
    def digest(obj):
        return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()

    out = {
        "names": digest([list(space.states), list(space.objects)]),
        "seen": digest([list(p) for p in space.seen_pairs]),
        "unseen": digest([list(p) for p in space.unseen_pairs]),
    }
    if store is not None:
        sizes = {name: int(store.split_indices(name).size) for name in ("train", "val", "test")}
        out["sample_splits"] = digest(sizes)
    return out


def adam_step(params, grads, moments, config, t):
    """One bias-corrected Adam update, in place.

    params and grads map names to arrays; moments maps names to (m, v)
    pairs that are updated alongside the parameters.
    """
    if t < 1:
        raise InvariantError("Adam step count starts at 1")
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr, eps = config.learning_rate, config.adam_epsilon
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise InvariantError(f"gradient shape mismatch for {name!r}")
        m, v = moments[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _pair_labels(pairs_to_col, store, indices, what):
    labels = np.empty(indices.size, dtype=np.int64)
    for row, i in enumerate(indices):
        pair = (int(store.state_idx[i]), int(store.object_idx[i]))
        if pair not in pairs_to_col:
            raise InvariantError(f"{what} sample {int(i)} carries pair {pair} "
                                 "outside the candidate pair set")
        labels[row] = pairs_to_col[pair]
    return labels


def _batch_losses(model, features, pair_labels, state_labels, object_labels,
                  candidate_pairs, weights, config):
    """Forward one batch and return (total tensor, breakdown)."""
    fw = model.forward(features, candidate_pairs, with_fusion=not config.spm_only)
    if config.spm_only:
        spm = loss_spm(fw.image_features, fw.text_features, pair_labels, config.temperature)
        from .losses import LossBreakdown

        return spm, LossBreakdown(0.0, 0.0, spm.item(), spm.item())
    l_pair = loss_dfm(fw.pair_logits, pair_labels)
    l_prim = loss_st_obj(
        fw.image_features,
        fw.state_features,
        fw.object_features,
        state_labels,
        object_labels,
        config.temperature,
    )
    l_prompt = loss_spm(fw.image_features, fw.text_features, pair_labels, config.temperature)
    return total_loss(l_pair, l_prim, l_prompt, weights)


def _mean_loss_over(model, store, indices, candidate_pairs, pairs_to_col, weights, config):
    """Sample-weighted mean total loss over the given store rows."""
    if indices.size == 0:
        raise InvariantError("cannot evaluate loss on an empty split")
    total = 0.0
    for lo in range(0, indices.size, config.batch_size):
        rows = indices[lo : lo + config.batch_size]
        pair_labels = _pair_labels(pairs_to_col, store, rows, "validation")
        state_labels = store.state_idx[rows]
        object_labels = store.object_idx[rows]
        loss, _ = _batch_losses(
            model,
            store.features[rows],
            pair_labels,
            state_labels,
            object_labels,
            candidate_pairs,
            weights,
            config,
        )
        total += loss.item() * rows.size
    return total / indices.size


def train(space, store, config):
    """Optimize all trainable parameters; return (best checkpoint, epoch log).

    The best checkpoint minimizes the validation total loss (earliest
    epoch wins ties). The log holds one record per epoch with the
    sample-weighted mean training loss terms and the validation total.
    """
    train_idx = store.split_indices("train")
    if train_idx.size == 0:
        raise InvariantError("training split is empty")
    val_idx = store.split_indices("val")
    if val_idx.size == 0:
        raise InvariantError("validation split is empty; checkpoint selection needs one")

    seen_to_col = {pair: j for j, pair in enumerate(space.seen_pairs)}
    train_labels = _pair_labels(seen_to_col, store, train_idx, "training")

    val_unseen = store.pair_lists.get("val_unseen", space.unseen_pairs)
    val_space = build_space(space.states, space.objects, space.seen_pairs, val_unseen, "closed")
    val_pairs = val_space.test_pairs
    val_to_col = {pair: j for j, pair in enumerate(val_pairs)}

    model = DfspModel.build(space, store.feature_dim, config)
    trainable = model.trainable()
    frozen_before = {
        name: arr.copy()
        for name, arr in model.all_parameters().items()
        if name.startswith("encoder.")
    }
    moments = {
        name: (np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in trainable.items()
    }
    weights = LossWeights(config.alpha, config.beta)
    shuffle_rng = np.random.default_rng(config.seed)

    log = []
    best = None
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(train_idx.size)
        sums = {"l_dfm": 0.0, "l_st_obj": 0.0, "l_spm": 0.0, "total": 0.0}
        for lo in range(0, order.size, config.batch_size):
            batch = order[lo : lo + config.batch_size]
            rows = train_idx[batch]
            try:
                loss, breakdown = _batch_losses(
                    model,
                    store.features[rows],
                    train_labels[batch],
                    store.state_idx[rows],
                    store.object_idx[rows],
                    None,
                    weights,
                    config,
                )
                for p in trainable.values():
                    p.zero_grad()
                loss.backward()
            except NumericalError as exc:
                raise NumericalError(
                    f"training diverged at epoch {epoch}, batch {lo // config.batch_size}: {exc}"
                ) from exc
            grads = {
                name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in trainable.items()
            }
            step += 1
            adam_step({n: p.data for n, p in trainable.items()}, grads, moments, config, step)
            for key, value in (
                ("l_dfm", breakdown.l_dfm),
                ("l_st_obj", breakdown.l_st_obj),
                ("l_spm", breakdown.l_spm),
                ("total", breakdown.total),
            ):
                sums[key] += value * rows.size

        val_total = _mean_loss_over(
            model, store, val_idx, val_pairs, val_to_col, weights, config
        )
        record = {
            "epoch": epoch,
            "l_dfm": sums["l_dfm"] / train_idx.size,
            "l_st_obj": sums["l_st_obj"] / train_idx.size,
            "l_spm": sums["l_spm"] / train_idx.size,
            "total": sums["total"] / train_idx.size,
            "val_total": val_total,
        }
        log.append(record)
        if best is None or val_total < best.val_loss:
            best = Checkpoint(
                config=config,
                params={name: arr.copy() for name, arr in model.all_parameters().items()},
                epoch=epoch,
                val_loss=val_total,
                input_dim=store.feature_dim,
                space_digest=space_digest(space, store),
            )

    frozen_after = {
        name: arr
        for name, arr in model.all_parameters().items()
        if name.startswith("encoder.")
    }
    for name, before in frozen_before.items():
        if not np.array_equal(before, frozen_after[name]):
            raise NumericalError(f"frozen parameter {name!r} changed during training")
    return best, log


def model_from_checkpoint(checkpoint, space):
    """Rebuild the model a checkpoint describes, bound to the given space."""
    return model_from_arrays(space, checkpoint.params, checkpoint.config)


def write_log(log, path):
    lines = [json.dumps(record, sort_keys=True) for record in log]
    Path(path).write_text("".join(line + "\n" for line in lines))
