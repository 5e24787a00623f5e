"""Command-line entry points: train, eval, sweep, gradcheck, gen-synthetic.

Configuration comes from flags, optionally layered on a JSON config file
(flags override the file). Every command writes a frozen copy of its
resolved configuration next to its outputs, so a run can be replayed with
``--config <outdir>/config.json``. Exit codes: 0 success, 1 usage error,
2 data or invariant error, 3 numerical failure.

The default output root is the DFSP_OUTPUT_ROOT environment variable,
falling back to ./dfsp_runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import grad_check
from .composition import build_space
from .data import SyntheticSpec, generate_synthetic, load_manifest, write_manifest
from .errors import InvariantError, NumericalError
from .evaluation import evaluate_checkpoint, write_report
from .losses import LossWeights, loss_dfm, loss_spm, loss_st_obj, total_loss
from .model import DfspModel
from .training import Checkpoint, TrainConfig, train, write_log

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

OUTPUT_ROOT_ENV = "DFSP_OUTPUT_ROOT"

SWEEP_PARAMS = ("alpha", "beta", "K", "T")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "dfsp_runs"))


def _parse_synthetic(text):
    """Parse "n=5,m=5,noise=0.05" style synthetic descriptions."""
    key_map = {
        "n": ("num_states", int),
        "m": ("num_objects", int),
        "dim": ("feature_dim", int),
        "samples_per_pair": ("samples_per_pair", int),
        "noise": ("noise", float),
        "unseen_fraction": ("unseen_fraction", float),
        "seed": ("seed", int),
    }
    kwargs = {}
    if text:
        for chunk in text.split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            if "=" not in chunk:
                raise UsageError(f"bad synthetic field {chunk!r}; expected key=value")
            key, value = chunk.split("=", 1)
            if key not in key_map:
                raise UsageError(
                    f"unknown synthetic key {key!r}; expected one of {sorted(key_map)}"
                )
            field, cast = key_map[key]
            try:
                kwargs[field] = cast(value)
            except ValueError as exc:
                raise UsageError(f"bad value for synthetic key {key!r}: {exc}") from exc
    return SyntheticSpec(**kwargs)


def _add_data_flags(parser):
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--data", help="manifest directory of precomputed features")
    group.add_argument(
        "--synthetic",
        nargs="?",
        const="",
        help='synthetic dataset description, e.g. "n=5,m=5,noise=0.05"',
    )


def _add_train_flags(parser):
    parser.add_argument("--config", help="JSON config file; flags override its values")
    for name, flag, cast in (
        ("epochs", "--epochs", int),
        ("batch_size", "--batch-size", int),
        ("learning_rate", "--learning-rate", float),
        ("seed", "--seed", int),
        ("alpha", "--alpha", float),
        ("beta", "--beta", float),
        ("num_blocks", "--num-blocks", int),
        ("temperature", "--temperature", float),
        ("prompt_dim", "--prompt-dim", int),
        ("feature_dim", "--feature-dim", int),
        ("prefix_length", "--prefix-length", int),
        ("num_image_tokens", "--image-tokens", int),
    ):
        parser.add_argument(flag, dest=name, type=cast, default=None)
    parser.add_argument("--variant", choices=("t2i", "i2t", "BiF"), default=None)
    parser.add_argument("--spm-only", dest="spm_only", action="store_true", default=None)


def _load_config_file(path):
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvariantError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvariantError(f"config file {path} must hold a JSON object")
    return raw


def _resolve_train_config(args, file_config):
    values = dict(file_config.get("train", {}))
    for name in TrainConfig.__dataclass_fields__:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            values[name] = flag_value
    return TrainConfig.from_dict(values)


def _resolve_data(args, file_config):
    """Return (kind, detail, space, store) honoring flags over the file."""
    data_section = file_config.get("data", {})
    manifest = args.data if getattr(args, "data", None) else data_section.get("manifest")
    synthetic = (
        _parse_synthetic(args.synthetic)
        if getattr(args, "synthetic", None) is not None
        else (
            SyntheticSpec(**data_section["synthetic"])
            if "synthetic" in data_section
            else None
        )
    )
    if manifest and synthetic:
        raise UsageError("exactly one data source: --data or --synthetic, not both")
    if manifest:
        space, store = load_manifest(manifest)
        return "manifest", str(manifest), space, store
    if synthetic is None:
        raise UsageError("a data source is required (--data or --synthetic)")
    space, store = generate_synthetic(synthetic)
    return "synthetic", synthetic.__dict__ | {}, space, store


def _prepare_out(args, command):
    out = Path(args.out) if args.out else _output_root() / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved_config(out, command, config=None, data=None, eval_section=None):
    payload = {"command": command}
    if data is not None:
        kind, detail = data
        payload["data"] = {kind: detail} if kind == "manifest" else {"synthetic": detail}
    if config is not None:
        payload["train"] = config.to_dict()
    if eval_section is not None:
        payload["eval"] = eval_section
    (out / "config.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return payload


def cmd_train(args):
    file_config = _load_config_file(args.config)
    config = _resolve_train_config(args, file_config)
    kind, detail, space, store = _resolve_data(args, file_config)
    out = _prepare_out(args, "train")
    checkpoint, log = train(space, store, config)
    checkpoint.save(out / "checkpoint.json")
    write_log(log, out / "train_log.jsonl")
    _write_resolved_config(out, "train", config=config, data=(kind, detail))
    final = log[-1]
    print(
        f"trained {config.epochs} epochs ({config.variant}); "
        f"best epoch {checkpoint.epoch} val_total={checkpoint.val_loss:.6f}; "
        f"final train total={final['total']:.6f}"
    )
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_eval(args):
    file_config = _load_config_file(args.config)
    checkpoint = Checkpoint.load(args.checkpoint)
    kind, detail, space, store = _resolve_data(args, file_config)
    out = _prepare_out(args, "eval")
    state_emb = object_emb = None
    if args.embeddings:
        try:
            with np.load(args.embeddings) as archive:
                state_emb = archive["states"]
                object_emb = archive["objects"]
        except (OSError, KeyError, ValueError) as exc:
            raise InvariantError(
                f"embeddings file must be an .npz with 'states' and 'objects': {exc}"
            ) from exc
    report, feasibility = evaluate_checkpoint(
        checkpoint,
        store,
        space,
        world=args.world,
        threshold=args.threshold,
        split=args.split,
        state_embeddings=state_emb,
        object_embeddings=object_emb,
    )
    write_report(report, out / "report.json", out / "curve.csv")
    if feasibility is not None:
        (out / "feasibility.csv").write_text(feasibility.csv(space))
    _write_resolved_config(
        out,
        "eval",
        data=(kind, detail),
        eval_section={
            "checkpoint": str(args.checkpoint),
            "world": args.world,
            "threshold": args.threshold,
            "split": args.split,
        },
    )
    print(
        f"{args.world} world: S={report.best_seen:.4f} U={report.best_unseen:.4f} "
        f"H={report.best_harmonic:.4f} AUC={report.auc:.4f}"
    )
    print(f"outputs in {out}")
    return EXIT_OK


def _parse_values(text, param):
    cast = int if param == "K" else float
    try:
        values = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad sweep values {text!r}: {exc}") from exc
    if not values:
        raise UsageError("sweep needs at least one value")
    return values


def cmd_sweep(args):
    file_config = _load_config_file(args.config)
    base_config = _resolve_train_config(args, file_config)
    values = _parse_values(args.values, args.param)
    kind, detail, space, store = _resolve_data(args, file_config)
    out = _prepare_out(args, "sweep")
    rows = ["param,value,status,best_seen,best_unseen,best_harmonic,auc"]
    for value in values:
        threshold = args.threshold
        config = base_config
        if args.param == "alpha":
            config = replace(base_config, alpha=value)
        elif args.param == "beta":
            config = replace(base_config, beta=value)
        elif args.param == "K":
            config = replace(base_config, num_blocks=value)
        else:
            threshold = value
        try:
            checkpoint, _ = train(space, store, config)
            report, _ = evaluate_checkpoint(
                checkpoint, store, space, world=args.world, threshold=threshold
            )
            rows.append(
                f"{args.param},{value!r},ok,{report.best_seen!r},"
                f"{report.best_unseen!r},{report.best_harmonic!r},{report.auc!r}"
            )
            print(
                f"{args.param}={value}: S={report.best_seen:.4f} "
                f"U={report.best_unseen:.4f} H={report.best_harmonic:.4f} "
                f"AUC={report.auc:.4f}"
            )
        except (InvariantError, NumericalError) as exc:
            rows.append(f"{args.param},{value!r},error: {exc},,,,")
            print(f"{args.param}={value}: failed ({exc})", file=sys.stderr)
    (out / "sweep.csv").write_text("".join(r + "\n" for r in rows))
    _write_resolved_config(
        out,
        "sweep",
        config=base_config,
        data=(kind, detail),
        eval_section={
            "param": args.param,
            "values": values,
            "world": args.world,
            "threshold": args.threshold,
        },
    )
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_gradcheck(args):
    """Check the full training objective against central differences."""
    rng = np.random.default_rng(args.seed)
    n, m = args.states, args.objects
    states = [f"state{i}" for i in range(n)]
    objects = [f"object{j}" for j in range(m)]
    pairs = [(s, o) for s in range(n) for o in range(m)]
    space = build_space(states, objects, pairs, [], "closed")
    config = TrainConfig(
        seed=args.seed,
        alpha=args.alpha,
        beta=args.beta,
        num_blocks=args.num_blocks,
        variant=args.variant,
        temperature=args.temperature,
        prompt_dim=args.prompt_dim,
        feature_dim=args.feature_dim,
        prefix_length=args.prefix_length,
        num_image_tokens=args.image_tokens,
    )
    model = DfspModel.build(space, args.input_dim, config)
    trainable = model.trainable()
    # Randomize everything (identity/zero-initialized maps included) so the
    # check exercises every gradient path at a generic point.
    for tensor in trainable.values():
        tensor.data = rng.normal(0.0, 1.0 / np.sqrt(tensor.cols), size=tensor.shape)
    features = rng.normal(size=(args.batch, args.input_dim))
    labels = rng.integers(0, len(pairs), size=args.batch)
    state_labels = np.array([pairs[c][0] for c in labels])
    object_labels = np.array([pairs[c][1] for c in labels])
    weights = LossWeights(config.alpha, config.beta)

    def objective(_params):
        fw = model.forward(features)
        total, _ = total_loss(
            loss_dfm(fw.pair_logits, labels),
            loss_st_obj(
                fw.image_features,
                fw.state_features,
                fw.object_features,
                state_labels,
                object_labels,
                config.temperature,
            ),
            loss_spm(fw.image_features, fw.text_features, labels, config.temperature),
            weights,
        )
        return total

    names = sorted(trainable)
    report = grad_check(
        objective, [trainable[name] for name in names], step=args.step,
        tolerance=args.tolerance,
    )
    for name in sorted(report.per_param, key=report.per_param.get, reverse=True):
        status = "ok" if report.per_param[name] < report.tolerance else "FAIL"
        print(f"{status:4s} {name:32s} rel_error={report.per_param[name]:.3e}")
    print(
        f"max relative error {report.max_rel_error:.3e} "
        f"(tolerance {report.tolerance:.1e}): {'PASS' if report.passed else 'FAIL'}"
    )
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_gen_synthetic(args):
    spec = _parse_synthetic(args.synthetic if args.synthetic is not None else "")
    space, store = generate_synthetic(spec)
    out = Path(args.out) if args.out else _output_root() / "synthetic"
    write_manifest(space, store, out)
    print(
        f"wrote manifest with {space.num_states} states x {space.num_objects} objects, "
        f"{len(space.seen_pairs)} seen / {len(space.unseen_pairs)} unseen pairs, "
        f"{len(store)} samples to {out}"
    )
    return EXIT_OK


def build_parser():
    parser = Parser(prog="dfsp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and save the best checkpoint")
    _add_data_flags(p_train)
    _add_train_flags(p_train)
    p_train.add_argument("--out", help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    _add_data_flags(p_eval)
    p_eval.add_argument("--config", help="JSON config file (data section only)")
    p_eval.add_argument("--world", choices=("closed", "open"), default="closed")
    p_eval.add_argument("--threshold", type=float, default=0.4,
                        help="open-world feasibility threshold")
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_eval.add_argument("--embeddings",
                        help=".npz with 'states'/'objects' arrays for the filter")
    p_eval.add_argument("--out", help="output directory")
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="train/eval across one parameter's values")
    p_sweep.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    _add_data_flags(p_sweep)
    _add_train_flags(p_sweep)
    p_sweep.add_argument("--world", choices=("closed", "open"), default="closed")
    p_sweep.add_argument("--threshold", type=float, default=0.4)
    p_sweep.add_argument("--out", help="output directory")
    p_sweep.set_defaults(func=cmd_sweep)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of the objective")
    p_grad.add_argument("--states", type=int, default=3)
    p_grad.add_argument("--objects", type=int, default=3)
    p_grad.add_argument("--prompt-dim", dest="prompt_dim", type=int, default=8)
    p_grad.add_argument("--feature-dim", dest="feature_dim", type=int, default=8)
    p_grad.add_argument("--input-dim", dest="input_dim", type=int, default=8)
    p_grad.add_argument("--prefix-length", dest="prefix_length", type=int, default=3)
    p_grad.add_argument("--image-tokens", dest="image_tokens", type=int, default=2)
    p_grad.add_argument("--num-blocks", dest="num_blocks", type=int, default=1)
    p_grad.add_argument("--variant", choices=("t2i", "i2t", "BiF"), default="t2i")
    p_grad.add_argument("--alpha", type=float, default=0.01)
    p_grad.add_argument("--beta", type=float, default=0.1)
    # Gradients are checked at unit temperature: the production 0.01 scales
    # logits by 100x, which wrecks the *finite-difference* oracle's accuracy
    # without changing any code path being verified.
    p_grad.add_argument("--temperature", type=float, default=1.0)
    p_grad.add_argument("--batch", type=int, default=2)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--step", type=float, default=1e-5)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_gen = sub.add_parser("gen-synthetic", help="write a synthetic manifest directory")
    p_gen.add_argument(
        "--synthetic", nargs="?", const="", default="",
        help='dataset description, e.g. "n=5,m=5,noise=0.05"'
    )
    p_gen.add_argument("--out", help="output directory")
    p_gen.set_defaults(func=cmd_gen_synthetic)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def console_entry():
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
