"""Command-line entry point: ``fimgcn <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .evaluation import aggregate_report, aggregate_seeds, export_attention, metrics_report
from .features import FEATURE_SETS, assemble, write_features
from .graph import GraphError, chain_graph, label_partitions, load_skeleton
from .ingest import DEFAULT_WINDOW, SEGMENT_LENGTH, IngestError, load_clean
from .model import (TINY_CONFIG, CheckpointError, ModelConfig, init_params, load_checkpoint, loss_fn,
                    one_hot, save_checkpoint)
from .synth import SynthConfig, generate
from .train import (NumericalError, TrainConfig, TrainingDiverged, load_dataset, predict_proba,
                    stratified_split, train_loop)

log = logging.getLogger("fimgcn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_SPLIT_SEED = 0

ABLATION_ROWS = (
    ("coords", dict(feature_groups=FEATURE_SETS["coords"], use_bilstm=False, use_attention=False)),
    ("+vel/ang", dict(feature_groups=FEATURE_SETS["coords+vel+ang"], use_bilstm=False, use_attention=False)),
    ("+BiLSTM", dict(feature_groups=FEATURE_SETS["coords+vel+ang"], use_bilstm=True, use_attention=False)),
    ("+attention", dict(feature_groups=FEATURE_SETS["coords+vel+ang"], use_bilstm=True, use_attention=True)),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- argument definitions ----------------------------------------------------

def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_model_flags(p):
    d = ModelConfig()
    g = p.add_argument_group("model")
    g.add_argument("--channels", type=_int_list, default=tuple(b[1] for b in d.block_specs),
                   help="output channels per ST-GCN block, e.g. 64,64,128")
    g.add_argument("--strides", type=_int_list, default=tuple(b[2] for b in d.block_specs))
    g.add_argument("--temporal-kernel", type=int, default=d.temporal_kernel)
    g.add_argument("--lstm-hidden", type=int, default=d.lstm_hidden)
    g.add_argument("--attention-hidden", type=int, default=d.attention_hidden)


def _add_data_flags(p, need_item=True):
    p.add_argument("--manifest", type=Path)
    p.add_argument("--fim-item", default=None)
    p.add_argument("--action", default=None)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW, help="filter window (odd)")
    p.add_argument("--threads", type=int, default=1, help="featurization threads")
    p.add_argument("--skeleton", type=Path, default=None, help="skeleton definition JSON (default: bundled)")


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--max-lr", type=float, default=d.max_lr)
    p.add_argument("--reshuffle-split", action="store_true",
                   help="derive the train/test split from --seed instead of a fixed split seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fimgcn", description="FIM independence classification from skeleton sequences")
    parser.add_argument("--json-errors", action="store_true", help="report errors as JSON on stderr")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--config", type=Path)
    p.add_argument("--out-dir", type=Path)
    s = SynthConfig()
    p.add_argument("--n-sequences", type=int, default=s.n_sequences)
    p.add_argument("--class-balance", type=float, default=s.class_balance)
    p.add_argument("--amplitude-gap", type=float, default=s.amplitude_gap)
    p.add_argument("--signal-joints", default=",".join(s.signal_joints))
    p.add_argument("--noise-std", type=float, default=s.noise_std)
    p.add_argument("--missing-rate", type=float, default=s.missing_rate)
    p.add_argument("--outlier-rate", type=float, default=s.outlier_rate)
    p.add_argument("--n-frames", type=int, default=s.n_frames)
    p.add_argument("--seed", type=int, default=s.seed)
    p.add_argument("--action", default=s.action)
    p.add_argument("--fim-item", default=s.fim_item)

    p = sub.add_parser("preprocess", help="clean sequences and dump feature tensors")
    p.add_argument("--config", type=Path)
    _add_data_flags(p)
    p.add_argument("--out-dir", type=Path)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", type=Path)
    _add_data_flags(p)
    _add_train_flags(p)
    _add_model_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-bilstm", action="store_true")
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--features", choices=sorted(FEATURE_SETS), default="coords+vel+ang")
    p.add_argument("--out", type=Path, help="checkpoint path")
    p.add_argument("--history", type=Path, help="history JSON (default: <out>.history.json)")

    p = sub.add_parser("eval", help="evaluate checkpoints on their held-out split")
    p.add_argument("--config", type=Path)
    p.add_argument("checkpoints", nargs="*", type=Path)
    p.add_argument("--manifest", type=Path, help="override the manifest stored in the checkpoint")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference check of the tiny model")
    p.add_argument("--config", type=Path)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--per-group", type=int, default=20)
    p.add_argument("--joints", type=int, default=5)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("attention", help="export the attention map of one sequence")
    p.add_argument("--config", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--sequence", type=Path, help="raw JSONL recording")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("ablation", help="compare the four feature/component configurations")
    p.add_argument("--config", type=Path)
    _add_data_flags(p)
    _add_train_flags(p)
    _add_model_flags(p)
    p.add_argument("--seeds", type=_int_list, default=(0,))
    p.add_argument("--out", type=Path)
    return parser


# -- config merging ----------------------------------------------------------

def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags; values from ``--config`` fill in anything not given on the command line."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("fimgcn: a subcommand is required")
    if getattr(args, "config", None) is None:
        return args
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    sub = _subparser(parser, args.command)
    dests = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in doc.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in dests:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        action = dests[dest]
        if action.type is not None and value is not None and not isinstance(value, bool):
            value = [action.type(v) for v in value] if action.nargs == "*" else action.type(value)
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} is not one of {sorted(action.choices)}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, [], ()):
            raise UsageError(f"{args.command}: --{name.replace('_', '-')} is required")


# -- helpers -----------------------------------------------------------------

def model_config_from_args(args, **overrides) -> ModelConfig:
    channels, strides = tuple(args.channels), tuple(args.strides)
    if len(channels) != len(strides):
        raise UsageError("--channels and --strides must have the same length")
    ins = (9,) + channels[:-1]
    kw = dict(
        block_specs=tuple(zip(ins, channels, strides)),
        temporal_kernel=args.temporal_kernel,
        lstm_hidden=args.lstm_hidden,
        attention_hidden=args.attention_hidden,
    )
    kw.update(overrides)
    try:
        return ModelConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def train_config_from_args(args, seed: int) -> TrainConfig:
    try:
        return TrainConfig(batch_size=args.batch_size, max_lr=args.max_lr, epochs=args.epochs, seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_json(path: Path | None, obj):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def _split(labels, split_seed):
    try:
        return stratified_split(labels, seed=split_seed)
    except ValueError as exc:
        raise IngestError(str(exc)) from None


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    _require(args, "out_dir")
    try:
        config = SynthConfig(
            n_sequences=args.n_sequences, class_balance=args.class_balance,
            amplitude_gap=args.amplitude_gap,
            signal_joints=tuple(s.strip() for s in str(args.signal_joints).split(",") if s.strip()),
            noise_std=args.noise_std, missing_rate=args.missing_rate, outlier_rate=args.outlier_rate,
            n_frames=args.n_frames, seed=args.seed, action=args.action, fim_item=args.fim_item,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = generate(config, args.out_dir)
    print(json.dumps({"sequences": len(rows), "manifest": str(args.out_dir / "manifest.csv")}))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    _require(args, "manifest", "out_dir")
    graph = load_skeleton(args.skeleton)
    data = load_dataset(args.manifest, graph, args.fim_item, args.action, args.threads, args.window)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for x, row, label in zip(data.X, data.rows, data.labels):
        name = Path(row.sequence_path).stem + ".fgf"
        write_features(args.out_dir / name, x)
        index.append({"features": name, "subject_id": row.subject_id, "action": row.action,
                      "fim_item": row.fim_item, "fim_score": row.fim_score, "label": int(label)})
    _write_json(args.out_dir / "index.json", index)
    print(json.dumps({"sequences": len(index), "index": str(args.out_dir / "index.json")}))
    return EXIT_OK


def _train_one(data, partition, model_config, train_config, train_idx, test_idx):
    return train_loop(
        data.X[train_idx], data.labels[train_idx], model_config, train_config, partition,
        data.X[test_idx], data.labels[test_idx],
    )


def cmd_train(args) -> int:
    _require(args, "manifest", "out")
    overrides = dict(feature_groups=FEATURE_SETS[args.features],
                     use_bilstm=not args.no_bilstm, use_attention=not args.no_attention)
    model_config = model_config_from_args(args, **overrides)
    train_config = train_config_from_args(args, args.seed)
    graph = load_skeleton(args.skeleton)
    partition = label_partitions(graph)
    data = load_dataset(args.manifest, graph, args.fim_item, args.action, args.threads, args.window)
    split_seed = args.seed if args.reshuffle_split else DEFAULT_SPLIT_SEED
    history_path = args.history or args.out.with_name(args.out.name + ".history.json")

    train_idx, test_idx = _split(data.labels, split_seed)
    model_config = model_config.standardized(data.X[train_idx])
    start = time.perf_counter()
    try:
        params, history = _train_one(data, partition, model_config, train_config, train_idx, test_idx)
    except TrainingDiverged as exc:
        save_checkpoint(args.out.with_name(args.out.name + ".last_good"), exc.last_good, model_config, graph)
        _write_json(history_path, exc.history)
        raise
    elapsed = time.perf_counter() - start

    metadata = {
        "manifest": str(Path(args.manifest).resolve()),
        "fim_item": args.fim_item,
        "action": args.action,
        "seed": args.seed,
        "split_seed": split_seed,
        "window": args.window,
        "train": train_config.to_dict(),
        "test_indices": [int(i) for i in test_idx],
    }
    save_checkpoint(args.out, params, model_config, graph, metadata)
    _write_json(history_path, history)
    final = history[-1]["test_balanced_accuracy"] if history else None
    print(json.dumps({"checkpoint": str(args.out), "history": str(history_path),
                      "test_balanced_accuracy": final, "seconds": round(elapsed, 2)}))
    return EXIT_OK


def evaluate_checkpoint(path: Path, manifest: Path | None = None, threads: int = 1) -> dict:
    params, config, graph, meta = load_checkpoint(path)
    manifest = manifest or meta.get("manifest")
    if not manifest:
        raise IngestError(f"{path}: no manifest recorded; pass --manifest")
    data = load_dataset(manifest, graph, meta.get("fim_item"), meta.get("action"), threads,
                        meta.get("window", DEFAULT_WINDOW))
    test_idx = meta.get("test_indices")
    if test_idx is None:
        _, test_idx = _split(data.labels, meta.get("split_seed", DEFAULT_SPLIT_SEED))
    test_idx = np.asarray(test_idx, dtype=int)
    if test_idx.size == 0 or test_idx.max() >= len(data.labels):
        raise IngestError(f"{path}: stored split does not fit the manifest")
    partition = label_partitions(graph)
    pred = predict_proba(data.X[test_idx], params, config, partition).argmax(axis=1)
    return metrics_report(data.labels[test_idx], pred, config.num_classes,
                          fim_item=meta.get("fim_item"), action=meta.get("action"), seed=meta.get("seed"))


def cmd_eval(args) -> int:
    _require(args, "checkpoints")
    reports = [evaluate_checkpoint(p, args.manifest, args.threads) for p in args.checkpoints]
    _write_json(args.out, reports[0] if len(reports) == 1 else aggregate_report(reports))
    return EXIT_OK


def run_gradcheck(joints=5, frames=12, batch=2, seed=0, epsilon=1e-4, tolerance=1e-3, per_group=20):
    graph = chain_graph(joints)
    partition = label_partitions(graph)
    config = TINY_CONFIG
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(batch, 9, frames, joints))
    y = one_hot(np.arange(batch) % config.num_classes, config.num_classes, dtype=np.float64)
    params = init_params(config, joints, seed=seed, dtype=np.float64)
    # move M and the biases off their constant initial values so every term is exercised
    for p in params.values():
        if np.ptp(p.value) == 0:
            p.value += 0.1 * rng.normal(size=p.value.shape)
    return ad.finite_difference_check(loss_fn(X, y, config, partition), params,
                                      epsilon=epsilon, tolerance=tolerance, per_group=per_group, seed=seed)


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    report = run_gradcheck(args.joints, args.frames, args.batch, args.seed,
                           args.epsilon, args.tolerance, args.per_group)
    out = report.to_dict()
    out["seconds"] = round(time.perf_counter() - start, 3)
    _write_json(args.out, out)
    return EXIT_OK if report.all_passed else EXIT_NUMERIC


def cmd_attention(args) -> int:
    _require(args, "checkpoint", "sequence", "out")
    params, config, graph, _ = load_checkpoint(args.checkpoint)
    if not config.use_attention:
        raise IngestError(f"{args.checkpoint}: model was trained without attention")
    seq = load_clean(args.sequence, args.window, SEGMENT_LENGTH)
    X = assemble(seq, graph).astype(np.float32)
    amap = export_attention(X, params, config, label_partitions(graph), graph.joint_names,
                            sequence_id=Path(args.sequence).stem)
    amap.write_csv(args.out)
    return EXIT_OK


def run_ablation(data, graph, base: dict, train_args: dict, seeds, split_seed=DEFAULT_SPLIT_SEED,
                 reshuffle=False, configurations=ABLATION_ROWS) -> dict:
    partition = label_partitions(graph)
    rows = []
    for label, flags in configurations:
        scores = []
        for seed in seeds:
            tc = TrainConfig(seed=seed, **train_args)
            train_idx, test_idx = _split(data.labels, seed if reshuffle else split_seed)
            config = ModelConfig(**{**base, **flags}).standardized(data.X[train_idx])
            _, history = _train_one(data, partition, config, tc, train_idx, test_idx)
            scores.append(history[-1]["test_balanced_accuracy"])
            log.info("ablation %s seed %d: %.4f", label, seed, scores[-1])
        mean, std = aggregate_seeds(scores)
        rows.append({"configuration": label, "balanced_acc": scores, "mean": mean, "std": std})
    for row in rows:
        row["gain"] = row["mean"] - rows[0]["mean"]
    return {"seeds": list(seeds), "rows": rows}


def format_ablation(table: dict) -> str:
    lines = [f"{'configuration':<14}{'balanced acc (%)':>20}{'gain':>9}"]
    for row in table["rows"]:
        acc = f"{100 * row['mean']:.2f} ± {100 * row['std']:.2f}"
        lines.append(f"{row['configuration']:<14}{acc:>20}{100 * row['gain']:>+9.2f}")
    return "\n".join(lines)


def cmd_ablation(args) -> int:
    _require(args, "manifest")
    base = model_config_from_args(args).to_dict()
    base["block_specs"] = tuple(tuple(b) for b in base["block_specs"])
    train_config_from_args(args, 0)  # validate once
    graph = load_skeleton(args.skeleton)
    data = load_dataset(args.manifest, graph, args.fim_item, args.action, args.threads, args.window)
    train_args = dict(batch_size=args.batch_size, max_lr=args.max_lr, epochs=args.epochs)
    table = run_ablation(data, graph, base, train_args, args.seeds, reshuffle=args.reshuffle_split)
    table.update(fim_item=args.fim_item, action=args.action)
    if args.out is not None:
        _write_json(args.out, table)
    print(format_ablation(table))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "attention": cmd_attention,
    "ablation": cmd_ablation,
}


def _report(exc: BaseException, code: int, as_json: bool):
    if as_json:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    as_json = "--json-errors" in argv
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _report(exc, EXIT_USAGE, as_json)
        return EXIT_USAGE
    except (IngestError, GraphError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        _report(exc, EXIT_DATA, as_json)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        _report(exc, EXIT_NUMERIC, as_json)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
