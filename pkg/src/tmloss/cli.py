"""Command-line entry point: ``tmloss {synth,train,ablate,eval,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data or integrity error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from tmloss import __version__
from tmloss.config import (COMBINE_MODES, HEAD_VARIANTS, LOSS_KINDS, POSITIONAL_ENCODINGS,
                           ExperimentConfig, load_config, save_config)
from tmloss.errors import (ConfigurationError, DimensionError, IngestionError, IntegrityError,
                           NumericalError, ParameterError, ProtocolError)

log = logging.getLogger("tmloss")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# run manifest
# --------------------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Records what a command ran with and which files it produced."""

    def __init__(self, command: str, out_dir: Path, argv: Sequence[str], seed: Optional[int] = None,
                 config: Optional[dict] = None):
        self.data = {"command": command, "argv": list(argv), "version": __version__,
                     "seed": seed, "config": config, "out_dir": str(out_dir),
                     "started": _now(), "finished": None, "artifacts": []}
        self.out_dir = out_dir

    def add(self, *paths) -> None:
        for p in paths:
            rel = Path(os.path.relpath(p, self.out_dir)).as_posix()
            if rel not in self.data["artifacts"]:
                self.data["artifacts"].append(rel)

    def write(self) -> Path:
        missing = [a for a in self.data["artifacts"] if not (self.out_dir / a).exists()]
        if missing:
            raise IntegrityError(f"manifest references missing artifacts: {missing}")
        self.data["finished"] = _now()
        path = self.out_dir / "run_manifest.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config JSON; flags override its values")
    p.add_argument("--data", type=Path, required=True, help="dataset root (<identity>/<image> layout)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--loss", choices=LOSS_KINDS)
    p.add_argument("--margin", type=float)
    p.add_argument("--scale", type=float)
    p.add_argument("--head-variant", choices=HEAD_VARIANTS)
    p.add_argument("--pe", choices=POSITIONAL_ENCODINGS, help="positional encoding for the encoder input")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-pairs", type=int, help="number of holdout verification pairs")
    p.add_argument("--holdout-fraction", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--deterministic", action="store_true", help="zero wall-clock column for byte-stable logs")
    p.add_argument("--no-flip", action="store_true", help="disable horizontal flip augmentation")


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    tc, hc, ec = config.train, config.head, config.encoder
    overrides = [
        (hc, "kind", args.loss), (hc, "margin", args.margin), (hc, "scale", args.scale),
        (tc, "head_variant", args.head_variant), (ec, "positional_encoding", args.pe),
        (tc, "epochs", args.epochs), (tc, "batch_size", args.batch_size), (tc, "lr0", args.lr),
        (tc, "seed", args.seed), (tc, "eval_pairs", args.eval_pairs),
        (tc, "holdout_fraction", args.holdout_fraction), (tc, "checkpoint_every", args.checkpoint_every),
        (tc, "alpha", getattr(args, "alpha", None)), (tc, "combine_mode", getattr(args, "combine_mode", None)),
    ]
    for section, name, value in overrides:
        if value is not None:
            setattr(section, name, value)
    if args.deterministic:
        tc.deterministic = True
    if args.no_flip:
        tc.flip = False
    return config


def _load_training_data(args, config: ExperimentConfig):
    from tmloss.data import load_folder

    ds = load_folder(args.data)
    h, w = ds.image_size
    if args.config is None:
        config.backbone.input_size = (3, h, w)
    elif tuple(config.backbone.input_size) != (3, h, w):
        raise DimensionError(f"dataset images are {h}x{w} but the config expects {config.backbone.input_size}")
    config.validate()
    return ds


def _holdout_pairs(ds, config: ExperimentConfig):
    from tmloss.data import make_pairs, split_holdout

    tc = config.train
    train_set, holdout = split_holdout(ds, tc.holdout_fraction)
    n_pos = tc.eval_pairs // 2
    pairs = make_pairs(holdout, n_pos, tc.eval_pairs - n_pos, tc.seed)
    return train_set, holdout, pairs


def _run_training(config: ExperimentConfig, ds, out: Path, manifest: RunManifest):
    from tmloss.data import write_pairs
    from tmloss.trainer import train

    out.mkdir(parents=True, exist_ok=True)
    train_set, holdout, pairs = _holdout_pairs(ds, config)
    save_config(config, out / "config.json")
    write_pairs(pairs, out / "pairs.txt")

    def progress(r):
        acc = "" if r.val_accuracy is None else f" val_acc {r.val_accuracy:.4f}"
        print(f"[{out.name}] epoch {r.epoch:3d} lr {r.lr:.4g} loss {r.loss_total:.4f}{acc}", flush=True)

    result = train(config, train_set, out, holdout=holdout, pairs=pairs, progress=progress)
    manifest.add(out / "config.json", out / "pairs.txt", out / "train_log.csv", out / "val_log.csv",
                 *result.checkpoints)
    return result


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args, argv) -> int:
    from tmloss.data import export_folder, synth_generate

    if not args.force and args.out.exists() and any(args.out.iterdir()):
        raise UsageError(f"output directory {args.out} is not empty (use --force to overwrite)")
    ds = synth_generate(args.classes, args.per_class, args.size, args.seed)
    root = export_folder(ds, args.out, force=args.force)
    manifest = RunManifest("synth", root, argv, seed=args.seed,
                           config={"classes": args.classes, "per_class": args.per_class, "size": args.size})
    manifest.add(*(root / p for p in ds.paths))
    manifest.write()
    print(f"wrote {len(ds)} images in {ds.class_count} identities to {root}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    config = _resolve_config(args)
    ds = _load_training_data(args, config)
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", args.out, argv, config.train.seed, config.to_dict())
    result = _run_training(config, ds, args.out, manifest)
    manifest.write()
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"final loss {last.loss_total:.4f}"
              + ("" if last.val_accuracy is None else f", holdout accuracy {last.val_accuracy:.4f}"))
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    from tmloss.checkpoint import parameter_hash

    alphas = args.alphas
    if not alphas:
        raise UsageError("--alphas must list at least one value")
    if len(set(alphas)) != len(alphas):
        raise UsageError(f"duplicate alpha values in {alphas}")
    args.combine_mode = "weighted"
    base = _resolve_config(args)
    ds = _load_training_data(args, base)
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("ablate", args.out, argv, base.train.seed, base.to_dict())
    manifest.data["alphas"] = alphas
    rows, hashes = [], {}
    for alpha in alphas:
        config = ExperimentConfig.from_dict(base.to_dict())
        config.train.alpha = alpha
        config.validate()
        run_dir = args.out / f"alpha_{alpha:g}"
        result = _run_training(config, ds, run_dir, manifest)
        hashes[f"{alpha:g}"] = parameter_hash(run_dir / "checkpoints" / "epoch_000.ckpt")
        for r in result.history:
            rows.append((alpha, r.epoch, r.val_accuracy, r.loss_total))
    summary = args.out / "summary.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "epoch", "accuracy", "loss_total"])
        for alpha, epoch, acc, loss in rows:
            w.writerow([repr(alpha), epoch, "" if acc is None else repr(acc), repr(loss)])
    manifest.data["epoch0_parameter_hashes"] = hashes
    manifest.add(summary)
    manifest.write()
    print(f"wrote {summary} ({len(rows)} rows); epoch-0 hashes shared: {len(set(hashes.values())) == 1}")
    return EXIT_OK


def _load_model(checkpoint: Path, config_path: Optional[Path]):
    from tmloss.checkpoint import load_checkpoint
    from tmloss.model import TransformerMetricModel

    state, meta = load_checkpoint(checkpoint)
    if "config" not in meta or "num_classes" not in meta:
        raise IntegrityError(f"{checkpoint}: manifest lacks config or num_classes")
    stored = ExperimentConfig.from_dict(meta["config"])
    config = load_config(config_path) if config_path else stored
    emb_key = "backbone.embedding.weight"
    if emb_key not in state:
        raise IntegrityError(f"{checkpoint}: missing {emb_key}")
    stored_dim = state[emb_key].shape[0]
    if config.backbone.embedding_dim != stored_dim:
        raise IntegrityError(f"embedding dimension mismatch: checkpoint has {stored_dim}, "
                             f"config asks for {config.backbone.embedding_dim}")
    model = TransformerMetricModel(config, int(meta["num_classes"]), seed=0)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise IntegrityError(f"{checkpoint} does not match the config: {exc}") from exc
    model.eval()
    return model, config


def cmd_eval(args, argv) -> int:
    from tmloss.data import load_folder, read_pairs, write_pairs
    from tmloss.evaluation import (embed_dataset, render_variance_table, render_verification_table,
                                   variance_report, verification_accuracy, write_roc_csv,
                                   write_variance_csv, write_verification_csv)

    if args.pairs is not None and not args.pairs.is_file():
        raise UsageError(f"pair file not found: {args.pairs}")
    if not args.checkpoint.is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, config = _load_model(args.checkpoint, args.config)
    h, w = config.backbone.input_size[1:]
    ds = load_folder(args.data, size=(h, w))
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("eval", args.out, argv, config.train.seed, config.to_dict())
    if args.pairs is not None:
        pairs = read_pairs(args.pairs)
    else:
        _, _, pairs = _holdout_pairs(ds, config)
        write_pairs(pairs, args.out / "pairs.txt")
        manifest.add(args.out / "pairs.txt")
    index = ds.index_of()
    missing = sorted({p for a, b, _ in pairs.entries for p in (a, b) if p not in index})
    if missing:
        raise ProtocolError(f"pair list references images not under {args.data}: {missing[:3]}")
    used = sorted({index[p] for a, b, _ in pairs.entries for p in (a, b)})
    embeddings = embed_dataset(model, ds.subset(used, split="eval"))
    report = verification_accuracy(pairs, embeddings, folds=args.folds, far_levels=args.far)
    label = args.label or config.head.kind
    variance = variance_report(embeddings)

    files = {"verification.csv": lambda p: write_verification_csv(report, p),
             "roc.csv": lambda p: write_roc_csv(report, p),
             "variance.csv": lambda p: write_variance_csv([(label, variance)], p)}
    for name, writer in files.items():
        writer(args.out / name)
    text = render_verification_table(report) + "\n" + render_variance_table(
        [(label, variance.intra, variance.inter, variance.ratio)])
    (args.out / "report.txt").write_text(text, encoding="utf-8")
    manifest.add(*(args.out / n for n in files), args.out / "report.txt")
    manifest.write()
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    from tmloss.gradcheck_suite import run_suite, suite

    only = [n for chunk in (args.only or []) for n in chunk.split(",") if n]
    known = {i.name for i in suite()}
    unknown = sorted(set(only) - known)
    if unknown:
        raise UsageError(f"unknown gradcheck items {unknown}; choose from {sorted(known)}")
    results = run_suite(only or None)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  worst_rel_err {r.error:.3e}  tol {r.tolerance:.0e}  "
              f"{'PASS' if r.passed else 'FAIL'}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} items passed")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest("gradcheck", args.out, argv)
        path = args.out / "gradcheck.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["item", "tolerance", "worst_rel_err", "passed"])
            for r in results:
                w.writerow([r.name, repr(r.tolerance), repr(r.error), int(r.passed)])
        manifest.add(path)
        manifest.write()
    return EXIT_NUMERICAL if failed else EXIT_OK


# --------------------------------------------------------------------------
# parser and dispatch
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tmloss", description="Transformer-assisted metric-learning toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic identity dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    p = sub.add_parser("train", help="train the two-branch model")
    _add_train_options(p)
    p.add_argument("--alpha", type=float, help="transformer-loss weight in weighted mode")
    p.add_argument("--combine-mode", choices=COMBINE_MODES)

    p = sub.add_parser("ablate", help="sequential runs over several alpha values")
    _add_train_options(p)
    p.add_argument("--alphas", type=_float_list, required=True, help="comma-separated, e.g. 0.3,0.4,0.5,0.6")

    p = sub.add_parser("eval", help="verification and variance reports for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--pairs", type=Path, help="pair file; default: regenerate the training holdout pairs")
    p.add_argument("--config", type=Path, help="config to check the checkpoint against")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--far", type=_float_list, default=[1e-4, 1e-3, 1e-2, 1e-1])
    p.add_argument("--label", help="row label in the variance table (default: loss kind)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--only", action="append", help="restrict to named items (repeatable or comma-separated)")
    p.add_argument("--out", type=Path, help="write gradcheck.csv and a run manifest here")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "ablate": cmd_ablate, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except (UsageError, ConfigurationError, ParameterError, FileNotFoundError) as exc:
        print(f"tmloss {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"tmloss {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (IntegrityError, IngestionError, ProtocolError, DimensionError) as exc:
        print(f"tmloss {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
