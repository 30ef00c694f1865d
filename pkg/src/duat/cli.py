"""Command-line entry point: ``duat <command> [flags]``.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
3 numerical failure (divergence, non-finite values, failed gradient check).
"""
from __future__ import annotations

import argparse
import datetime
import json
import sys
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence


from . import config as C
from . import gradcheck, plotting
from .data import DataError, GenerationError, Sample, generate, load_manifest, read_image, save_samples, split, write_mask
from .losses import SMALL_OBJECT_BIN, EvalReport
from .model import DuAT, ablate
from .nn import CheckpointError, count_params_flops, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, ShapeError, set_debug, set_mode
from .train import DivergenceError, evaluate, json_logger, predict_arrays, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# annotation only: size of the full-scale network at 352x352 input
REFERENCE_PARAMS_M = 24.92
REFERENCE_MACS_G = 9.88


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, cfg: Dict) -> None:
    (out / "config.txt").write_text(C.dump(cfg))


def _header(command: str, cfg: Dict) -> Dict:
    # the only record carrying wall-clock time
    return {"record": "header", "command": command, "seed": cfg["seed"],
            "time": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")}


def _data_dir(args, cfg) -> Path:
    d = args.data or cfg["data.dir"]
    if not d:
        raise UsageError("no dataset: pass --data DIR (as written by `synth`) or set data.dir")
    return Path(d)


def _check_size(samples: Sequence[Sample], size: int, source: str) -> None:
    for s in samples:
        if s.image.shape[1:] != (size, size):
            raise DataError(f"{source}: sample {s.id} is {s.image.shape[1]}x{s.image.shape[2]}, "
                            f"model expects {size}x{size}")


def _load_model(checkpoint: str, overrides: Sequence[str], config_path: Optional[str]):
    try:
        state, text = load_checkpoint(checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {checkpoint}: {exc.strerror}") from None
    cfg = C.resolve(config_path, overrides, base_text=text)
    model = DuAT(C.model_config(cfg))
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match the configured model: {exc}") from None
    return model, cfg


def _write_report(out: Path, report: EvalReport, title: str) -> None:
    (out / "report.jsonl").write_text("\n".join(report.to_lines()) + "\n")
    (out / "size_curve.dat").write_text(report.curve_table())
    plotting.size_curve(report, out / "size_curve.png", title)


def _summary(report: EvalReport) -> str:
    agg = report.aggregate()
    lines = [f"n={agg['n']} mDice={agg['mdice']:.4f} mIoU={agg['miou']:.4f} MAE={agg['mae']:.4f}",
             "bin      count  mean_dice"]
    lines += [f"{b['bin']:<8} {b['count']:5d}  {b['mean_dice']:.4f}" for b in report.bins]
    return "\n".join(lines)


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg) -> int:
    out = _out_dir(args)
    samples = generate(C.gen_spec(cfg), cfg["data.n"])
    parts = split(samples, C.split_key(cfg), seed=cfg["seed"])
    for name, part in zip(("train", "val", "test"), parts):
        save_samples(part, out / "images", out / f"{name}.tsv")
    _write_config(out, cfg)
    print(f"wrote {len(samples)} samples to {out}: "
          + ", ".join(f"{n}={len(p)}" for n, p in zip(("train", "val", "test"), parts)))
    return EXIT_OK


def _train_one(cfg, train_set, val_set, log) -> DuAT:
    model = DuAT(C.model_config(cfg))
    result = train(model, train_set, C.train_config(cfg), val_set, C.loss_config(cfg), log)
    model.load_state_dict(result.best_state)
    return model


def cmd_train(args, cfg) -> int:
    data = _data_dir(args, cfg)
    train_set = load_manifest(data / "train.tsv")
    val_path = data / "val.tsv"
    val_set = load_manifest(val_path) if val_path.exists() else []
    _check_size(train_set + val_set, cfg["data.size"], str(data))
    out = _out_dir(args)
    _write_config(out, cfg)
    records: List[Dict] = []
    with open(out / "train.log", "w") as fh:
        write = json_logger(fh)
        write(_header("train", cfg))

        def log(rec):
            records.append(rec)
            write(rec)
        model = _train_one(cfg, train_set, val_set, log)
    save_checkpoint(out / "model.ckpt", model.state_dict(), C.dump(cfg))
    plotting.training_curve(records, out / "training_curve.png")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args, cfg_unused) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    model, cfg = _load_model(args.checkpoint, args.set, args.config)
    manifest = Path(args.manifest) if args.manifest else _data_dir(args, cfg) / "test.tsv"
    samples = load_manifest(manifest)
    _check_size(samples, cfg["data.size"], str(manifest))
    report = evaluate(model, samples, cfg["eval.bin_edges"])
    out = _out_dir(args)
    _write_config(out, cfg)
    _write_report(out, report, f"Dice by object size ({manifest.name})")
    print(_summary(report))
    return EXIT_OK


def cmd_predict(args, cfg_unused) -> int:
    if not args.checkpoint or not args.inputs:
        raise UsageError("predict needs --checkpoint and at least one image path")
    model, cfg = _load_model(args.checkpoint, args.set, args.config)
    images = [read_image(p) for p in args.inputs]
    for p, im in zip(args.inputs, images):
        if im.shape[1] % 32 or im.shape[2] % 32:
            raise DataError(f"{p}: size {im.shape[1]}x{im.shape[2]} is not divisible by 32")
    out = _out_dir(args)
    for p, im in zip(args.inputs, images):
        masks, _ = predict_arrays(model, im[None])
        target = out / (Path(p).stem + "_pred.pgm")
        write_mask(target, masks[0])
        print(target)
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    results = gradcheck.run_all(seed=cfg["seed"])
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def parameter_breakdown(model: DuAT) -> "OrderedDict[str, int]":
    groups: "OrderedDict[str, int]" = OrderedDict()
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        groups[top] = groups.get(top, 0) + int(p.data.size)
    return groups


def cmd_count(args, cfg) -> int:
    model = DuAT(C.model_config(cfg))
    size = cfg["data.size"]
    params, macs = count_params_flops(model, (1, 3, size, size))
    for name, n in parameter_breakdown(model).items():
        print(f"module {name} params {n}")
    print(f"params {params}")
    print(f"macs {macs}")
    print(f"summary {params / 1e6:.4f}M params, {macs / 1e9:.4f}G MACs at {size}x{size}")
    print(f"reference (full-size network at 352x352, not asserted): "
          f"{REFERENCE_PARAMS_M}M params, {REFERENCE_MACS_G}G MACs")
    return EXIT_OK


def format_ablation(rows: Sequence[Dict]) -> str:
    width = max(len("Variant"), *(len(r["variant"]) for r in rows))
    lines = [f"{'Variant':<{width}} | mDice  | mIoU   | MAE    | dice<5%",
             "-" * width + "-+--------+--------+--------+--------"]
    for r in rows:
        small = "   n/a" if r["small_dice"] is None else f"{r['small_dice']:.4f}"
        lines.append(f"{r['variant']:<{width}} | {r['mdice']:.4f} | {r['miou']:.4f} | {r['mae']:.4f} | {small}")
    return "\n".join(lines) + "\n"


def parse_ablation(text: str) -> Dict[str, Dict]:
    rows = {}
    for line in text.splitlines()[2:]:
        cells = [c.strip() for c in line.split("|")]
        if len(cells) != 5:
            continue
        small = None if cells[4] == "n/a" else float(cells[4])
        rows[cells[0]] = {"mdice": float(cells[1]), "miou": float(cells[2]), "mae": float(cells[3]),
                          "small_dice": small}
    return rows


def cmd_ablate(args, cfg) -> int:
    data = _data_dir(args, cfg)
    train_set = load_manifest(data / "train.tsv")
    val_path = data / "val.tsv"
    val_set = load_manifest(val_path) if val_path.exists() else []
    test_set = load_manifest(data / "test.tsv")
    _check_size(train_set + val_set + test_set, cfg["data.size"], str(data))
    out = _out_dir(args)
    _write_config(out, cfg)
    rows = []
    with open(out / "ablate.log", "w") as fh:
        write = json_logger(fh)
        write(_header("ablate", cfg))
        for variant in cfg["ablate.variants"]:
            vcfg = ablate(C.model_config(cfg), variant)
            model = DuAT(vcfg)
            result = train(model, train_set, C.train_config(cfg), val_set, C.loss_config(cfg),
                           lambda rec, v=variant: write({"variant": v, **rec}))
            model.load_state_dict(result.best_state)
            report = evaluate(model, test_set, cfg["eval.bin_edges"])
            row = {"variant": variant, **report.aggregate(), "small_dice": report.bin_mean(SMALL_OBJECT_BIN)}
            write({"record": "result", **row})
            rows.append(row)
    (out / "ablation.txt").write_text(format_ablation(rows))
    (out / "ablation.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    plotting.ablation_bars(rows, out / "ablation.png")
    print(format_ablation(rows), end="")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset with train/val/test manifests"),
    "train": (cmd_train, "train a model and save the best-validation checkpoint"),
    "eval": (cmd_eval, "evaluate a checkpoint; write per-sample report and size curve"),
    "predict": (cmd_predict, "write predicted masks for individual images"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every differentiable op"),
    "count": (cmd_count, "parameter and multiply-accumulate counts"),
    "ablate": (cmd_ablate, "train and evaluate each ablation variant"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="duat", description="Dual-aggregation segmentation toolkit on a numpy autograd engine.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--seed", type=int, help="overrides the seed key")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        if name in ("train", "eval", "ablate"):
            p.add_argument("--data", help="dataset directory with train/val/test .tsv manifests")
        if name in ("eval", "predict"):
            p.add_argument("--checkpoint", help="checkpoint written by `train`")
        if name == "eval":
            p.add_argument("--manifest", help="manifest to evaluate (default: DATA/test.tsv)")
        if name == "predict":
            p.add_argument("inputs", nargs="*", help="P6 images to segment")
        if name == "gradcheck":
            p.set_defaults(precision="test")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    func = COMMANDS[args.command][0]
    try:
        cfg = C.resolve(args.config, args.set, args.seed)
        set_mode(getattr(args, "precision", "train"))
        set_debug(False)
        return func(args, cfg)
    except (C.ConfigError, UsageError) as exc:
        print(f"duat {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        print(f"duat {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, ShapeError, GenerationError, OSError) as exc:
        print(f"duat {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
