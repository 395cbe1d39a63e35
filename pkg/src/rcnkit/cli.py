"""Command-line interface.

``rcnkit forge|train|predict|eval|report``.  Each subcommand accepts
``--config FILE`` (plain ``key = value`` lines naming the long flags),
``--seed``, ``--threads`` and ``--out``; flags given on the command line win
over the config file.  Exit status is 0 on success, 1 on runtime or I/O
failure and 2 on configuration errors, with one JSON error line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .bench import DEFAULT_MAX_DIST, BenchmarkSummary, benchmark, export_report, nms_thin, read_pr_csv, render_svg
from .config import ConfigError, format_config, parse_config, read_config
from .forge import ForgeError, SynthConfig, masks_corpus, read_manifest, synth_corpus
from .graph import NetworkSpec, SpecError, build_rcn, desk_spec, normalize_image, read_spec
from .imageio import read_label, read_png, read_prediction, write_prediction
from .tensor import load_checkpoint, save_checkpoint
from .training import (
    AugmentConfig,
    EpochLog,
    TrainPlan,
    TrainStage,
    expand_annotators,
    run_stage,
    variant_plan,
    write_log,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("rcnkit")


class _Parser(argparse.ArgumentParser):
    # usage mistakes are configuration errors, reported like any other
    def error(self, message):
        raise ConfigError(message)


# --------------------------------------------------------------------------
# flag/config merging
# --------------------------------------------------------------------------


def _canvas(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"canvas must look like 64x64, got {text!r}") from None
    return h, w


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _merge(parser: argparse.ArgumentParser, ns: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """defaults < config file < explicit flags."""
    given = vars(ns)
    merged = dict(defaults)
    if given.get("config"):
        cfg = read_config(given["config"])
        actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
        for key, raw in cfg.items():
            dest = key.replace("-", "_")
            if dest not in actions:
                raise ConfigError(f"{given['config']}: unknown key {key!r}")
            act = actions[dest]
            if isinstance(act, argparse._StoreTrueAction):
                merged[dest] = _bool(raw)
            elif act.nargs in ("+", "*"):
                merged[dest] = [act.type(v) if act.type else v for v in raw.split()]
            else:
                try:
                    merged[dest] = act.type(raw) if act.type else raw
                except ValueError as exc:
                    raise ConfigError(f"{given['config']}: bad value for {key}: {exc}") from None
    merged.update(given)
    return argparse.Namespace(**merged)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--threads", type=int, help="BLAS threads (default: all cores; 1 is fully serial)")
    p.add_argument("--out", help="output directory")


# --------------------------------------------------------------------------
# forge
# --------------------------------------------------------------------------

FORGE_DEFAULTS = {
    "synthetic": False,
    "count": 32,
    "canvas": (96, 96),
    "val": 0,
    "kinds": "rectangle,ellipse,polygon",
    "from_masks": None,
    "classes": None,
    "out": "corpus",
}


def _positive_rate(manifest) -> float:
    pos = total = 0
    for e in manifest.entries:
        for p in e.labels:
            lab = read_label(p)
            pos += int(lab.sum())
            total += lab.size
    return pos / total if total else 0.0


def cmd_forge(args) -> int:
    if bool(args.synthetic) == bool(args.from_masks):
        raise ConfigError("forge needs exactly one of --synthetic or --from-masks")
    out = Path(args.out)
    if args.synthetic:
        cfg = SynthConfig(canvas=tuple(args.canvas), kinds=tuple(k.strip() for k in args.kinds.split(",") if k.strip()))
        try:
            cfg.validate()
        except ForgeError as exc:
            raise ConfigError(str(exc)) from None
        if args.count < 1 or not 0 <= args.val < args.count:
            raise ConfigError(f"need count >= 1 and 0 <= val < count, got count={args.count} val={args.val}")
        manifest = synth_corpus(args.count, out, cfg, seed=args.seed, val_count=args.val)
        empty = 0
    else:
        if not args.classes:
            raise ConfigError("--from-masks needs --classes")
        manifest, empty = masks_corpus(args.from_masks, out, args.classes)
    print(f"manifest: {out / 'manifest.tsv'}")
    print(f"images: {len(manifest.entries)}")
    print(f"positive_rate: {_positive_rate(manifest):.6f}")
    if empty:
        print(f"empty_labels: {empty}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "manifest": None,
    "pretrain_manifest": None,
    "finetune_manifest": None,
    "plan": "RCN-VOC",
    "variant": None,
    "spec": None,
    "init": None,
    "epochs": None,
    "images_per_epoch": None,
    "lr": None,
    "out": "run",
}

VARIANT_NAMES = {"rcn-voc": "RCN-VOC", "rcn-coco": "RCN-COCO", "rcn": "RCN", "rcn-voc-1": "RCN-VOC-1"}


def overfit1_plan() -> TrainPlan:
    """Memorise the first training image; no augmentation, crop = image."""
    stage = TrainStage(epochs=200, images_per_epoch=1, batch_size=1, lr=0.01)
    return TrainPlan((stage,), "custom", augment=AugmentConfig(vflip_prob=0.0, scale_range=(1.0, 1.0)))


def resolve_plan(name: str) -> tuple[TrainPlan, Path | None]:
    key = name.lower()
    if key == "overfit1":
        return overfit1_plan(), None
    if key in VARIANT_NAMES:
        return variant_plan(VARIANT_NAMES[key]), None
    path = Path(name)
    if not path.is_file():
        raise ConfigError(f"plan {name!r} is neither a built-in ({', '.join(['overfit1', *VARIANT_NAMES])}) nor a file")
    return TrainPlan.from_config(read_config(path)), path.parent


def _overrides(plan: TrainPlan, args) -> TrainPlan:
    kw = {}
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    if args.images_per_epoch is not None:
        kw["images_per_epoch"] = args.images_per_epoch
    if args.lr is not None:
        kw["lr"] = args.lr
    if not kw:
        return plan
    out = replace(plan, stages=tuple(replace(s, **kw) for s in plan.stages))
    out.validate()
    return out


def cmd_train(args) -> int:
    plan_name = args.variant or args.plan
    plan, plan_dir = resolve_plan(plan_name)
    plan = _overrides(plan, args)
    overfit = plan_name.lower() == "overfit1"
    if args.spec:
        spec = read_spec(args.spec)
    else:
        # memorising one image needs the full-resolution head; half scale floors the loss
        spec = desk_spec(output_scale="full" if overfit else "half")
    sources = {"main": args.manifest, "pretrain": args.pretrain_manifest, "finetune": args.finetune_manifest or args.manifest}
    for name, path in plan.corpora.items():
        if sources.get(name) is None:
            sources[name] = str(plan_dir / path) if plan_dir else path

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.cfg").write_text(format_config(spec.to_config()), encoding="utf-8")
    (out / "plan.cfg").write_text(format_config({**plan.to_config(), "seed": str(args.seed)}), encoding="utf-8")

    ss = np.random.SeedSequence(args.seed)
    init_ss, *stage_ss = ss.spawn(1 + len(plan.stages))
    store, graph = build_rcn(spec, seed=int(init_ss.generate_state(1)[0]))
    if args.init:
        loaded = load_checkpoint(args.init)
        graph.check_store(loaded)
        store = loaded
    last_good = out / "last_good.rcnk"
    save_checkpoint(store, last_good)

    history: list[EpochLog] = []
    for k, (stage, seq) in enumerate(zip(plan.stages, stage_ss), start=1):
        src = sources.get(stage.corpus)
        if src is None:
            raise ConfigError(f"stage {k} trains on corpus {stage.corpus!r}; pass --{stage.corpus}-manifest or corpus.{stage.corpus} in the plan")
        data = read_manifest(src).load("train")
        if not data:
            raise ConfigError(f"{src}: no 'train' entries")
        aug = plan.augment
        if overfit:
            data = data[:1]
            aug = replace(aug, crop_size=data[0][0].shape[:2])
        mode, annot = ("all", 0) if stage.annotators == "all" else ("single", int(stage.annotators.split(":")[1]))
        corpus = expand_annotators(data, mode, annot)
        offset = len(history)

        def on_epoch(e: EpochLog, offset=offset) -> None:
            save_checkpoint(store, last_good)
            history.append(replace(e, epoch=e.epoch + offset))

        log.info("stage %d: %d epochs on %s (%d samples)", k, stage.epochs, stage.corpus, len(corpus))
        run_stage(stage, graph, store, corpus, np.random.default_rng(seq), plan.loss, aug, out / f"stage{k}.rcnk", on_epoch)
        write_log(history, out / "train_log.csv")
    save_checkpoint(store, out / "model.rcnk")
    print(f"model: {out / 'model.rcnk'}")
    if history:
        print(f"final_loss: {history[-1].mean_loss:.6f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# predict
# --------------------------------------------------------------------------

PREDICT_DEFAULTS = {
    "model": None,
    "checkpoint": None,
    "spec": None,
    "manifest": None,
    "split": None,
    "images": None,
    "format": "pgm",
    "bits": 16,
    "out": "pred",
}


def _load_model(args) -> tuple:
    ckpt = Path(args.checkpoint) if args.checkpoint else (Path(args.model) / "model.rcnk" if args.model else None)
    if ckpt is None:
        raise ConfigError("predict needs --model DIR or --checkpoint FILE")
    spec_path = Path(args.spec) if args.spec else (Path(args.model) / "spec.cfg" if args.model else ckpt.parent / "spec.cfg")
    if not spec_path.is_file():
        raise ConfigError(f"network description {spec_path} not found; pass --spec")
    spec = read_spec(spec_path)
    store = load_checkpoint(ckpt)
    _, graph = build_rcn(spec)
    graph.check_store(store)
    return store, graph


def _input_images(args) -> list[Path]:
    if args.manifest:
        m = read_manifest(args.manifest)
        return [e.image for e in (m.split(args.split) if args.split else m.entries)]
    if args.images:
        paths = []
        for p in map(Path, args.images):
            paths.extend(sorted(p.glob("*.png")) if p.is_dir() else [p])
        return paths
    raise ConfigError("predict needs --manifest or --images")


def cmd_predict(args) -> int:
    if args.format not in ("pgm", "png") or args.bits not in (8, 16):
        raise ConfigError(f"unsupported output {args.format}/{args.bits}-bit; use pgm|png at 8 or 16 bits")
    store, graph = _load_model(args)
    paths = _input_images(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        img = read_png(p)
        prob = graph.predict(store, normalize_image(img))[0]
        write_prediction(out / f"{p.stem}.{args.format}", prob, bits=args.bits)
    print(f"predictions: {len(paths)} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval / report
# --------------------------------------------------------------------------

EVAL_DEFAULTS = {
    "pred": None,
    "gt": None,
    "split": None,
    "thresholds": 99,
    "max_dist": DEFAULT_MAX_DIST,
    "prethinned": False,
    "name": "",
    "out": "eval",
}


def _gt_sets(gt: Path, split: str | None) -> dict[str, list[Path]]:
    """Annotator label files per image stem.

    ``gt`` is a manifest, or a directory of ``<stem>.png`` or
    ``<stem>_<k>.png`` files.
    """
    if gt.is_file():
        m = read_manifest(gt)
        return {e.image.stem: e.labels for e in (m.split(split) if split else m.entries)}
    if not gt.is_dir():
        raise FileNotFoundError(f"ground truth {gt} does not exist")
    sets: dict[str, list[Path]] = {}
    for p in sorted(gt.glob("*.png")):
        stem, _, idx = p.stem.rpartition("_")
        key = stem if idx.isdigit() and stem else p.stem
        sets.setdefault(key, []).append(p)
    return sets


def cmd_eval(args) -> int:
    if not args.pred or not args.gt:
        raise ConfigError("eval needs --pred and --gt")
    pred_dir = Path(args.pred)
    preds = sorted(p for p in pred_dir.glob("*") if p.suffix.lower() in (".pgm", ".png"))
    if not preds:
        raise FileNotFoundError(f"no .pgm/.png predictions in {pred_dir}")
    gt_sets = _gt_sets(Path(args.gt), args.split)
    maps, gts = [], []
    for p in preds:
        if p.stem not in gt_sets:
            raise FileNotFoundError(f"no ground truth for prediction {p.name}")
        prob = read_prediction(p)
        labels = [read_label(g) for g in gt_sets[p.stem]]
        for g in labels:
            if g.shape != prob.shape:
                raise ValueError(f"{p.name}: prediction {prob.shape} and ground truth {g.shape} differ in extent")
        maps.append(prob if args.prethinned else nms_thin(prob))
        gts.append(labels)
    summary = benchmark(maps, gts, thresholds=args.thresholds, max_dist=args.max_dist)
    out = Path(args.out)
    export_report(summary, out)
    write_summary(summary, out / "summary.cfg", len(maps))
    print(f"ODS={summary.ods:.4f} OIS={summary.ois:.4f} AP={summary.ap:.4f} images={len(maps)}")
    return EXIT_OK


def write_summary(summary: BenchmarkSummary, path: Path, images: int) -> None:
    values = {
        "ods": repr(summary.ods),
        "ois": repr(summary.ois),
        "ap": repr(summary.ap),
        "ods_threshold": repr(summary.ods_threshold),
        "images": str(images),
    }
    path.write_text(format_config(values), encoding="utf-8")


def read_summary(run: Path) -> BenchmarkSummary:
    vals = read_config(run / "summary.cfg")
    try:
        return BenchmarkSummary(
            read_pr_csv(run / "pr.csv"), float(vals["ods"]), float(vals["ois"]), float(vals["ap"]), float(vals["ods_threshold"])
        )
    except KeyError as exc:
        raise ValueError(f"{run / 'summary.cfg'} lacks {exc.args[0]}") from None


REPORT_DEFAULTS = {"runs": None, "names": None, "out": "report"}


def cmd_report(args) -> int:
    if not args.runs:
        raise ConfigError("report needs --runs DIR [DIR ...] (eval output directories)")
    names = list(args.names or [Path(r).name for r in args.runs])
    if len(names) != len(args.runs):
        raise ConfigError(f"{len(args.runs)} runs but {len(names)} names")
    summaries = {n: read_summary(Path(r)) for n, r in zip(names, args.runs)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["| run | ODS | OIS | AP |", "|---|---|---|---|"]
    lines += [f"| {n} | {s.ods:.3f} | {s.ois:.3f} | {s.ap:.3f} |" for n, s in summaries.items()]
    (out / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "report.svg").write_text(render_svg(summaries), encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

COMMANDS: dict[str, tuple[Callable, dict]] = {
    "forge": (cmd_forge, FORGE_DEFAULTS),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "predict": (cmd_predict, PREDICT_DEFAULTS),
    "eval": (cmd_eval, EVAL_DEFAULTS),
    "report": (cmd_report, REPORT_DEFAULTS),
}


def build_parser() -> _Parser:
    sup = argparse.SUPPRESS
    parser = _Parser(prog="rcnkit", description="Refinement-network contour detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("forge", help="write a contour corpus", argument_default=sup)
    _common(p)
    p.add_argument("--synthetic", action="store_true", help="render shapes with distractor lines")
    p.add_argument("-n", "--count", type=int, help="number of synthetic images")
    p.add_argument("--canvas", type=_canvas, help="synthetic image size, HxW")
    p.add_argument("--val", type=int, help="hold out the last N images as split 'val'")
    p.add_argument("--kinds", help="comma-separated shape kinds")
    p.add_argument("--from-masks", help="directory with masks/ and images/")
    p.add_argument("--classes", type=_int_list, help="foreground class ids, e.g. 1,2,3")

    p = sub.add_parser("train", help="train a network", argument_default=sup)
    _common(p)
    p.add_argument("--manifest", help="main corpus manifest")
    p.add_argument("--pretrain-manifest", help="pre-training corpus manifest")
    p.add_argument("--finetune-manifest", help="fine-training corpus (defaults to --manifest)")
    p.add_argument("--plan", help="overfit1, a variant name, or a plan file")
    p.add_argument("--variant", help="rcn-voc | rcn-coco | rcn | rcn-voc-1")
    p.add_argument("--spec", help="network description file")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--epochs", type=int, help="override epochs of every stage")
    p.add_argument("--images-per-epoch", type=int, help="override images per epoch")
    p.add_argument("--lr", type=float, help="override learning rate")

    p = sub.add_parser("predict", help="write 16-bit probability maps", argument_default=sup)
    _common(p)
    p.add_argument("--model", help="training output directory")
    p.add_argument("--checkpoint", help="checkpoint file (spec.cfg beside it unless --spec)")
    p.add_argument("--spec", help="network description file")
    p.add_argument("--manifest", help="predict every image of this manifest")
    p.add_argument("--split", help="restrict the manifest to one split")
    p.add_argument("--images", nargs="+", help="image files or directories")
    p.add_argument("--format", help="pgm or png")
    p.add_argument("--bits", type=int, help="8 or 16")

    p = sub.add_parser("eval", help="benchmark predictions", argument_default=sup)
    _common(p)
    p.add_argument("--pred", help="directory of prediction maps")
    p.add_argument("--gt", help="manifest or directory of label PNGs")
    p.add_argument("--split", help="restrict a manifest to one split")
    p.add_argument("--thresholds", type=int, help="number of thresholds (default 99)")
    p.add_argument("--max-dist", type=float, help="match radius as a fraction of the diagonal")
    p.add_argument("--prethinned", action="store_true", help="skip NMS; maps are already thin")
    p.add_argument("--name", help="label used in the plot")

    p = sub.add_parser("report", help="tabulate and plot eval runs", argument_default=sup)
    _common(p)
    p.add_argument("--runs", nargs="+", help="eval output directories")
    p.add_argument("--names", nargs="+", help="display names")
    return parser


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _configure_logging() -> None:
    level = os.environ.get("RCNKIT_LOG", "info").strip().lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"RCNKIT_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    root = logging.getLogger("rcnkit")
    root.setLevel(LOG_LEVELS[level])
    if not any(isinstance(h, _StderrHandler) for h in root.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)


def _fail(code: int, exc: BaseException, command: str | None) -> int:
    record = {"error": type(exc).__name__, "exit_code": code, "command": command, "message": str(exc)}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    command = next((a for a in argv if a in COMMANDS), None)
    try:
        _configure_logging()
        parser = build_parser()
        ns = parser.parse_args(argv)
        command = ns.command
        func, defaults = COMMANDS[command]
        sub = parser._subparsers._group_actions[0].choices[command]
        args = _merge(sub, ns, {"seed": 0, "threads": os.cpu_count() or 1, **defaults})
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        with threadpool_limits(limits=args.threads):
            return func(args)
    except (ConfigError, SpecError) as exc:
        return _fail(EXIT_CONFIG, exc, command)
    except KeyboardInterrupt as exc:
        return _fail(EXIT_RUNTIME, exc, command)
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("traceback", exc_info=True)
        return _fail(EXIT_RUNTIME, exc, command)


if __name__ == "__main__":
    sys.exit(main())
