"""``densepipe`` command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .config import SCHEMA, load_config, parse_value
from .data import (DatasetManifest, SplitSpec, class_table, kfold, load_dataset,
                   read_manifest, stratified_split, write_manifest)
from .errors import ConfigError, DataError, PipelineError
from .evaluate import ConfusionMatrix, bench_inference, confusion, metrics, predict_labels
from .explain import gradcam, save_explanation, upsample_bilinear
from .imageio import load_image, preprocess
from .model import build_model, infer_logits
from .ops import softmax
from .report import RunReport, fmt, write_report
from .synth import synth_generate
from .train import FreezePolicy, train, transfer

log = logging.getLogger("densepipe")

COMMANDS = {
    "synth": "generate a synthetic radiograph-proxy dataset",
    "train": "train a model and write checkpoint plus report",
    "crossval": "stratified k-fold cross-validation",
    "eval": "evaluate a checkpoint on a manifest",
    "predict": "print per-image class and probabilities",
    "explain": "write Grad-CAM overlays",
    "bench": "single-image inference latency",
}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="densepipe", description="DenseNet-style sex "
                                     "classification pipeline for grayscale radiographs")
    parser.add_argument("--version", action="version", version=f"densepipe {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="FILE", help="key = value config file")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
        if name == "crossval":
            p.add_argument("--plan-only", action="store_true",
                           help="print fold sizes without training")
        if name in ("predict", "explain"):
            p.add_argument("images", nargs="*", help="image files (instead of --manifest)")
        group = p.add_argument_group("config keys (override the file)")
        for key, (_, help_text) in SCHEMA.items():
            flag = "--" + key.replace("_", "-")
            group.add_argument(flag, dest=f"key_{key}", metavar="VALUE", default=None,
                               help=help_text)
        if name == "crossval":
            group.add_argument("--k", dest="key_folds", metavar="VALUE", help="alias of --folds")
    return parser


def resolve_config(args):
    overrides = {}
    for key in SCHEMA:
        raw = getattr(args, f"key_{key}", None)
        if raw is not None:
            overrides[key] = parse_value(key, raw)
    return load_config(args.config, overrides)


def require(cfg, *keys):
    missing = [k for k in keys if getattr(cfg, k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))


# ----------------------------------------------------------------- helpers


def _out_dir(cfg):
    out = cfg.out_dir or "."
    os.makedirs(out, exist_ok=True)
    return out


def _with_classes(manifest, classes):
    return DatasetManifest(manifest.entries, manifest.root, classes)


def _checkpoint_inputs(ckpt):
    cfg = ckpt.model_config
    return (cfg.input_resolution, cfg.in_channels, bool(ckpt.config.get("equalize", True)),
            list(ckpt.config.get("classes") or ["female", "male"]))


def _evaluate(model, dataset):
    pred = predict_labels(model, dataset)
    cm = confusion(dataset.y, pred)
    return cm, metrics(cm)


def _config_echo(cfg):
    return {k: v for k, v in vars(cfg).items() if v is not None}


def _print_metrics(m, stream=None):
    stream = stream or sys.stdout
    print("  ".join(f"{k} {fmt(getattr(m, k))}" for k in
                    ("accuracy", "precision", "recall", "specificity", "f1")), file=stream)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg, args):
    require(cfg, "out_dir")
    manifest = synth_generate(cfg.n, cfg.effective_resolution(), cfg.class_balance, cfg.seed,
                              cfg.out_dir, cfg.variant)
    counts = ", ".join(f"{k} {v}" for k, v in manifest.counts().items())
    print(f"wrote {len(manifest)} images ({counts}) and manifest.csv to {cfg.out_dir}")
    return 0


def _prepare_splits(cfg):
    manifest = read_manifest(cfg.manifest)
    if cfg.val_manifest:
        val = read_manifest(cfg.val_manifest)
        test = read_manifest(cfg.test_manifest) if cfg.test_manifest else None
        parts = [manifest, val] + ([test] if test is not None else [])
        classes = class_table(e.label for m in parts for e in m.entries)
        train_m, val = _with_classes(manifest, classes), _with_classes(val, classes)
        test = _with_classes(test, classes) if test is not None else None
    else:
        spec = SplitSpec(cfg.split_train, cfg.split_validation, cfg.split_test, cfg.seed)
        train_m, val, test = stratified_split(manifest, spec)
        classes = manifest.classes
    if len(classes) != 2:
        raise DataError(f"binary labels required, manifest has classes {classes}")
    return train_m, val, test, classes


def _build(cfg, classes):
    if cfg.base_checkpoint:
        base = load_checkpoint(cfg.base_checkpoint)
        mcfg = cfg.model_config(len(classes))
        # the backbone (and so the input size) comes from the base checkpoint
        return transfer(base, mcfg.head, len(classes), FreezePolicy(cfg.freeze), cfg.seed)
    mcfg = cfg.model_config(len(classes))
    mcfg.input_resolution = cfg.effective_resolution()
    mcfg.validate()
    model = build_model(mcfg, cfg.model_kind)
    if cfg.freeze == "backbone":
        model.set_frozen(model.backbone_param_names())
    return model


def _fit(cfg, model, train_set, val_set, classes):
    t0 = time.perf_counter()
    history, ckpt = train(model, train_set, val_set, cfg.train_config())
    elapsed = time.perf_counter() - t0
    ckpt.config["classes"] = list(classes)
    ckpt.config["equalize"] = bool(cfg.equalize)
    return history, ckpt, elapsed


def cmd_train(cfg, args):
    require(cfg, "manifest")
    out = _out_dir(cfg)
    train_m, val_m, test_m, classes = _prepare_splits(cfg)
    for name, m in (("train", train_m), ("val", val_m), ("test", test_m)):
        if m is not None:
            write_manifest(m, os.path.join(out, f"{name}.csv"))
    model = _build(cfg, classes)
    res, ch = model.config.input_resolution, model.config.in_channels
    t0 = time.perf_counter()
    train_set = load_dataset(train_m, res, ch, cfg.equalize)
    val_set = load_dataset(val_m, res, ch, cfg.equalize)
    load_time = time.perf_counter() - t0
    history, ckpt, train_time = _fit(cfg, model, train_set, val_set, classes)
    ckpt_path = cfg.checkpoint or os.path.join(out, "model.ckpt")
    save_checkpoint(ckpt, ckpt_path)

    eval_m = test_m if test_m is not None and len(test_m) else val_m
    eval_set = load_dataset(eval_m, res, ch, cfg.equalize)
    cm, m = _evaluate(model, eval_set)
    report = RunReport("train", classes, cm, m, history,
                       timing={"load": load_time, "train": train_time},
                       config=_config_echo(cfg),
                       notes=[f"checkpoint: {ckpt_path}",
                              f"metrics computed on the {'test' if eval_m is test_m else 'validation'}"
                              f" set ({len(eval_m)} images)"])
    write_report(report, out)
    print(f"trained {len(history)} epochs (best {history.best_epoch}); checkpoint {ckpt_path}")
    _print_metrics(m)
    return 0


def cmd_crossval(cfg, args):
    require(cfg, "manifest")
    manifest = read_manifest(cfg.manifest)
    folds = kfold(manifest, cfg.folds, cfg.seed)
    for i, (tr, va) in enumerate(folds):
        print(f"fold {i}: train {len(tr)} / validation {len(va)}")
    if args.plan_only:
        return 0
    if len(manifest.classes) != 2:
        raise DataError(f"binary labels required, manifest has classes {manifest.classes}")
    out = _out_dir(cfg)
    results = []
    total = np.zeros(4, dtype=np.int64)
    t0 = time.perf_counter()
    for i, (tr, va) in enumerate(folds):
        model = _build(cfg, manifest.classes)
        res, ch = model.config.input_resolution, model.config.in_channels
        train_set = load_dataset(tr, res, ch, cfg.equalize)
        val_set = load_dataset(va, res, ch, cfg.equalize)
        _fit(cfg, model, train_set, val_set, manifest.classes)
        cm, m = _evaluate(model, val_set)
        results.append((cm, m))
        total += (cm.tp, cm.fn, cm.fp, cm.tn)
        print(f"fold {i}: ", end="")
        _print_metrics(m)
    pooled = ConfusionMatrix(*(int(v) for v in total))
    report = RunReport("crossval", manifest.classes, pooled, metrics(pooled), folds=results,
                       timing={"total": time.perf_counter() - t0}, config=_config_echo(cfg),
                       notes=["confusion and metrics pool the validation folds"])
    write_report(report, out)
    return 0


def cmd_eval(cfg, args):
    require(cfg, "checkpoint", "manifest")
    ckpt = load_checkpoint(cfg.checkpoint)
    model = model_from_checkpoint(ckpt)
    res, ch, equalize, classes = _checkpoint_inputs(ckpt)
    manifest = _with_classes(read_manifest(cfg.manifest), classes)
    dataset = load_dataset(manifest, res, ch, equalize)
    cm, m = _evaluate(model, dataset)
    report = RunReport("eval", classes, cm, m, config=_config_echo(cfg),
                       notes=[f"checkpoint: {cfg.checkpoint}", f"images: {len(dataset)}"])
    write_report(report, _out_dir(cfg))
    _print_metrics(m)
    return 0


def _inputs(cfg, args, res, ch, equalize):
    """(paths, preprocessed images, stacked array) from positional images or a manifest."""
    if args.images:
        paths = list(args.images)
    elif cfg.manifest:
        manifest = read_manifest(cfg.manifest)
        paths = [manifest.resolve(e) for e in manifest.entries]
    else:
        raise UsageError("give image paths or --manifest")
    imgs = [preprocess(load_image(p), res, equalize) for p in paths]
    x = np.stack([np.repeat((im.pixels / 255.0)[None], ch, axis=0) for im in imgs])
    return paths, imgs, x


def cmd_predict(cfg, args):
    require(cfg, "checkpoint")
    ckpt = load_checkpoint(cfg.checkpoint)
    model = model_from_checkpoint(ckpt)
    res, ch, equalize, classes = _checkpoint_inputs(ckpt)
    paths, _, x = _inputs(cfg, args, res, ch, equalize)
    probs = softmax(infer_logits(model, x))
    pred = np.argmax(probs, axis=1)
    lines = ["path,class," + ",".join(f"p_{c}" for c in classes)]
    for p, k, row in zip(paths, pred, probs):
        lines.append(f"{p},{classes[k]}," + ",".join(fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if cfg.out_dir:
        with open(os.path.join(_out_dir(cfg), "predictions.csv"), "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(text)
    return 0


def cmd_explain(cfg, args):
    require(cfg, "checkpoint", "out_dir")
    ckpt = load_checkpoint(cfg.checkpoint)
    model = model_from_checkpoint(ckpt)
    res, ch, equalize, classes = _checkpoint_inputs(ckpt)
    paths, imgs, x = _inputs(cfg, args, res, ch, equalize)
    pred = predict_labels(model, x)
    cams = gradcam(model, x, pred, cfg.target_layer)
    out = _out_dir(cfg)
    for p, img, cam, k in zip(paths, imgs, cams, pred):
        stem = os.path.splitext(os.path.basename(p))[0]
        heat = upsample_bilinear(cam, res, res)
        written = save_explanation(heat, img, os.path.join(out, f"{stem}_gradcam.png"), cfg.alpha)
        print(f"{p}: {classes[k]} -> {written}")
    return 0


def cmd_bench(cfg, args):
    require(cfg, "checkpoint", "manifest")
    ckpt = load_checkpoint(cfg.checkpoint)
    model = model_from_checkpoint(ckpt)
    res, ch, equalize, classes = _checkpoint_inputs(ckpt)
    manifest = _with_classes(read_manifest(cfg.manifest), classes)
    dataset = load_dataset(manifest, res, ch, equalize)
    rep = bench_inference(model, dataset, cfg.warmup, cfg.runs)
    text = ("mean_ms,std_ms,min_ms,max_ms,runs\n"
            f"{fmt(rep.mean_ms)},{fmt(rep.std_ms)},{fmt(rep.min_ms)},{fmt(rep.max_ms)},{rep.runs}\n")
    with open(os.path.join(_out_dir(cfg), "bench.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    print(f"latency per image: mean {rep.mean_ms:.3f} ms, std {rep.std_ms:.3f}, "
          f"min {rep.min_ms:.3f}, max {rep.max_ms:.3f} over {rep.runs} runs")
    return 0


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "crossval": cmd_crossval, "eval": cmd_eval,
            "predict": cmd_predict, "explain": cmd_explain, "bench": cmd_bench}


@contextlib.contextmanager
def _thread_cap(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = resolve_config(args)
        with _thread_cap(cfg.threads):
            return HANDLERS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"densepipe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, OSError) as exc:
        print(f"densepipe {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # every termination path maps to 0/1/2
        log.exception("unexpected failure")
        print(f"densepipe {args.command}: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
