"""Command-line front end.

Verbs: synth-data, pretrain, finetune, evaluate, predict, surgery, advise,
version. Exit codes are a stable contract: 0 success, 1 runtime failure,
2 unknown verb, 3 missing/invalid flag, 4 malformed config. Training verbs
stream one JSON object per line: the fully resolved configuration first,
then one epoch report per epoch.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, snapshot, write_checkpoint
from .data import AugmentPolicy, decode_ppm, load_dataset
from .errors import EngineError
from .network import ArchProfile, build_backbone, graft_head, truncate_top
from .synthetic import SynthSpec, generate_synthetic
from .training import (
    TrainConfig,
    advise,
    evaluate,
    fine_tune,
    predict,
    pretrain,
    rebuild_from_checkpoint,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_UNKNOWN_VERB = 2
EXIT_MISSING_FLAG = 3
EXIT_MALFORMED_CONFIG = 4

VERBS = (
    "synth-data",
    "pretrain",
    "finetune",
    "evaluate",
    "predict",
    "surgery",
    "advise",
    "version",
)

USAGE = """usage: ftengine <verb> [options]

verbs:
  synth-data   generate a seeded synthetic dataset of PPM images
  pretrain     stage one: train a fresh backbone+head on a pretext dataset
  finetune     stage two: load a pretrained backbone, freeze it, train the head
  evaluate     score a checkpoint over a labeled dataset; write report + figures
  predict      classify a single PPM image with a checkpoint
  surgery      truncate the top of / graft a head onto a checkpoint
  advise       map (dataset size, similarity) to a transfer strategy
  version      print the package version

common options: --config FILE (JSON; explicit flags override it)
"""

# keys a JSON config document may carry; they mirror the config dataclasses
CONFIG_KEYS = {
    "n_ti": int,
    "n_vi": int,
    "b_size": int,
    "epochs": int,
    "optimizer": str,
    "seed": int,
    "freeze_pattern": (str, type(None)),
    "steps_per_epoch_mode": str,
    "lr": (int, float),
    "momentum": (int, float),
    "eps": (int, float),
    "input_shape": list,
    "block_conv_counts": list,
    "block_filters": list,
    "head": str,
    "width_divisor": int,
    "horizontal_flip_prob": (int, float),
    "rotation_max_deg": (int, float),
    "crop_fraction": (int, float),
    "enabled": bool,
    "classes": int,
    "per_class": int,
    "size": list,
    "similarity": (int, float),
}


class UsageError(Exception):
    def __init__(self, exit_code, message):
        super().__init__(message)
        self.exit_code = exit_code
        self.message = message


@dataclass
class Command:
    verb: str
    options: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); flag problems are 3
        raise UsageError(EXIT_MISSING_FLAG, f"ftengine {self.prog}: {message}")


def _add_train_flags(p):
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--b-size", dest="b_size", type=int)
    p.add_argument("--n-ti", dest="n_ti", type=int)
    p.add_argument("--n-vi", dest="n_vi", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--optimizer", choices=["sgd_momentum", "adagrad"])
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--steps-mode", dest="steps_per_epoch_mode",
                   choices=["train_count", "paper_literal"])
    p.add_argument("--no-augment", action="store_true", default=None)
    p.add_argument("--history")
    p.add_argument("--no-figures", action="store_true", default=None)
    _add_profile_flags(p)


def _add_profile_flags(p):
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--width-divisor", dest="width_divisor", type=int)


def _build_parsers():
    parsers = {}

    p = _Parser(prog="synth-data", add_help=False)
    p.add_argument("--out")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--size")
    p.add_argument("--similarity", type=float)
    p.add_argument("--seed", type=int)
    parsers["synth-data"] = (p, ["out"])

    p = _Parser(prog="pretrain", add_help=False)
    _add_train_flags(p)
    p.add_argument("--resume")
    parsers["pretrain"] = (p, ["train", "val", "out"])

    p = _Parser(prog="finetune", add_help=False)
    _add_train_flags(p)
    p.add_argument("--weights")
    p.add_argument("--freeze", dest="freeze_pattern")
    parsers["finetune"] = (p, ["train", "val", "out", "weights"])

    p = _Parser(prog="evaluate", add_help=False)
    p.add_argument("--data")
    p.add_argument("--weights")
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true", default=None)
    _add_profile_flags(p)
    parsers["evaluate"] = (p, ["data", "weights", "out"])

    p = _Parser(prog="predict", add_help=False)
    p.add_argument("--image")
    p.add_argument("--weights")
    p.add_argument("--out")
    parsers["predict"] = (p, ["image", "weights"])

    p = _Parser(prog="surgery", add_help=False)
    p.add_argument("--weights")
    p.add_argument("--out")
    p.add_argument("--truncate-top", dest="truncate_top", action="store_true", default=None)
    p.add_argument("--graft-head", dest="graft_head", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--head", choices=["none", "imagenet_top", "paper_head"])
    _add_profile_flags(p)
    parsers["surgery"] = (p, ["weights", "out"])

    p = _Parser(prog="advise", add_help=False)
    p.add_argument("--size", choices=["small", "large"])
    p.add_argument("--similarity", choices=["similar", "different"])
    parsers["advise"] = (p, ["size", "similarity"])

    p = _Parser(prog="version", add_help=False)
    parsers["version"] = (p, [])

    for p, _ in parsers.values():
        p.add_argument("--config", dest="_config_path", default=None)
    return parsers


_PARSERS = _build_parsers()


def _load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(EXIT_MALFORMED_CONFIG, f"ftengine: cannot read config: {e}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(EXIT_MALFORMED_CONFIG, f"ftengine: config is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise UsageError(EXIT_MALFORMED_CONFIG, "ftengine: config root must be an object")
    for key, value in doc.items():
        expect = CONFIG_KEYS.get(key)
        if expect is None:
            raise UsageError(EXIT_MALFORMED_CONFIG, f"ftengine: unknown config key {key!r}")
        if not isinstance(value, expect):
            raise UsageError(
                EXIT_MALFORMED_CONFIG,
                f"ftengine: config key {key!r} has wrong type {type(value).__name__}",
            )
    return doc


def parse_command(argv):
    """argv (without the program name) -> Command.

    Pure apart from reading the file named by --config. Raises UsageError
    with the documented exit codes on any problem.
    """
    if not argv or argv[0] in ("-h", "--help"):
        raise UsageError(EXIT_UNKNOWN_VERB if not argv else EXIT_OK, USAGE)
    verb = argv[0]
    if verb not in VERBS:
        raise UsageError(EXIT_UNKNOWN_VERB, f"ftengine: unknown verb {verb!r}\n{USAGE}")
    parser, required = _PARSERS[verb]
    ns = parser.parse_args(argv[1:])
    options = {k: v for k, v in vars(ns).items() if k != "_config_path"}
    config = _load_config(ns._config_path) if ns._config_path else {}
    missing = [name for name in required if options.get(name) is None]
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        raise UsageError(EXIT_MISSING_FLAG, f"ftengine {verb}: missing required flag(s): {flags}")
    return Command(verb=verb, options=options, config=config)


# ---------------------------------------------------------------------------
# resolution: defaults < config file < explicit flags


def _pick(options, config, key, default):
    if options.get(key) is not None:
        return options[key]
    if key in config:
        return config[key]
    return default


def _resolve_train_config(options, config):
    base = TrainConfig()
    overrides = {}
    for hp in ("lr", "momentum", "eps"):
        value = _pick(options, config, hp, None)
        if value is not None:
            overrides[hp] = value
    augment = AugmentPolicy(
        horizontal_flip_prob=_pick(options, config, "horizontal_flip_prob", 0.5),
        rotation_max_deg=_pick(options, config, "rotation_max_deg", 15.0),
        crop_fraction=_pick(options, config, "crop_fraction", 0.9),
        enabled=not options.get("no_augment") and config.get("enabled", True),
    )
    cfg = TrainConfig(
        n_ti=_pick(options, config, "n_ti", base.n_ti),
        n_vi=_pick(options, config, "n_vi", base.n_vi),
        b_size=_pick(options, config, "b_size", base.b_size),
        epochs=_pick(options, config, "epochs", base.epochs),
        optimizer=_pick(options, config, "optimizer", None),
        optimizer_overrides=overrides,
        seed=_pick(options, config, "seed", base.seed),
        freeze_pattern=_pick(options, config, "freeze_pattern", base.freeze_pattern),
        steps_per_epoch_mode=_pick(options, config, "steps_per_epoch_mode", base.steps_per_epoch_mode),
        augment=augment,
    )
    return cfg.validate()


def _resolve_profile(options, config, meta=None):
    if meta and "profile" in meta and options.get("input_size") is None and not any(
        k in config for k in ("input_shape", "block_conv_counts", "block_filters", "head", "width_divisor")
    ) and options.get("width_divisor") is None:
        return ArchProfile.from_dict(json.loads(meta["profile"]))
    base = ArchProfile()
    input_shape = tuple(config.get("input_shape", base.input_shape))
    if options.get("input_size") is not None:
        s = options["input_size"]
        input_shape = (s, s, 3)
    profile = ArchProfile(
        input_shape=input_shape,
        block_conv_counts=tuple(config.get("block_conv_counts", base.block_conv_counts)),
        block_filters=tuple(config.get("block_filters", base.block_filters)),
        head=options.get("head") or config.get("head", base.head),
        width_divisor=_pick(options, config, "width_divisor", base.width_divisor),
    )
    profile.validate()
    return profile


def _config_echo(verb, cfg, profile, extra=None):
    doc = {
        "verb": verb,
        "n_ti": cfg.n_ti,
        "n_vi": cfg.n_vi,
        "b_size": cfg.b_size,
        "epochs": cfg.epochs,
        "optimizer": cfg.optimizer,
        "optimizer_overrides": cfg.optimizer_overrides,
        "seed": cfg.seed,
        "freeze_pattern": cfg.freeze_pattern,
        "steps_per_epoch_mode": cfg.steps_per_epoch_mode,
        "augment_enabled": cfg.augment.enabled,
        "profile": profile.to_dict(),
    }
    if extra:
        doc.update(extra)
    return {"config": doc}


def _emit(obj):
    print(json.dumps(obj), flush=True)


# ---------------------------------------------------------------------------
# verb implementations


def _cmd_version(cmd):
    print(__version__)
    return EXIT_OK


def _cmd_advise(cmd):
    result = advise(cmd.options["size"], cmd.options["similarity"])
    _emit(result)
    return EXIT_OK


def _cmd_synth_data(cmd):
    opts, config = cmd.options, cmd.config
    size = opts.get("size")
    if size is not None:
        parts = size.lower().split("x")
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            raise UsageError(EXIT_MISSING_FLAG, "ftengine synth-data: --size must be HxW")
        size = [int(parts[0]), int(parts[1])]
    spec = SynthSpec(
        classes=_pick(opts, config, "classes", 2),
        per_class=_pick(opts, config, "per_class", 500),
        size=tuple(size if size is not None else config.get("size", (32, 32))),
        similarity=_pick(opts, config, "similarity", 0.8),
    ).validate()
    seed = _pick(opts, config, "seed", 0)
    generate_synthetic(spec, seed, opts["out"])
    _emit({
        "written": spec.classes * spec.per_class,
        "classes": spec.classes,
        "out": opts["out"],
        "seed": seed,
    })
    return EXIT_OK


def _run_training(cmd, stage):
    opts = cmd.options
    cfg = _resolve_train_config(opts, cmd.config)
    pretrained = load_checkpoint(opts["weights"]) if stage == "finetune" else None
    # finetune inherits the pretrained checkpoint's profile unless overridden
    profile = _resolve_profile(opts, cmd.config, pretrained.meta if pretrained else None)
    train_ds = load_dataset(opts["train"], profile.input_shape[:2])
    val_ds = load_dataset(opts["val"], profile.input_shape[:2])
    _emit(_config_echo(stage, cfg, profile, {"out": opts["out"]}))
    reports = []

    def on_report(r):
        reports.append(r)
        _emit(r.to_dict())

    if stage == "pretrain":
        resume = load_checkpoint(opts["resume"]) if opts.get("resume") else None
        best = pretrain(cfg, train_ds, val_ds, profile,
                        report_fn=on_report, checkpoint_path=opts["out"], resume_from=resume)
    else:
        best = fine_tune(cfg, train_ds, val_ds, pretrained, profile,
                         report_fn=on_report, checkpoint_path=opts["out"])
    write_checkpoint(best, opts["out"])
    _emit({"checkpoint": opts["out"], "best_val_loss": float(best.meta.get("val_loss", "nan"))})
    if opts.get("history"):
        from .reports import write_history_report

        written = write_history_report(reports, opts["history"], figures=not opts.get("no_figures"))
        _emit({"history": [str(p) for p in written]})
    return EXIT_OK


def _cmd_evaluate(cmd):
    opts = cmd.options
    ckpt = load_checkpoint(opts["weights"])
    net, class_names = rebuild_from_checkpoint(ckpt)
    ds = load_dataset(opts["data"], net.input_shape[:2])
    result = evaluate(net, ds)
    from .reports import write_evaluation_report

    written = write_evaluation_report(result, ds.class_names, opts["out"],
                                      figures=not opts.get("no_figures"))
    _emit({
        "accuracy": result["accuracy"],
        "mean_loss": result["mean_loss"],
        "items": len(result["records"]),
        "report": [str(p) for p in written],
    })
    return EXIT_OK


def _cmd_predict(cmd):
    opts = cmd.options
    ckpt = load_checkpoint(opts["weights"])
    net, class_names = rebuild_from_checkpoint(ckpt)
    path = Path(opts["image"])
    try:
        image = decode_ppm(path.read_bytes())
    except EngineError as e:
        raise type(e)(f"{path}: {e}") from e
    record = predict(net, image, class_names, item_id=path.name)
    _emit(record.to_dict())
    if opts.get("out"):
        from .reports import write_records_csv

        out = Path(opts["out"])
        if out.suffix.lower() == ".csv":
            write_records_csv([record], out)
        else:
            out.write_text(json.dumps(record.to_dict(), indent=2) + "\n")
    return EXIT_OK


def _cmd_surgery(cmd):
    opts = cmd.options
    ckpt = load_checkpoint(opts["weights"])
    profile = _resolve_profile(opts, cmd.config, ckpt.meta)
    seed = opts.get("seed") if opts.get("seed") is not None else 0
    net = build_backbone(profile, seed=seed)
    from .checkpoint import apply_checkpoint

    loaded = apply_checkpoint(net, ckpt, strict=False)
    ops = []
    if opts.get("truncate_top"):
        net = truncate_top(net)
        profile = replace(profile, head="none")
        ops.append("truncate_top")
    if opts.get("graft_head") is not None:
        net = graft_head(net, opts["graft_head"], seed=seed)
        profile = replace(profile, head="paper_head")
        ops.append(f"graft_head:{opts['graft_head']}")
    meta = {
        "stage": "surgery",
        "ops": ",".join(ops) if ops else "none",
        "seed": str(seed),
        "profile": json.dumps(profile.to_dict()),
    }
    if "class_names" in ckpt.meta and opts.get("graft_head") is None:
        meta["class_names"] = ckpt.meta["class_names"]
    elif opts.get("graft_head") is not None:
        meta["class_names"] = json.dumps(
            [f"class{i:02d}" for i in range(opts["graft_head"])]
        )
    write_checkpoint(snapshot(net, meta), opts["out"])
    _emit({"out": opts["out"], "ops": ops, "tensors_loaded": loaded,
           "parameters": sum(t.size for t in net.params.values())})
    return EXIT_OK


_DISPATCH = {
    "synth-data": _cmd_synth_data,
    "pretrain": lambda cmd: _run_training(cmd, "pretrain"),
    "finetune": lambda cmd: _run_training(cmd, "finetune"),
    "evaluate": _cmd_evaluate,
    "predict": _cmd_predict,
    "surgery": _cmd_surgery,
    "advise": _cmd_advise,
    "version": _cmd_version,
}


def run_command(cmd):
    """Dispatch a parsed command; engine failures become exit 1 with a
    single-line diagnostic on stderr."""
    try:
        return _DISPATCH[cmd.verb](cmd)
    except UsageError as e:
        print(e.message, file=sys.stderr)
        return e.exit_code
    except (EngineError, OSError) as e:
        print(f"ftengine {cmd.verb}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv=None):
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        cmd = parse_command(argv)
    except UsageError as e:
        stream = sys.stdout if e.exit_code == EXIT_OK else sys.stderr
        print(e.message, file=stream)
        return e.exit_code
    return run_command(cmd)


if __name__ == "__main__":
    sys.exit(main())
