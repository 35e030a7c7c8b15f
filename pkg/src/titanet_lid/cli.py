"""Command line entry point: ``titanet-lid {synth,train,finetune,eval,params,infer}``.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
A ``--config FILE`` of ``key = value`` lines overrides built-in defaults and is
itself overridden by flags given on the command line.
"""
import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from titanet_lid import __version__
from titanet_lid.errors import ConfigError, TitanetLidError

log = logging.getLogger("titanet_lid")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- argument helpers

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _int_list(text):
    try:
        vals = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _float_list(text):
    try:
        vals = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"expected positive numbers, got {text!r}")
    return vals


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Dashes in keys map to underscores."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _apply_config_file(parser, sub, argv):
    """Re-parse with config-file values installed as the subparser's defaults."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    values = read_config_file(args.config)
    actions = {a.dest: a for a in sub[args.command]._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"{args.config}: unknown key {key!r} for '{args.command}'")
        if isinstance(action, argparse._CountAction):
            defaults[key] = int(raw)
        elif action.nargs == 0:
            # Keys name the destination, so "speed_perturb = false" means what it says.
            defaults[key] = _bool(raw)
        else:
            conv = action.type or str
            try:
                defaults[key] = conv(raw)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{args.config}: bad value for {key!r}: {exc}") from None
            if action.choices is not None and defaults[key] not in action.choices:
                raise UsageError(f"{args.config}: {key} must be one of {sorted(action.choices)}")
    sub[args.command].set_defaults(**defaults)
    return parser.parse_args(argv)


def _common(p):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=_positive_int, default=1,
                   help="worker threads for feature extraction (optimizer step stays serial)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")


def _model_args(p, defaults=(3, 2, 64)):
    p.add_argument("--B", type=_positive_int, default=defaults[0], help="mega-blocks")
    p.add_argument("--R", type=_positive_int, default=defaults[1], help="sub-blocks per mega-block")
    p.add_argument("--C", type=_positive_int, default=defaults[2], help="channels")
    p.add_argument("--epilogue-channels", type=_positive_int, default=3072)
    p.add_argument("--hidden-dim", type=_positive_int, default=512)
    p.add_argument("--dropout", type=float, default=0.0, help="encoder dropout probability")


def _train_args(p, epochs, fine_tune=False):
    p.add_argument("--epochs", type=_positive_int, default=epochs)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr-max", type=_positive_float, default=1e-3)
    p.add_argument("--lr-min", type=_positive_float, default=1e-4)
    p.add_argument("--warmup-ratio", type=float, default=0.10)
    p.add_argument("--fine-tune-lr-peak", type=_positive_float, default=5e-5)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--no-speed-perturb", dest="speed_perturb", action="store_false")
    if fine_tune:
        p.add_argument("--spec-augment", dest="spec_augment", action="store_true")
    else:
        p.add_argument("--no-spec-augment", dest="spec_augment", action="store_false")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="per-epoch history (NDJSON); default: <out>.history.ndjson")
    p.add_argument("--dry-run", action="store_true", help="log the resolved configuration and stop")


def build_parser():
    parser = argparse.ArgumentParser(prog="titanet-lid", description="Spoken language identification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)
    sub = {}

    p = sub["synth"] = subs.add_parser("synth", help="generate a synthetic toy-language corpus")
    _common(p)
    p.add_argument("--langs", type=int, required=True)
    p.add_argument("--per-lang", type=_positive_int, required=True)
    p.add_argument("--duration", type=_positive_float, default=4.0, help="seconds per item")
    p.add_argument("--first-lang", type=int, default=0, help="index of the first language")
    p.add_argument("--val-fraction", type=float, default=0.10)
    p.add_argument("--test-fraction", type=float, default=0.10)
    p.add_argument("--out", required=True, help="output directory")

    p = sub["train"] = subs.add_parser("train", help="train from scratch")
    _common(p)
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--val", required=True, help="validation manifest")
    _model_args(p)
    _train_args(p, epochs=40)

    p = sub["finetune"] = subs.add_parser("finetune", help="new head on a frozen pre-trained encoder")
    _common(p)
    p.add_argument("--ckpt", required=True, help="pre-trained checkpoint")
    p.add_argument("--train", required=True, help="fine-tuning manifest")
    p.add_argument("--extra-train", action="append", default=[], help="additional manifest (repeatable)")
    p.add_argument("--val", help="validation manifest (default: 10%% split of the training data)")
    p.add_argument("--classes", type=_positive_int, help="new number of classes (default: label union size)")
    p.add_argument("--decoder-dropout", type=float, default=0.1)
    p.add_argument("--verify-frozen", action="store_true",
                   help="check encoder tensors are bit-identical after fine-tuning")
    _train_args(p, epochs=10, fine_tune=True)

    p = sub["eval"] = subs.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--length-sweep", type=_float_list, help="comma-separated window lengths in seconds")
    p.add_argument("--stride", type=_positive_float, default=2.0)
    p.add_argument("--top-confusions", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int, default=16)
    p.add_argument("--out", help="write the report as JSON here")
    p.add_argument("--sweep-out", help="write the length sweep as CSV here")

    p = sub["params"] = subs.add_parser("params", help="parameter counts (formula and built model)")
    _common(p)
    p.add_argument("--B", type=_int_list, default=[3])
    p.add_argument("--R", type=_int_list, default=[5], help="one value or a comma-separated sweep")
    p.add_argument("--C", type=_int_list, default=[1024], help="one value or a comma-separated sweep")
    p.add_argument("--classes", type=_positive_int, default=107)
    p.add_argument("--epilogue-channels", type=_positive_int, default=3072)
    p.add_argument("--formula-only", action="store_true", help="skip building the weights")

    p = sub["infer"] = subs.add_parser("infer", help="classify one WAV file")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--top", type=_positive_int, default=5)
    return parser, sub


# --------------------------------------------------------------------------- commands

def _require_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _log_config(command, cfg):
    log.info("resolved configuration for %s:", command)
    for key in sorted(cfg):
        log.info("  %s = %s", key, cfg[key])


def _train_config(args, epochs):
    from titanet_lid.training import TrainConfig
    return TrainConfig(
        epochs=epochs, batch_size=args.batch_size, lr_max=args.lr_max, lr_min=args.lr_min,
        warmup_ratio=args.warmup_ratio, fine_tune_lr_peak=args.fine_tune_lr_peak,
        weight_decay=args.weight_decay, seed=args.seed, speed_perturb=args.speed_perturb,
        spec_augment=args.spec_augment, workers=args.threads,
    )


def _write_outputs(result, args):
    from titanet_lid.training import save_checkpoint, write_history
    save_checkpoint(result.best, args.out)
    history = args.history or f"{args.out}.history.ndjson"
    write_history(result.history, history)
    print(f"best epoch {result.best.metrics['epoch']}: val macro accuracy "
          f"{100 * result.best.metrics['val_macro_acc']:.2f}%")
    print(f"checkpoint: {args.out}")
    print(f"history:    {history}")


def cmd_synth(args):
    from titanet_lid.corpus import save_manifest, split_train_val, synth_corpus
    if args.langs < 2:
        raise UsageError("--langs must be at least 2")
    for name in ("val_fraction", "test_fraction"):
        if not 0.0 < getattr(args, name) < 1.0:
            raise UsageError(f"--{name.replace('_', '-')} must be in (0, 1)")
    if args.first_lang < 0:
        raise UsageError("--first-lang must be >= 0")
    _log_config("synth", vars(args))
    out = Path(args.out)
    ds = synth_corpus(out, args.langs, args.per_lang, args.duration, seed=args.seed,
                      first_lang=args.first_lang)
    rest, test = split_train_val(ds, args.test_fraction, args.seed)
    train, val = split_train_val(rest, args.val_fraction, args.seed + 1)
    for name, part in (("train", train), ("val", val), ("test", test)):
        save_manifest(part, out / f"{name}.manifest")
    print(f"{len(ds)} files in {out / 'wav'}")
    print(f"train {len(train)}  val {len(val)}  test {len(test)}")
    return 0


def cmd_train(args):
    from titanet_lid.corpus import load_manifest
    from titanet_lid.model import ModelConfig, build_model
    from titanet_lid.training import class_weights, fit
    _require_file(args.train, "train manifest")
    _require_file(args.val, "validation manifest")
    train_set, val_set = load_manifest(args.train), load_manifest(args.val)
    labels = train_set.label_set
    model_cfg = ModelConfig(num_blocks=args.B, repeats=args.R, channels=args.C,
                            epilogue_channels=args.epilogue_channels, hidden_dim=args.hidden_dim,
                            dropout_p=args.dropout, num_classes=len(labels))
    model_cfg.validate()
    cfg = _train_config(args, args.epochs)
    weights = class_weights(train_set.count_vector(labels), labels)
    resolved = {**cfg.to_dict(), **{f"model.{k}": v for k, v in model_cfg.to_dict().items()},
                "labels": labels, "class_weights": [round(w, 6) for w in weights.weights],
                "train": args.train, "val": args.val, "out": args.out}
    _log_config("train", resolved)
    if args.dry_run:
        return 0
    model = build_model(model_cfg, seed=args.seed)
    log.info("model %s: %d parameters", model_cfg.name, model.count_params())
    result = fit(model, train_set, val_set, cfg, mode="pretrain", labels=labels)
    _write_outputs(result, args)
    return 0


def cmd_finetune(args):
    from titanet_lid.corpus import load_manifest, split_train_val, union
    from titanet_lid.model import freeze_encoder, replace_head
    from titanet_lid.training import class_weights, fit, load_checkpoint
    _require_file(args.ckpt, "checkpoint")
    for path in [args.train] + args.extra_train + ([args.val] if args.val else []):
        _require_file(path, "manifest")
    if not 0.0 <= args.decoder_dropout < 1.0:
        raise UsageError("--decoder-dropout must be in [0, 1)")
    ckpt = load_checkpoint(args.ckpt)
    pooled = load_manifest(args.train)
    for path in args.extra_train:
        pooled = union(pooled, load_manifest(path))
    if args.val:
        train_set, val_set = pooled, load_manifest(args.val)
    else:
        train_set, val_set = split_train_val(pooled, 0.10, args.seed)
    labels = train_set.label_set
    k = args.classes if args.classes is not None else len(labels)
    if k < len(labels):
        raise UsageError(f"--classes {k} is smaller than the {len(labels)} labels in the manifests")
    if k != len(labels):
        raise UsageError(f"--classes {k} does not match the {len(labels)} labels in the manifests")
    cfg = _train_config(args, args.epochs)
    cfg.fine_tune_dropout = args.decoder_dropout
    weights = class_weights(train_set.count_vector(labels), labels)
    schedule = cfg.for_finetune()
    resolved = {**cfg.to_dict(), "schedule.lr_max": schedule.lr_max, "schedule.lr_min": schedule.lr_min,
                "labels": labels, "class_weights": [round(w, 6) for w in weights.weights],
                "base_checkpoint": args.ckpt, "base_model": ckpt.model_config.name,
                "train": [args.train] + args.extra_train, "val": args.val or "10% split", "out": args.out}
    _log_config("finetune", resolved)
    if args.dry_run:
        return 0
    model = freeze_encoder(replace_head(ckpt.to_model(), k, seed=args.seed))
    before = {n: model.params[n].data.copy() for n in model.encoder_names}
    result = fit(model, train_set, val_set, cfg, mode="finetune", labels=labels)
    _write_outputs(result, args)
    if args.verify_frozen:
        changed = [n for n in before
                   if not np.array_equal(before[n], result.model.params[n].data)
                   or not np.array_equal(before[n].astype(np.float32), result.best.params[n])]
        if changed:
            print(f"encoder changed during fine-tuning: {changed}", file=sys.stderr)
            return 1
        print(f"encoder frozen: verified ({len(before)} tensors bit-identical)")
    return 0


def cmd_eval(args):
    from titanet_lid.corpus import load_manifest
    from titanet_lid.evaluation import evaluate, length_sweep, sweep_csv, top_confusions
    from titanet_lid.training import load_checkpoint
    _require_file(args.ckpt, "checkpoint")
    _require_file(args.test, "test manifest")
    _log_config("eval", vars(args))
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.to_model()
    dataset = load_manifest(args.test)
    report = evaluate(model, dataset, ckpt.label_set, batch_size=args.batch_size)
    print(report.summary())
    if args.top_confusions:
        rows = top_confusions(report, args.top_confusions)
        print(f"top confusions (true -> predicted, count), {len(rows)} row(s):")
        for t, p, c in rows:
            print(f"  {t} -> {p}  {c}")
    if args.out:
        Path(args.out).write_text(report.to_text() + "\n", encoding="utf-8")
    if args.length_sweep:
        sweep = length_sweep(model, dataset, ckpt.label_set, args.length_sweep, args.stride,
                             batch_size=args.batch_size)
        print("length_s  windows  error")
        for L in args.length_sweep:
            r = sweep.get(L)
            if r is None:
                print(f"{L:8g}  {0:7d}  n/a")
            else:
                print(f"{L:8g}  {r['n']:7d}  {100 * r['error_rate']:.2f}%")
        if args.sweep_out:
            Path(args.sweep_out).write_text(sweep_csv(sweep), encoding="utf-8")
    return 0


def cmd_params(args):
    from titanet_lid.model import ModelConfig, build_model, param_count_formula
    _log_config("params", vars(args))
    print(f"{'config':<14}{'formula':>14}{'runtime':>14}{'millions':>10}")
    for b in args.B:
        for r in args.R:
            for c in args.C:
                cfg = ModelConfig(num_blocks=b, repeats=r, channels=c, num_classes=args.classes,
                                  epilogue_channels=args.epilogue_channels)
                cfg.validate()
                formula = param_count_formula(cfg)
                runtime = "-" if args.formula_only else build_model(cfg, seed=args.seed).count_params()
                if runtime != "-" and runtime != formula:
                    print(f"formula/runtime disagree for {cfg.name}: {formula} vs {runtime}", file=sys.stderr)
                    return 1
                print(f"{cfg.name:<14}{formula:>14,}{str(runtime if runtime == '-' else f'{runtime:,}'):>14}"
                      f"{formula / 1e6:>9.2f}M")
    return 0


def cmd_infer(args):
    from titanet_lid.audio import read_wav
    from titanet_lid.evaluation import predict_utterance
    from titanet_lid.training import load_checkpoint
    _require_file(args.ckpt, "checkpoint")
    _require_file(args.wav, "wav file")
    ckpt = load_checkpoint(args.ckpt)
    audio = read_wav(args.wav)
    label, post = predict_utterance(ckpt.to_model(), audio, ckpt.label_set)
    print(f"predicted: {label}")
    for i in np.argsort(-post, kind="stable")[:args.top]:
        print(f"  {ckpt.label_set[i]:<12} {post[i]:.4f}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "finetune": cmd_finetune,
            "eval": cmd_eval, "params": cmd_params, "infer": cmd_infer}


def main(argv=None):
    parser, sub = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config_file(parser, sub, argv)
    except (UsageError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"titanet-lid: error: {exc}", file=sys.stderr)
        return 2
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    started = time.perf_counter()
    try:
        code = COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        sub[args.command].print_usage(sys.stderr)
        print(f"titanet-lid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TitanetLidError, OSError, ValueError, RuntimeError) as exc:
        print(f"titanet-lid {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
