"""Command-line entry point: ``vidmil {synth,train,eval,ablate,viz}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime abort.
Every output file lands under ``--out`` and carries the config hash.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .backbone import build_extractor
from .config import RunConfig, load_config
from .data import carve_validation, class_histogram, generate_dataset, split_train_test
from .errors import ConfigError, ContractViolation, InfeasibleSplitError, TrainingDivergedError
from .io import load_dataset, save_dataset
from .metrics import (confusion_matrix, evaluate, export_attention, localization_score,
                      write_metrics_table, write_records)
from .model import VARIANT_NAMES
from .training import Checkpoint, predict_records, subsample_uniform, train

EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _load(args) -> RunConfig:
    config = load_config(args.config, seed=args.seed)
    if getattr(args, "variant", None):
        config.model = replace(config.model, variant=args.variant)
    return config


def _out_dir(args, config) -> Path:
    out = Path(args.out or config.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_dir(config: RunConfig, out: Path) -> Path:
    if config.data.path:
        return Path(config.data.path)
    return out / f"dataset_{config.data_hash()}"


def _extractor(config: RunConfig, bags):
    if any(b.frames is not None for b in bags):
        return build_extractor(config.backbone.kind, **config.backbone.extractor_kwargs(config.seed))
    return None


def _splits(config: RunConfig, bags):
    train_set, test_set = split_train_test(bags, config.data.train_fraction, config.seed)
    train_set, val_set = carve_validation(train_set, config.data.val_fraction, config.seed)
    return train_set, val_set, test_set


def _load_bags(config, out):
    directory = _dataset_dir(config, out)
    try:
        return load_dataset(directory)
    except FileNotFoundError:
        raise ConfigError(f"dataset not found at {directory}; run `vidmil synth` first") from None


def cmd_synth(args) -> int:
    config = _load(args)
    out = _out_dir(args, config)
    gen = config.data.synthetic(config.seed)
    bags = generate_dataset(gen)
    directory = _dataset_dir(config, out)
    manifest = save_dataset(bags, directory, generator_config=asdict(gen))
    hist = class_histogram(bags)
    print(f"wrote {len(bags)} videos to {manifest}")
    print("class histogram: " + " ".join(f"{c}:{n}" for c, n in enumerate(hist.tolist())))
    print(f"videos without labels: {sum(1 for b in bags if not b.video_label)}")
    return 0


def _train_one(config, variant, train_set, val_set, extractor, log_path=None, training=None):
    log_fh = open(log_path, "w") if log_path else None
    try:
        def log(rec):
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()

        model_config = replace(config.model, variant=variant)
        return train(training or config.training, variant, train_set, val_set, model_config, extractor, log=log)
    finally:
        if log_fh:
            log_fh.close()


def cmd_train(args) -> int:
    config = _load(args)
    out = _out_dir(args, config)
    bags = _load_bags(config, out)
    train_set, val_set, _ = _splits(config, bags)
    variant = config.model.variant
    tag = f"{variant}_{config.hash()}"
    ckpt = _train_one(config, variant, train_set, val_set, _extractor(config, bags), out / f"trainlog_{tag}.jsonl")
    ckpt.extra = {"config": config.to_dict(), "config_hash": config.hash()}
    path = ckpt.save(out / f"checkpoint_{tag}.npz")
    print(f"best epoch {ckpt.epoch} (val loss {ckpt.val_loss:.6f}); checkpoint {path}")
    return 0


def _eval_records(config, ckpt, bags, subset):
    model = ckpt.build_model()
    return predict_records(model, subset, config.training, _extractor(config, bags))


def _load_checkpoint(path) -> Checkpoint:
    if not path or not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def cmd_eval(args) -> int:
    config = _load(args)
    out = _out_dir(args, config)
    ckpt = _load_checkpoint(args.checkpoint)
    bags = _load_bags(config, out)
    _, _, test_set = _splits(config, bags)
    records = _eval_records(config, ckpt, bags, test_set)
    table = evaluate(records)
    loc = localization_score(records, config.evaluation.top_k)
    tag = f"{ckpt.hparams['variant']}_{config.hash()}"
    write_metrics_table({ckpt.hparams["variant"]: table.row("macro")}, out / f"metrics_{tag}")
    write_records(records, out / f"records_{tag}.jsonl")
    detail = {
        **table.to_json(),
        "localization": asdict(loc),
        "confusion_matrix": confusion_matrix(records).tolist(),
    }
    (out / f"eval_{tag}.json").write_text(json.dumps(detail, indent=2, sort_keys=True) + "\n")
    m = table.macro
    print(f"{ckpt.hparams['variant']}: precision {m['precision']:.3f} recall {m['recall']:.3f} "
          f"F1 {m['f1']:.3f} specificity {m['specificity']:.3f} accuracy {m['accuracy']:.3f}")
    print(f"localization: argmax hit {loc.argmax_hit_rate:.3f}, top-{config.evaluation.top_k} "
          f"{loc.topk_hit_rate:.3f}, attention on positive {loc.mean_attention_on_positive:.3f}")
    return 0


def cmd_ablate(args) -> int:
    config = _load(args)
    out = _out_dir(args, config)
    bags = _load_bags(config, out)
    train_set, val_set, test_set = _splits(config, bags)
    extractor = _extractor(config, bags)
    seeds = config.evaluation.seeds or [config.seed]
    rows, runs = {}, []
    for variant in VARIANT_NAMES:
        per_seed = []
        for s in seeds:
            training = replace(config.training, seed=int(s))
            ckpt = _train_one(config, variant, train_set, val_set, extractor, training=training)
            records = _eval_records(config, ckpt, bags, test_set)
            row = evaluate(records).row("macro")
            per_seed.append(row)
            runs.append({"variant": variant, "seed": int(s), "best_epoch": ckpt.epoch, **row})
        rows[variant] = {c: statistics.median(r[c] for r in per_seed) for c in per_seed[0]}
    stem = out / f"ablation_{config.hash()}"
    write_metrics_table(rows, stem)
    (out / f"ablation_{config.hash()}_runs.json").write_text(json.dumps(runs, indent=2, sort_keys=True) + "\n")
    print(stem.with_suffix(".csv").read_text(), end="")
    return 0


def cmd_viz(args) -> int:
    config = _load(args)
    out = _out_dir(args, config)
    ckpt = _load_checkpoint(args.checkpoint)
    bags = _load_bags(config, out)
    match = [b for b in bags if b.id == args.video_id]
    if not match:
        raise ConfigError(f"unknown video id {args.video_id!r}")
    bag = match[0]
    (record,) = _eval_records(config, ckpt, bags, [bag])
    frames = None
    if bag.frames is not None:
        frames = subsample_uniform(bag, config.training.sequence_length).frames
    paths = export_attention(record, out / f"viz_{config.hash()}", frames=frames)
    print(f"alpha -> {paths['alpha']}; {len(paths['frames'])} encoded frames")
    print("alpha: " + " ".join(f"{a:.3f}" for a in record.alpha))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidmil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML/JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (default: output.out_dir)")

    p = sub.add_parser("synth", help="generate a synthetic planted-signal dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model variant")
    common(p)
    p.add_argument("--variant", choices=VARIANT_NAMES, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all five variants")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("viz", help="export attention weights and encoded frames for one video")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video-id", required=True)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractViolation, InfeasibleSplitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, OSError, RuntimeError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
