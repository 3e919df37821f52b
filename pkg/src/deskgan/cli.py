"""Command-line surface: gen-data, train, sample, metrics, attn-viz,
train-classifier, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

logger = logging.getLogger(__name__)


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _Usage(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="deskgan",
                description="Desk-scale GAN stack: self-attention blocks, spectral "
                            "normalization, hinge loss, two-timescale Adam.")
    sub = p.add_subparsers(dest="command", metavar="command")

    d = sub.add_parser("gen-data", help="generate a synthetic long-range dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--resolution", type=int, default=16)
    d.add_argument("--classes", type=int, default=4)
    d.add_argument("--per-class", type=int, default=500)
    d.add_argument("--rule", default="corner_color_match",
                   choices=("corner_color_match", "mirrored_blobs", "ring_pairs"))
    d.add_argument("--noise", type=float, default=0.03)
    d.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")
    t.add_argument("--data", help="dataset directory (overrides config)")
    t.add_argument("--out", help="output directory (overrides config)")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--extractor", help="pinned extractor checkpoint for metrics")
    t.add_argument("--resume", help="checkpoint to resume from")

    s = sub.add_parser("sample", help="sample images from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="output .ppm grid path")
    s.add_argument("--n", type=int, default=8, help="images per class")
    s.add_argument("--class", dest="cls", default="all",
                   help="class index or 'all'")
    s.add_argument("--seed", type=int, default=0)

    m = sub.add_parser("metrics", help="FID / inception-style score / intra-FID")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--extractor", required=True)
    m.add_argument("--out", required=True, help="output directory for reports")
    m.add_argument("--n", type=int, default=512, help="total fake samples")
    m.add_argument("--per-class", type=int, default=128, help="intra-FID samples per class")
    m.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("attn-viz", help="export attention-map overlays")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--queries", default="2,2;13,13",
                   help="semicolon-separated row,col query points")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--class", dest="cls", type=int, default=0)
    v.add_argument("--images", type=int, default=1)

    c = sub.add_parser("train-classifier", help="train and pin the metric extractor")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True, help="output checkpoint path")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--steps", type=int, default=600)

    a = sub.add_parser("ablate", help="stability matrix / block-insertion sweep")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True, help="output CSV path")
    a.add_argument("--mode", choices=("insertion", "stability"), default="insertion")
    a.add_argument("--stages", default="16", help="comma-separated stage resolutions")
    a.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    a.add_argument("--iterations", type=int, default=5000)
    a.add_argument("--batch-size", type=int, default=64)
    a.add_argument("--extractor", help="pinned extractor checkpoint")
    a.add_argument("--config", help="base config file")
    return p


def _load_trainer_config(args) -> "TrainerConfig":
    from .trainer import TrainerConfig

    if args.config:
        cfg = TrainerConfig.from_file(args.config)
    else:
        cfg = TrainerConfig()
    overrides = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise _Usage(f"--set expects KEY=VALUE, got {item!r}")
        k, _, v = item.partition("=")
        overrides[k.strip()] = v.strip()
    if overrides:
        flat = cfg.to_flat_dict()
        flat.update(overrides)
        cfg = TrainerConfig.from_flat_dict(flat)
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "iterations", None) is not None:
        cfg.total_iterations = args.iterations
    if getattr(args, "extractor", None):
        cfg.extractor_path = args.extractor
    return cfg


def _cmd_gen_data(args) -> int:
    from .data import SyntheticSpec, generate_dataset

    spec = SyntheticSpec(resolution=args.resolution, num_classes=args.classes,
                         samples_per_class=args.per_class, long_range_rule=args.rule,
                         noise_level=args.noise, seed=args.seed)
    out = generate_dataset(spec, args.out)
    print(f"wrote {spec.num_classes * spec.samples_per_class} images to {out}")
    return 0


def _cmd_train(args) -> int:
    from .data import load_dataset
    from .metrics import load_extractor
    from .trainer import Trainer, TrainingHalted

    cfg = _load_trainer_config(args)
    if not cfg.data_dir:
        raise _Usage("train needs --data or a config with data_dir")
    images, labels, _ = load_dataset(cfg.data_dir)
    extractor = load_extractor(cfg.extractor_path) if cfg.extractor_path else None
    trainer = Trainer(cfg, (images, labels), extractor=extractor)
    if args.resume:
        trainer.load(args.resume)
        print(f"resumed from {args.resume} at iteration {trainer.iteration}")
    try:
        log = trainer.run()
    except TrainingHalted as halt:
        print(f"HALTED: {halt}", file=sys.stderr)
        return 2
    if log.rows:
        last = log.rows[-1]
        print(f"done: iter={last[0]} d_loss={last[1]:.4f} g_loss={last[2]:.4f} "
              f"fid={last[3]:.3f}")
    return 0


def _cmd_sample(args) -> int:
    from .viz import _generator_from_checkpoint, save_image_grid
    from .models import sample

    gen, cfg = _generator_from_checkpoint(args.checkpoint)
    images, _ = sample(gen, args.n, args.cls if args.cls == "all" else int(args.cls),
                       args.seed)
    save_image_grid(args.out, images.data, cols=args.n)
    print(f"wrote {images.shape[0]} samples to {args.out}")
    return 0


def _cmd_metrics(args) -> int:
    from .data import load_dataset
    from .metrics import (load_extractor, generator_metrics, intra_fid,
                          write_metric_reports)
    from .viz import _generator_from_checkpoint

    gen, _ = _generator_from_checkpoint(args.checkpoint)
    images, labels, _ = load_dataset(args.data)
    ext = load_extractor(args.extractor)
    summary = generator_metrics(gen, ext, images, args.n, args.seed)
    per_class = intra_fid(gen, ext, (images, labels), args.per_class, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    write_metric_reports(os.path.join(args.out, "metrics.csv"),
                         os.path.join(args.out, "metrics.json"), summary, per_class)
    print(f"fid={summary['fid']:.3f} is={summary['is_mean']:.3f}±{summary['is_std']:.3f} "
          f"intra_fid={ {k: round(v, 2) for k, v in per_class.items()} }")
    return 0


def _cmd_attn_viz(args) -> int:
    from .viz import export_attention_figure

    queries = []
    for part in args.queries.split(";"):
        r, c = part.split(",")
        queries.append((int(r), int(c)))
    written = export_attention_figure(args.checkpoint, args.seed, queries, args.out,
                                      cls=args.cls, n_images=args.images)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def _cmd_train_classifier(args) -> int:
    from .data import load_dataset
    from .metrics import train_feature_extractor, save_extractor

    images, labels, spec = load_dataset(args.data)
    ext, acc = train_feature_extractor(images, labels, int(labels.max()) + 1,
                                       seed=args.seed, steps=args.steps)
    digest = save_extractor(args.out, ext, acc,
                            dataset_info={"rule": spec.long_range_rule,
                                          "seed": spec.seed,
                                          "resolution": spec.resolution})
    print(f"extractor val_accuracy={acc:.4f} sha256={digest[:16]}… -> {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    from .ablate import (run_insertion_sweep, run_stability_matrix, write_rows_csv,
                         INSERTION_FIELDS, STABILITY_FIELDS)
    from .data import load_dataset
    from .metrics import load_extractor

    cfg = _load_trainer_config(args)
    cfg.data_dir = args.data
    cfg.total_iterations = args.iterations
    cfg.batch_size = args.batch_size
    images, labels, _ = load_dataset(args.data)
    extractor = load_extractor(args.extractor) if args.extractor else None
    seeds = tuple(int(s) for s in args.seeds.split(","))
    if args.mode == "stability":
        rows = run_stability_matrix(cfg, (images, labels), extractor, seeds=seeds)
        write_rows_csv(args.out, rows, STABILITY_FIELDS)
    else:
        stages = tuple(int(s) for s in args.stages.split(","))
        rows = run_insertion_sweep(cfg, (images, labels), extractor,
                                   stages=stages, seeds=seeds)
        write_rows_csv(args.out, rows, INSERTION_FIELDS)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "metrics": _cmd_metrics,
    "attn-viz": _cmd_attn_viz,
    "train-classifier": _cmd_train_classifier,
    "ablate": _cmd_ablate,
}


def cli_dispatch(argv) -> int:
    logging.basicConfig(level=os.environ.get("DESKGAN_LOGLEVEL", "INFO"),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _Usage as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help paths
        return 0 if e.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _Usage as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
