"""Ablation harness: the stabilization 2×2 matrix and the block-insertion
sweep, each emitting one CSV row per (config, seed) with no silent skips."""

from __future__ import annotations

import copy
import logging
from dataclasses import replace

import numpy as np

from .data import mean_cross_corner_correlation
from .losses import TTURConfig
from .metrics import generator_metrics
from .models import sample, block_parameter_report
from .trainer import Trainer, TrainerConfig, TrainingHalted

logger = logging.getLogger(__name__)

STABILITY_CONFIGS = (
    ("sn_d_only+equal", False, True, False),
    ("sn_d_only+ttur", False, True, True),
    ("sn_gd+equal", True, True, False),
    ("sn_gd+ttur", True, True, True),
)

INSERTION_FIELDS = ("variant", "stage", "seed", "halted", "halt_iter",
                    "fid", "is_mean", "hue_corr", "g_params", "d_params")
STABILITY_FIELDS = ("config", "seed", "halted", "halt_iter",
                    "final_fid", "best_fid", "gap")


def _with(cfg: TrainerConfig, **kw) -> TrainerConfig:
    out = copy.deepcopy(cfg)
    for k, v in kw.items():
        setattr(out, k, v)
    out.__post_init__()
    return out


def _train_one(cfg: TrainerConfig, dataset, extractor) -> tuple[Trainer, object, bool, int]:
    trainer = Trainer(cfg, dataset, extractor=extractor)
    try:
        log = trainer.run()
        return trainer, log, False, -1
    except TrainingHalted as halt:
        logger.warning("run halted: %s", halt)
        return trainer, halt.log, True, halt.iteration


def run_stability_matrix(base_cfg: TrainerConfig, dataset, extractor,
                         seeds=(0, 1, 2), equal_lr: float = 0.0002) -> list[dict]:
    """SN placement × learning-rate schedule, 1:1 updates throughout."""
    rows = []
    for name, sn_g, sn_d, ttur in STABILITY_CONFIGS:
        for seed in seeds:
            lrs = TTURConfig() if ttur else TTURConfig.equal_rates(equal_lr)
            cfg = _with(base_cfg, seed=seed, sn_on_generator=sn_g,
                        sn_on_discriminator=sn_d, ttur=lrs)
            _, log, halted, halt_iter = _train_one(cfg, dataset, extractor)
            fids = [f for _, f in log.fid_series()]
            final_fid = fids[-1] if fids else float("nan")
            best_fid = min(fids) if fids else float("nan")
            rows.append({"config": name, "seed": seed, "halted": halted,
                         "halt_iter": halt_iter, "final_fid": final_fid,
                         "best_fid": best_fid,
                         "gap": final_fid - best_fid if fids else float("nan")})
    return rows


def run_insertion_sweep(base_cfg: TrainerConfig, dataset, extractor,
                        stages=(16,), seeds=(0,), hue_samples: int = 128) -> list[dict]:
    """No-attention baseline plus attention and residual variants at each
    requested stage (Table-shaped: 1 + 2·len(stages) configs per seed)."""
    rows = []
    variants = [("none", 0)]
    for s in stages:
        variants += [("attention", s), ("residual", s)]
    for seed in seeds:
        for kind, stage in variants:
            cfg = _with(base_cfg, seed=seed, block_kind=kind,
                        block_stages=(stage,) if kind != "none" else ())
            trainer, log, halted, halt_iter = _train_one(cfg, dataset, extractor)
            fid = is_mean = hue = float("nan")
            if not halted:
                if extractor is not None:
                    m = generator_metrics(trainer.gen, extractor, dataset[0],
                                          base_cfg.metric_samples, seed=seed + 90001)
                    fid, is_mean = m["fid"], m["is_mean"]
                per_class = max(2, hue_samples // cfg.num_classes)
                images, labels = sample(trainer.gen, per_class, "all", seed + 70001)
                hue = mean_cross_corner_correlation(images.data, labels)
            rows.append({"variant": kind, "stage": stage, "seed": seed,
                         "halted": halted, "halt_iter": halt_iter,
                         "fid": fid, "is_mean": is_mean, "hue_corr": hue,
                         "g_params": trainer.gen.parameter_count(),
                         "d_params": trainer.disc.parameter_count()})
    return rows


def write_rows_csv(path, rows: list[dict], fields: tuple) -> None:
    with open(path, "w") as f:
        f.write(",".join(fields) + "\n")
        for row in rows:
            f.write(",".join(str(row[k]) for k in fields) + "\n")


def print_parameter_report(base_channels: int, resolution: int, stages,
                           reduction: int = 8) -> None:
    for stage in stages:
        ch = base_channels * (resolution // int(stage))
        rep = block_parameter_report(ch, reduction)
        logger.info("stage %s (C=%d): attention %d params, residual control %d "
                    "(difference %d)", stage, ch, rep["attention_params"],
                    rep["residual_params"], rep["difference"])
