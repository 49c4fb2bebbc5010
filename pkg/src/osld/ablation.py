"""Ablation harness: train under toggled recipe settings and compare validation R@1.

Four toggles are exercised: sampler (hard-negative vs random), padding to
square, crop mode (random vs random-resized) and the stage-2 schedule
(default vs a low constant rate).  Each setting is trained once per seed and
summarised by the median R@1.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .datasets import DatasetManifest, SyntheticConfig
from .embednet import NetworkConfig, TrainConfig, train
from .pipeline import training_set, validation_set
from .preprocess import CROP_RANDOM, CROP_RRC, AugmentConfig

LOW_LR = 1e-6
SCHEDULE_DEFAULT = "default"
SCHEDULE_LOW = "low-lr"


@dataclass(frozen=True)
class AblationSetting:
    name: str
    sampler: str = "bhnm"
    pad: bool = True
    crop: str = CROP_RRC
    schedule: str = SCHEDULE_DEFAULT

    def augment(self, base: AugmentConfig) -> AugmentConfig:
        return replace(base, pad_to_square=self.pad, crop_mode=self.crop)

    def train_config(self, base: TrainConfig, seed: int) -> TrainConfig:
        lr = LOW_LR if self.schedule == SCHEDULE_LOW else None
        return replace(base, sampler=self.sampler, constant_lr=lr, seed=seed)

    def describe(self) -> dict:
        return {"sampler": self.sampler, "pad": self.pad, "crop": self.crop, "schedule": self.schedule}


# Incremental recipe: each row changes one thing relative to its predecessor.
A_SERIES = (
    AblationSetting("A1", "bhnm", True, CROP_RANDOM, SCHEDULE_LOW),
    AblationSetting("A2", "bhnm", True, CROP_RANDOM, SCHEDULE_DEFAULT),
    AblationSetting("A3", "bhnm", False, CROP_RANDOM, SCHEDULE_DEFAULT),
    AblationSetting("A4", "bhnm", True, CROP_RANDOM, SCHEDULE_DEFAULT),
    AblationSetting("A5", "bhnm", True, CROP_RRC, SCHEDULE_DEFAULT),
)


def full_grid() -> list[AblationSetting]:
    out = []
    for sampler, pad, crop, sched in itertools.product(
        ("random", "bhnm"), (False, True), (CROP_RANDOM, CROP_RRC), (SCHEDULE_LOW, SCHEDULE_DEFAULT)
    ):
        name = f"{sampler}/{'pad' if pad else 'nopad'}/{'rrc' if crop == CROP_RRC else 'rc'}/{sched}"
        out.append(AblationSetting(name, sampler, pad, crop, sched))
    return out


def named_settings(names: Sequence[str]) -> list[AblationSetting]:
    """Single-toggle variants of the default recipe, e.g. ``["bhnm", "random"]``."""
    variants = {
        "bhnm": AblationSetting("bhnm"),
        "random": AblationSetting("random", sampler="random"),
        "pad": AblationSetting("pad"),
        "nopad": AblationSetting("nopad", pad=False),
        "rrc": AblationSetting("rrc"),
        "random-crop": AblationSetting("random-crop", crop=CROP_RANDOM),
        "low-lr": AblationSetting("low-lr", schedule=SCHEDULE_LOW),
    }
    unknown = [n for n in names if n not in variants]
    if unknown:
        raise ValueError(f"unknown ablation settings {unknown}; choose from {sorted(variants)}")
    return [variants[n] for n in names]


def benchmark_config(high_aspect: bool = False, seed: int = 0) -> SyntheticConfig:
    """Synthetic data on which validation R@1 is far from saturated.

    Many validation classes with few instances each, and instance hues drawn
    at random so colour alone cannot identify a class.  The high-aspect
    variant renders wide logos, where squashing versus padding matters.
    """
    cfg = SyntheticConfig(
        train_classes=40,
        val_classes=30,
        test_classes=5,
        instances_per_class=8,
        color_shift=0.5,
        seed=seed,
    )
    if high_aspect:
        cfg = replace(cfg, aspect=(2.5, 3.5), logo_scale=(0.5, 0.9))
    return cfg


@dataclass
class AblationRow:
    setting: AblationSetting
    seeds: list[int]
    recall_at_1: list[float]

    @property
    def median(self) -> float:
        return float(np.median(self.recall_at_1))


def run_ablation(
    manifest: DatasetManifest,
    settings: Sequence[AblationSetting],
    seeds: Sequence[int],
    base_train: TrainConfig | None = None,
    base_aug: AugmentConfig | None = None,
    net_cfg: NetworkConfig | None = None,
    progress: Callable[[str, int, float], None] | None = None,
) -> list[AblationRow]:
    base_train = base_train or TrainConfig()
    base_aug = base_aug or AugmentConfig.desk()
    net_cfg = net_cfg or NetworkConfig(input_dim=3 * base_aug.test_crop ** 2)
    rows = []
    for s in settings:
        aug = s.augment(base_aug)
        items = training_set(manifest, aug)
        val = validation_set(manifest, aug)
        scores = []
        for seed in seeds:
            result = train(items, net_cfg, s.train_config(base_train, seed), val)
            scores.append(float(result.log["best_recall_at_1"]))
            if progress is not None:
                progress(s.name, seed, scores[-1])
        rows.append(AblationRow(s, list(seeds), scores))
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    """Tab-separated report: one line per setting."""
    if not rows:
        return "name\tsampler\tpad\tcrop\tschedule\tmedian_r1\n"
    seeds = rows[0].seeds
    head = ["name", "sampler", "pad", "crop", "schedule", "median_r1"] + [f"seed{s}_r1" for s in seeds]
    lines = ["\t".join(head)]
    for r in rows:
        d = r.setting.describe()
        cells = [r.setting.name, d["sampler"], "on" if d["pad"] else "off", d["crop"], d["schedule"], f"{r.median:.6f}"]
        cells += [f"{v:.6f}" for v in r.recall_at_1]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
