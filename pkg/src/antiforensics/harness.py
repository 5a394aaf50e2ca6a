"""Threat-setting evaluation: white-box, black-box (distilled surrogate or
pure transfer), retrained defense, and inference timing."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import attacks
from .data import ForgerySample, stack_samples, to_uint8
from .metrics import EvalReport, ImageRow, binarize, f1_reverse, pixel_f1, psnr, ssim
from .models import ForwardOnly, Localizer, LocalizerConfig
from .training import TrainConfig, infer_anti, predict, pretrain_supervisor

SETTING_KINDS = ("whitebox", "blackbox_distilled", "blackbox_pure", "retrained_defense")
GENERATOR_ATTACKS = ("sear", "advgan")
ATTACK_NAMES = ("identity", "fgsm", "bim", "mim") + GENERATOR_ATTACKS


class SettingError(ValueError):
    pass


@dataclass
class SettingSpec:
    kind: str
    target: str
    attack: str
    surrogate: str | None = None
    generator: str | None = None  # concealer checkpoint for sear / advgan
    attack_config: dict = field(default_factory=dict)
    dataset: str = ""

    def __post_init__(self):
        if self.kind not in SETTING_KINDS:
            raise SettingError(f"unknown setting {self.kind!r}; expected one of {SETTING_KINDS}")
        if self.attack not in ATTACK_NAMES:
            raise SettingError(f"unknown attack {self.attack!r}; expected one of {ATTACK_NAMES}")
        if self.attack in GENERATOR_ATTACKS and not self.generator:
            raise SettingError(f"{self.attack} needs a generator checkpoint")
        if self.kind == "blackbox_distilled" and not self.surrogate:
            raise SettingError("blackbox_distilled needs a surrogate model")
        if self.kind == "blackbox_pure" and self.attack not in GENERATOR_ATTACKS + ("identity",):
            raise SettingError("blackbox_pure transfers a generator; gradient attacks need a surrogate")


class Attack:
    """A named way of turning forged images into anti-forensic images.

    Gradient attacks need a localizer with gradient access; generator
    attacks (SEAR, AdvGAN) ignore the localizer and need no mask.
    """

    def __init__(self, name, fn, needs_gradients):
        self.name = name
        self._fn = fn
        self.needs_gradients = needs_gradients

    def __call__(self, localizer, images, masks):
        return self._fn(localizer, images, masks)

    def __repr__(self):
        return f"Attack({self.name!r})"


def identity_attack():
    return Attack("identity", lambda loc, x, m: x.clone(), needs_gradients=False)


def gradient_attack(name, cfg: attacks.AttackConfig | None = None):
    fn = attacks.GRADIENT_ATTACKS[name]
    cfg = cfg or attacks.AttackConfig()
    return Attack(name, lambda loc, x, m: fn(loc, x, m, cfg), needs_gradients=True)


def generator_attack(name, generator):
    return Attack(name, lambda loc, x, m: infer_anti(generator, x), needs_gradients=False)


def run_attack(attack, localizer, images, masks, batch_size=16):
    outs = []
    for i in range(0, len(images), batch_size):
        outs.append(attack(localizer, images[i : i + batch_size], masks[i : i + batch_size]))
    return torch.cat(outs) if outs else images.clone()


def score(target, ids, images, masks, antis, attack="", model="", setting="", dataset="") -> EvalReport:
    """Per-image F1 (clean and attacked), reversed F1, PSNR and SSIM."""
    p_ori = predict(target, images).numpy()
    p_anti = predict(target, antis).numpy()
    gts = masks.numpy()
    imgs = images.permute(0, 2, 3, 1).numpy()
    ants = antis.permute(0, 2, 3, 1).numpy()
    rows = []
    for k, id_ in enumerate(ids):
        gt = gts[k, 0]
        pa = binarize(p_anti[k, 0])
        rows.append(
            ImageRow(
                id=id_,
                f1_ori=pixel_f1(binarize(p_ori[k, 0]), gt),
                f1=pixel_f1(pa, gt),
                f1_reverse=f1_reverse(pa, gt),
                psnr=psnr(imgs[k], ants[k]),
                ssim=ssim(imgs[k], ants[k]),
            )
        )
    return EvalReport(attack, model, setting, dataset, rows)


def _ids(samples):
    return [s.id for s in samples]


def whitebox_eval(attack: Attack, target, samples: list[ForgerySample], model="", dataset="", return_antis=False):
    images, masks = stack_samples(samples)
    antis = run_attack(attack, target, images, masks)
    report = score(target, _ids(samples), images, masks, antis, attack.name, model, "whitebox", dataset)
    return (report, antis) if return_antis else report


def blackbox_eval(attack: Attack, surrogate, target, samples, model="", dataset="", return_antis=False):
    """Attack the surrogate (or nothing, for generator attacks) and score on
    the target, which is only ever reachable through a forward-only view."""
    oracle = target if isinstance(target, ForwardOnly) else ForwardOnly(target)
    if attack.needs_gradients and surrogate is None:
        raise SettingError(f"{attack.name} needs a surrogate in the black-box setting")
    images, masks = stack_samples(samples)
    antis = run_attack(attack, surrogate, images, masks)
    setting = "blackbox_distilled" if surrogate is not None else "blackbox_pure"
    report = score(oracle, _ids(samples), images, masks, antis, attack.name, model, setting, dataset)
    return (report, antis) if return_antis else report


def distill_local_model(
    target,
    samples: list[ForgerySample],
    cfg: TrainConfig,
    target_train_ids,
    config: LocalizerConfig | None = None,
    soft_labels=True,
):
    """Train a small surrogate on the target's outputs over a disjoint subset.

    With soft_labels the surrogate fits the target's probabilities; otherwise
    it fits ground truth. Returns (surrogate, history).
    """
    overlap = set(target_train_ids) & {s.id for s in samples}
    if overlap:
        raise SettingError(f"distillation set overlaps the target's training data: {sorted(overlap)[:5]}")
    oracle = target if isinstance(target, ForwardOnly) else ForwardOnly(target)
    surrogate = Localizer(config or LocalizerConfig.small())
    targets = None
    if soft_labels:
        images, _ = stack_samples(samples)
        targets = torch.cat([oracle(images[i : i + 16]) for i in range(0, len(images), 16)])
    torch.manual_seed(cfg.seed)
    return pretrain_supervisor(surrogate, samples, cfg, targets=targets)


def attacked_copies(attack: Attack, localizer, samples, suffix="_anti"):
    images, masks = stack_samples(samples)
    antis = run_attack(attack, localizer, images, masks)
    out = []
    for s, a in zip(samples, antis):
        img = a.permute(1, 2, 0).numpy().clip(0.0, 1.0)
        out.append(ForgerySample(img, s.mask.copy(), s.id + suffix))
    return out


def retrain_defense(target, attack: Attack, samples, cfg: TrainConfig, val_samples=None):
    """Fine-tune a copy of the target on clean plus attacked training images.

    Returns (retrained model, info) where info records the training-set size.
    """
    attacked = attacked_copies(attack, target, samples)
    union = list(samples) + attacked
    model = copy.deepcopy(target)
    model, history = pretrain_supervisor(model, union, cfg, val_samples=val_samples)
    return model, {"n_train": len(union), "n_original": len(samples), "history": history}


def timing_benchmark(attack: Attack, localizer, samples, warmup=2, repeats=1):
    """Mean wall-clock seconds to produce one anti-forensic image (batch of 1).

    Returns (mean seconds, per-image seconds).
    """
    images, masks = stack_samples(samples)
    for k in range(min(warmup, len(images))):
        attack(localizer, images[k : k + 1], masks[k : k + 1])
    times = []
    for k in range(len(images)):
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            attack(localizer, images[k : k + 1], masks[k : k + 1])
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    return float(np.mean(times)), times


def contact_sheet(target, samples, antis, path, max_rows=8):
    """PNG grid with one row per sample: original, anti, pred(original),
    pred(anti), ground truth."""
    images, masks = stack_samples(samples[:max_rows])
    antis = antis[:max_rows]
    p_ori = predict(target, images)
    p_anti = predict(target, antis)
    rows = []
    for k in range(len(images)):
        tiles = [
            images[k].permute(1, 2, 0).numpy(),
            antis[k].permute(1, 2, 0).numpy(),
            np.repeat(binarize(p_ori[k, 0].numpy())[..., None], 3, axis=2),
            np.repeat(binarize(p_anti[k, 0].numpy())[..., None], 3, axis=2),
            np.repeat(masks[k, 0].numpy()[..., None], 3, axis=2),
        ]
        rows.append(np.concatenate([to_uint8(t) for t in tiles], axis=1))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.concatenate(rows, axis=0)).save(path)
    return path
