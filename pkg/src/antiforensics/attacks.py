"""Baseline pixel-level attacks on localizers: FGSM, BIM, MIM and a
pixel-level AdvGAN-style generator.

The gradient attacks ascend the per-pixel BCE between the localizer's
prediction and the ground-truth mask, inside an L-infinity ball of radius
epsilon around the forged image.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import losses
from .data import to_uint8
from .models import Concealer, ConcealerConfig, parameter_hash, set_requires_grad
from .training import TrainConfig, infer_anti, train_loop


class GradientAccessError(TypeError):
    pass


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float | None = None  # defaults to 1.25 * epsilon / steps
    decay: float = 1.0  # MIM momentum

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is None:
            self.step_size = 1.25 * self.epsilon / self.steps


def _require_gradients(localizer):
    if not getattr(localizer, "gradient_access", False):
        raise GradientAccessError(
            "this localizer is query-only; gradient attacks need white-box access. "
            "Use the black-box harness, which attacks a distilled surrogate instead."
        )


def attack_objective(localizer, x, gt):
    """Mean per-pixel BCE of the localizer on x.

    Uses the logits when the localizer exposes them, which is the same loss
    without the gradient dead zone of clamped probabilities.
    """
    if hasattr(localizer, "logits"):
        return F.binary_cross_entropy_with_logits(localizer.logits(x), gt.to(x.dtype))
    return losses.bce(localizer(x), gt)


def _input_gradient(localizer, x, gt):
    x = x.detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(attack_objective(localizer, x, gt), x)
    return grad


def _frozen(localizer):
    """Context: eval mode and no parameter gradients for the duration."""

    class _Ctx:
        def __enter__(self):
            self.was = localizer.training
            self.flags = [p.requires_grad for p in localizer.parameters()]
            localizer.eval()
            set_requires_grad(localizer, False)

        def __exit__(self, *exc):
            localizer.train(self.was)
            for p, f in zip(localizer.parameters(), self.flags):
                p.requires_grad_(f)

    return _Ctx()


def _project(x_adv, x, eps):
    """Project into the L-inf ball around x and the [0, 1] box.

    The clamp runs in float64, where the difference of two float32 values is
    exact and eps is not rounded to the tensor dtype. Entries that land just
    outside the ball after rounding back (or after the float64 x + eps itself
    rounds up) are nudged toward x one ulp at a time.
    """
    xd = x.double()
    out = torch.max(torch.min(x_adv.double(), xd + eps), xd - eps).clamp(0.0, 1.0).to(x.dtype)
    for _ in range(4):
        bad = (out.double() - xd).abs() > eps
        if not bad.any():
            break
        out = torch.where(bad, torch.nextafter(out, x), out)
    return out


def fgsm_attack(localizer, image, gt, cfg: AttackConfig = AttackConfig()):
    _require_gradients(localizer)
    with _frozen(localizer):
        grad = _input_gradient(localizer, image, gt)
    x = image.detach()
    return _project(x + cfg.epsilon * grad.sign(), x, cfg.epsilon)


def bim_attack(localizer, image, gt, cfg: AttackConfig = AttackConfig()):
    _require_gradients(localizer)
    x = image.detach()
    x_adv = x.clone()
    with _frozen(localizer):
        for _ in range(cfg.steps):
            grad = _input_gradient(localizer, x_adv, gt)
            x_adv = _project(x_adv + cfg.step_size * grad.sign(), x, cfg.epsilon)
    return x_adv.detach()


def momentum_update(g, grad, decay):
    """g <- decay * g + grad / ||grad||_1, with the L1 norm taken per image."""
    l1 = grad.abs().flatten(1).sum(dim=1).clamp_min(1e-12)
    return decay * g + grad / l1.view(-1, *([1] * (grad.dim() - 1)))


def mim_attack(localizer, image, gt, cfg: AttackConfig = AttackConfig()):
    _require_gradients(localizer)
    x = image.detach()
    x_adv = x.clone()
    g = torch.zeros_like(x)
    with _frozen(localizer):
        for _ in range(cfg.steps):
            grad = _input_gradient(localizer, x_adv, gt)
            g = momentum_update(g, grad, cfg.decay)
            x_adv = _project(x_adv + cfg.step_size * g.sign(), x, cfg.epsilon)
    return x_adv.detach()


GRADIENT_ATTACKS = {"fgsm": fgsm_attack, "bim": bim_attack, "mim": mim_attack}


# --- AdvGAN-style generator ---------------------------------------------------


def advgan_pixel_train(samples, target, cfg: TrainConfig, concealer_config: ConcealerConfig | None = None, run_dir=None):
    """Train a perturbation generator against a fixed target localizer.

    Same backbone and adversarial term as the joint loop, with the norm
    penalty as the only other term: no pretext loss and no target updates.
    Returns the trained generator.
    """
    _require_gradients(target)
    before = parameter_hash(target)
    generator = Concealer(concealer_config or ConcealerConfig())
    flags = [p.requires_grad for p in target.parameters()]
    try:
        train_loop(
            generator,
            target,
            samples,
            replace(cfg, use_pretext=False),
            run_dir=run_dir,
            update_supervisor=False,
        )
    finally:
        for p, f in zip(target.parameters(), flags):
            p.requires_grad_(f)
    if parameter_hash(target) != before:
        raise RuntimeError("target localizer changed during generator training")
    return generator


def advgan_pixel_attack(generator, images):
    return infer_anti(generator, images)


# --- outputs ------------------------------------------------------------------


def write_attack_outputs(out_dir, ids, originals, antis, config: dict | None = None):
    """Save anti-forensic images as 8-bit PNGs with a JSON sidecar.

    `originals` and `antis` are NCHW tensors in [0, 1]. The sidecar records the
    config and each image's L-infinity deviation, measured on the saved
    8-bit values and on the float values.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for id_, o, a in zip(ids, originals, antis):
        o_np = o.permute(1, 2, 0).numpy()
        a_np = a.permute(1, 2, 0).numpy()
        a8 = to_uint8(a_np)
        Image.fromarray(a8).save(out_dir / f"{id_}.png")
        records.append(
            {
                "id": id_,
                "linf": float(np.abs(a_np.astype(np.float64) - o_np).max()),
                "linf_8bit": int(np.abs(a8.astype(int) - to_uint8(o_np).astype(int)).max()),
            }
        )
    sidecar = {"config": config or {}, "images": records}
    (out_dir / "attack.json").write_text(json.dumps(sidecar, indent=2))
    return sidecar


def attack_config_dict(cfg: AttackConfig) -> dict:
    return asdict(cfg)
