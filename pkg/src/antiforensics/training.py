"""Supervisor pretraining, the alternating concealer/supervisor loop, and
mask-free inference with a trained concealer."""

from __future__ import annotations

import json
import logging
import math
import random
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses
from .data import ForgerySample, stack_samples
from .losses import LossWeights
from .metrics import binarize, pixel_f1
from .models import (
    Concealer,
    ConcealerConfig,
    Localizer,
    LocalizerConfig,
    compose_anti_image,
    load_model,
    set_requires_grad,
)

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 4
    max_iters: int = 2000
    seed: int = 0
    checkpoint_interval: int = 500
    weights: LossWeights = field(default_factory=LossWeights)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    # supervisor pretraining
    pretrain_lr: float = 1e-3
    pretrain_epochs: int = 20
    patience: int = 5
    val_fraction: float = 0.15
    # self-supervised pretext term on/off (off = ablation)
    use_pretext: bool = True
    # normalisation of the self-supervised sums (see losses.NORMALIZATIONS)
    loss_normalization: str = "mixed"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.adam_betas = tuple(self.adam_betas)
        if self.lr < 0 or self.pretrain_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_normalization not in losses.NORMALIZATIONS:
            raise ValueError(f"loss_normalization must be one of {losses.NORMALIZATIONS}")

    def to_dict(self):
        return asdict(self)


@dataclass
class StepReport:
    iteration: int
    loss_self: float
    loss_adv: float
    loss_concealer: float
    loss_supervisor: float
    loss_pretext: float = 0.0
    loss_hinge: float = 0.0
    seconds: float = 0.0

    def losses(self):
        """Everything except timing, for reproducibility comparisons."""
        d = asdict(self)
        d.pop("seconds")
        return d


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def make_optimizer(model, lr, betas=(0.9, 0.999)):
    return torch.optim.Adam(model.parameters(), lr=lr, betas=betas)


def _finite(name, value):
    if not math.isfinite(value):
        raise TrainingDivergence(f"{name} became non-finite ({value})")


def batch_order(n, batch_size, seed, epoch):
    """Deterministic batches for one epoch; depends only on (seed, epoch)."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def batch_for_iteration(n, batch_size, seed, iteration):
    per_epoch = math.ceil(n / batch_size)
    epoch, pos = divmod(iteration, per_epoch)
    return batch_order(n, batch_size, seed, epoch)[pos]


# --- supervisor pretraining ---------------------------------------------------


@torch.no_grad()
def predict(localizer, images, batch_size=16):
    """Probability maps (N,1,H,W) for a stack of images."""
    was = localizer.training if hasattr(localizer, "training") else False
    if hasattr(localizer, "eval"):
        localizer.eval()
    out = torch.cat([localizer(images[i : i + batch_size]) for i in range(0, len(images), batch_size)])
    if hasattr(localizer, "train"):
        localizer.train(was)
    return out


def mean_f1(localizer, images, masks) -> float:
    probs = predict(localizer, images).numpy()
    gts = masks.numpy()
    return float(np.mean([pixel_f1(binarize(p[0]), g[0]) for p, g in zip(probs, gts)]))


def pretrain_supervisor(
    localizer: Localizer,
    samples: list[ForgerySample],
    cfg: TrainConfig = TrainConfig(),
    val_samples: list[ForgerySample] | None = None,
    targets: torch.Tensor | None = None,
):
    """Fit a localizer with per-pixel BCE, keeping the best held-out-F1 weights.

    Stops when held-out F1 has not improved for `cfg.patience` epochs or after
    `cfg.pretrain_epochs`. `targets` replaces the ground-truth masks as
    (soft) labels, which is how distillation reuses this routine.
    Returns (localizer, history).
    """
    if not samples:
        raise ValueError("training set is empty")
    images, masks = stack_samples(samples)
    labels = masks if targets is None else targets.float()
    if val_samples is None:
        n_val = max(1, int(round(cfg.val_fraction * len(samples)))) if len(samples) > 1 else 0
        perm = np.random.default_rng(cfg.seed).permutation(len(samples))
        val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        val_images, val_masks = images[val_idx], labels[val_idx]
        images, labels = images[tr_idx], labels[tr_idx]
    else:
        val_images, val_masks = stack_samples(val_samples)
    val_masks = (val_masks > 0.5).float()

    torch.manual_seed(cfg.seed)
    opt = make_optimizer(localizer, cfg.pretrain_lr, cfg.adam_betas)
    history = []
    best_f1, best_state, stale = -1.0, None, 0
    n = len(images)
    for epoch in range(cfg.pretrain_epochs):
        localizer.train()
        losses_ = []
        for idx in batch_order(n, cfg.batch_size, cfg.seed, epoch):
            idx = torch.as_tensor(idx)
            logits = localizer.logits(images[idx])
            loss = F.binary_cross_entropy_with_logits(logits, labels[idx])
            _finite("supervisor pretraining loss", loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses_.append(loss.item())
        f1 = mean_f1(localizer, val_images, val_masks) if len(val_images) else float("nan")
        history.append({"epoch": epoch, "loss": float(np.mean(losses_)), "val_f1": f1, "step_losses": losses_})
        log.info("pretrain epoch %d loss %.4f val_f1 %.4f", epoch, history[-1]["loss"], f1)
        if not len(val_images) or f1 > best_f1:
            best_f1, stale = f1, 0
            best_state = {k: v.clone() for k, v in localizer.state_dict().items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        localizer.load_state_dict(best_state)
    localizer.eval()
    return localizer, history


# --- joint training -----------------------------------------------------------


def sear_train_step(
    concealer,
    supervisor,
    images,
    masks,
    weights: LossWeights,
    opt_concealer,
    opt_supervisor,
    iteration=0,
    use_pretext=True,
    update_supervisor=True,
    normalization="mixed",
) -> StepReport:
    """One alternation: concealer update against a frozen supervisor, then
    one supervisor update on the same anti-forensic images."""
    t0 = time.perf_counter()

    # phase 1: supervisor frozen
    set_requires_grad(supervisor, False)
    concealer.train()
    delta = concealer(images)
    pretext = losses.pretext_loss(delta, masks, normalization) if use_pretext else delta.new_zeros(())
    hinge = losses.hinge_loss(delta, normalization)
    loss_self = pretext + hinge
    anti = compose_anti_image(images, delta)
    pred = supervisor(anti)
    loss_adv = losses.adversarial_loss(pred, masks)
    loss_c = losses.concealer_total(loss_self, loss_adv, weights)
    _finite("concealer loss", loss_c.item())
    opt_concealer.zero_grad()
    loss_c.backward()
    opt_concealer.step()
    set_requires_grad(supervisor, True)

    # phase 2: supervisor update on the detached anti-forensic images
    loss_s_val = losses.supervisor_total(loss_adv.detach(), weights).item()
    if update_supervisor:
        supervisor.train()
        pred_s = supervisor(anti.detach())
        loss_s = losses.supervisor_total(losses.adversarial_loss(pred_s, masks), weights)
        _finite("supervisor loss", loss_s.item())
        opt_supervisor.zero_grad()
        loss_s.backward()
        opt_supervisor.step()
        loss_s_val = loss_s.item()

    return StepReport(
        iteration=iteration,
        loss_self=loss_self.item(),
        loss_adv=loss_adv.item(),
        loss_concealer=loss_c.item(),
        loss_supervisor=loss_s_val,
        loss_pretext=pretext.item(),
        loss_hinge=hinge.item(),
        seconds=time.perf_counter() - t0,
    )


_CKPT_RE = re.compile(r"ckpt_(\d+)\.bin$")


def latest_checkpoint(run_dir) -> Path | None:
    found = []
    for p in Path(run_dir).glob("ckpt_*.bin"):
        m = _CKPT_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found)[1] if found else None


def _save_run_state(path, concealer, supervisor, opt_c, opt_s, iteration, final):
    payload = {
        "iteration": iteration,
        "final": final,
        "concealer_config": asdict(concealer.config),
        "supervisor_config": asdict(supervisor.config),
        "concealer": concealer.state_dict(),
        "supervisor": supervisor.state_dict(),
        "opt_concealer": opt_c.state_dict(),
        "opt_supervisor": opt_s.state_dict(),
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def train_loop(
    concealer: Concealer,
    supervisor: Localizer,
    samples: list[ForgerySample],
    cfg: TrainConfig,
    run_dir=None,
    resume=True,
    stop_after=None,
    update_supervisor=True,
) -> list[StepReport]:
    """Run the alternating loop for cfg.max_iters iterations.

    With a run_dir, checkpoints (ckpt_<iter>.bin), log.jsonl and config.json
    are written there, and an existing run is resumed from its newest
    checkpoint. `stop_after` ends the call early (simulated interruption).
    Returns the step reports produced by this call.
    """
    if not samples:
        raise ValueError("training set is empty")
    images, masks = stack_samples(samples)
    opt_c = make_optimizer(concealer, cfg.lr, cfg.adam_betas)
    # fresh optimizer state for the joint phase
    opt_s = make_optimizer(supervisor, cfg.lr, cfg.adam_betas)
    start = 0
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt = latest_checkpoint(run_dir) if resume else None
        if ckpt is not None:
            state = torch.load(ckpt, map_location="cpu", weights_only=False)
            if state["concealer_config"] != asdict(concealer.config):
                raise ValueError(f"{ckpt}: concealer config differs from the current run")
            concealer.load_state_dict(state["concealer"])
            supervisor.load_state_dict(state["supervisor"])
            opt_c.load_state_dict(state["opt_concealer"])
            opt_s.load_state_dict(state["opt_supervisor"])
            start = state["iteration"]
            _truncate_log(run_dir / "log.jsonl", start)
            log.info("resuming %s at iteration %d", run_dir, start)
        (run_dir / "config.json").write_text(
            json.dumps(
                {
                    "train": cfg.to_dict(),
                    "concealer": asdict(concealer.config),
                    "supervisor": asdict(supervisor.config),
                },
                indent=2,
            )
        )

    reports = []
    n = len(images)
    end = cfg.max_iters if stop_after is None else min(cfg.max_iters, start + stop_after)
    for it in range(start, end):
        idx = torch.as_tensor(batch_for_iteration(n, cfg.batch_size, cfg.seed, it))
        rep = sear_train_step(
            concealer,
            supervisor,
            images[idx],
            masks[idx],
            cfg.weights,
            opt_c,
            opt_s,
            iteration=it + 1,
            use_pretext=cfg.use_pretext,
            update_supervisor=update_supervisor,
            normalization=cfg.loss_normalization,
        )
        reports.append(rep)
        if run_dir:
            with (run_dir / "log.jsonl").open("a") as fh:
                fh.write(json.dumps(asdict(rep)) + "\n")
            done = it + 1
            if done == cfg.max_iters or (cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0):
                _save_run_state(
                    run_dir / f"ckpt_{done}.bin", concealer, supervisor, opt_c, opt_s, done, done == cfg.max_iters
                )
        if (it + 1) % 100 == 0:
            log.info(
                "iter %d concealer %.4f self %.4f adv %.4f",
                it + 1,
                rep.loss_concealer,
                rep.loss_self,
                rep.loss_adv,
            )
    if run_dir and reports and end < cfg.max_iters:
        # interruption point: make the partial run resumable from here
        _save_run_state(run_dir / f"ckpt_{end}.bin", concealer, supervisor, opt_c, opt_s, end, False)
    concealer.eval()
    supervisor.eval()
    return reports


def _truncate_log(path: Path, iteration: int) -> None:
    if not path.exists():
        return
    kept = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["iteration"] <= iteration]
    path.write_text("".join(ln + "\n" for ln in kept))


def read_log(run_dir) -> list[StepReport]:
    path = Path(run_dir) / "log.jsonl"
    return [StepReport(**json.loads(ln)) for ln in path.read_text().splitlines() if ln]


def export_models(run_dir, out_dir=None):
    """Split the newest run checkpoint into standalone model checkpoints."""
    from .models import save_checkpoint

    ckpt = latest_checkpoint(run_dir)
    if ckpt is None:
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    state = torch.load(ckpt, map_location="cpu", weights_only=False)
    concealer = Concealer(ConcealerConfig(**state["concealer_config"]))
    concealer.load_state_dict(state["concealer"])
    supervisor = Localizer(LocalizerConfig(**state["supervisor_config"]))
    supervisor.load_state_dict(state["supervisor"])
    out_dir = Path(out_dir or run_dir)
    return (
        save_checkpoint(concealer, out_dir / "concealer.pt", {"iteration": state["iteration"]}),
        save_checkpoint(supervisor, out_dir / "supervisor_joint.pt", {"iteration": state["iteration"]}),
    )


# --- inference ----------------------------------------------------------------


@torch.no_grad()
def infer_anti(concealer, images, batch_size=16):
    """Anti-forensic images from forged images alone (no mask, no localizer).

    `concealer` may be a Concealer or a path to a concealer checkpoint.
    `images` is an NCHW tensor in [0, 1].
    """
    if not isinstance(concealer, Concealer):
        concealer = load_model(concealer, expect_kind="concealer")
    concealer.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = images[i : i + batch_size]
        out.append(compose_anti_image(x, concealer(x)))
    return torch.cat(out) if out else images.clone()
