"""Training loop: warm-up schedule, deterministic batching, checkpoints that
resume bit-for-bit, and the slot-order matching diagnostic."""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from . import scenegen
from .model import SlotSet, SlotVAE, SlotVAEConfig, load_checkpoint, save_checkpoint
from .objective import SIGMA_X, LossBreakdown, total_loss

log = logging.getLogger(__name__)

# global-KL weight per dataset family
BETA_DEFAULTS = {
    "objectsroom": 0.01,
    "shapestacks": 0.1,
    "arrowroom": 0.1,
    "arrowworld": 0.1,
    "multisprite": 0.01,
}
DEFAULT_BETA = 0.1
TRAIN_STATE_VERSION = 1


@dataclass
class TrainConfig:
    data: str = ""
    out: str = "runs/default"
    batch_size: int = 16
    learning_rate: float = 4e-4
    warmup_steps: int = 2000
    total_steps: int = 20000
    lr_decay_step: int = 0  # 0 disables the step decay
    lr_decay_factor: float = 0.5
    beta: Optional[float] = None  # None -> dataset default
    sigma_x: float = SIGMA_X
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 1000
    log_interval: int = 50
    max_records: int = 0  # 0 = use all
    dataset_name: str = ""
    model: SlotVAEConfig = field(default_factory=SlotVAEConfig)

    def __post_init__(self):
        for name in ("batch_size", "total_steps", "checkpoint_interval", "log_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.sigma_x <= 0:
            raise ValueError("learning_rate and sigma_x must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")

    def resolved_beta(self) -> float:
        if self.beta is not None:
            return self.beta
        key = self.dataset_name.lower().replace("_", "").replace("-", "").replace(" ", "")
        return BETA_DEFAULTS.get(key, DEFAULT_BETA)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = SlotVAEConfig.from_dict(d.pop("model", {}))
        names = {f.name for f in fields(cls)}
        return cls(model=model, **{k: v for k, v in d.items() if k in names})


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0, then constant, with an optional one-off decay."""
    lr = cfg.learning_rate
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return lr * step / cfg.warmup_steps
    if cfg.lr_decay_step and step >= cfg.lr_decay_step:
        return lr * cfg.lr_decay_factor
    return lr


def order_match_diagnostic(posterior, prior) -> dict[str, float]:
    """Cosine agreement between posterior-path and prior-path slots.

    ``aligned`` pairs slot k with slot k; ``best`` uses the optimal
    one-to-one assignment. Inputs are SlotSets or arrays of shape (K, D) or
    (B, K, D); scores are averaged over the batch.
    """
    a = posterior.slots if isinstance(posterior, SlotSet) else posterior
    b = prior.slots if isinstance(prior, SlotSet) else prior
    a = torch.as_tensor(a).detach().double()
    b = torch.as_tensor(b).detach().double()
    if a.dim() == 2:
        a, b = a[None], b[None]
    a = a / a.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    b = b / b.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    cos = torch.einsum("bkd,bjd->bkj", a, b).numpy()
    k = cos.shape[1]
    aligned = float(np.mean([np.trace(c) / k for c in cos]))
    best_scores = []
    for c in cos:
        rows, cols = linear_sum_assignment(c, maximize=True)
        best_scores.append(c[rows, cols].sum() / k)
    best = float(np.mean(best_scores))
    ratio = aligned / best if best > 0 else float("nan")
    return {"mean_aligned_cosine": aligned, "mean_best_permutation_cosine": best, "ratio": ratio}


def best_permutation_bruteforce(cos: np.ndarray) -> float:
    """Exhaustive best assignment score (mean cosine) for small K."""
    k = cos.shape[0]
    return max(sum(cos[i, p[i]] for i in range(k)) / k for p in itertools.permutations(range(k)))


def images_to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W, C) uint8 -> (N, C, H, W) float in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).to(dtype) / 255.0


def batch_indices(step: int, batch_size: int, n: int, seed: int) -> np.ndarray:
    """Indices of batch ``step``: consecutive slices of per-epoch permutations."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch])).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset : offset + take].tolist())
    return np.asarray(out)


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + step)


class NonFiniteLoss(FloatingPointError):
    pass


class Trainer:
    """Owns the model, optimizer and step counter of one run."""

    def __init__(self, config: TrainConfig, images: Optional[np.ndarray] = None):
        self.config = config
        if images is None:
            if not config.data:
                raise ValueError("either images or config.data is required")
            manifest = scenegen.read_manifest(config.data)
            if not config.dataset_name:
                config.dataset_name = manifest.generator
            images, _ = scenegen.load_arrays(config.data)
        if config.max_records:
            images = images[: config.max_records]
        if images.shape[1] != config.model.image_size:
            raise ValueError(
                f"dataset images are {images.shape[1]}px, model expects {config.model.image_size}px"
            )
        self.images = images
        self.beta = config.resolved_beta()
        torch.manual_seed(config.seed)
        self.model = SlotVAE(config.model)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate)
        self.step = 0
        self.history: list[dict] = []

    def batch(self, step: int) -> torch.Tensor:
        idx = batch_indices(step, self.config.batch_size, len(self.images), self.config.seed)
        return images_to_tensor(self.images[idx], self.model.slot_attention.init_mu.dtype)

    def train_step(self) -> tuple[LossBreakdown, dict]:
        cfg = self.config
        self.model.train()
        x = self.batch(self.step)
        gen = step_generator(cfg.seed, self.step)
        try:
            out = self.model.forward_train(x, gen)
        except FloatingPointError as err:
            raise NonFiniteLoss(f"{err} at step {self.step}") from err
        losses = total_loss(x, out, beta=self.beta, sigma_x=cfg.sigma_x)
        for name, value in losses.as_floats().items():
            if not math.isfinite(value):
                raise NonFiniteLoss(f"non-finite {name} at step {self.step}")
        lr = lr_schedule(self.step + 1, cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        info = {"step": self.step, "lr": lr, **losses.as_floats()}
        info["mse"] = float(((out.scene.composed.detach() - x) ** 2).mean())
        return losses, info

    def diagnostics(self) -> dict:
        x = self.batch(self.step)
        with torch.no_grad():
            out = self.model.forward_train(x, step_generator(self.config.seed + 1, self.step))
        return order_match_diagnostic(out.posterior_slots, out.prior_slots)

    def run(self, until: Optional[int] = None, log_file=None, checkpoint_dir=None) -> list[dict]:
        cfg = self.config
        until = cfg.total_steps if until is None else min(until, cfg.total_steps)
        t0 = time.time()
        while self.step < until:
            _, info = self.train_step()
            if self.step % cfg.log_interval == 0 or self.step == until:
                info.update(self.diagnostics())
                info["elapsed"] = round(time.time() - t0, 2)
                self.history.append(info)
                line = json.dumps(info, sort_keys=True)
                log.info(line)
                if log_file is not None:
                    with open(log_file, "a") as fh:
                        fh.write(line + "\n")
            if checkpoint_dir is not None and (
                self.step % cfg.checkpoint_interval == 0 or self.step == cfg.total_steps
            ):
                self.save(Path(checkpoint_dir) / f"step-{self.step:07d}.pt")
                self.save(Path(checkpoint_dir) / "latest.pt")
        return self.history

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            path,
            self.model,
            extra={
                "train_state_version": TRAIN_STATE_VERSION,
                "train_config": self.config.to_dict(),
                "optimizer": self.optimizer.state_dict(),
                "step": self.step,
                "history": self.history,
            },
        )

    @classmethod
    def resume(cls, path, images: Optional[np.ndarray] = None, **overrides) -> "Trainer":
        model, payload = load_checkpoint(path)
        cfg = TrainConfig.from_dict(payload["train_config"])
        for k, v in overrides.items():
            setattr(cfg, k, v)
        trainer = cls(cfg, images)
        trainer.model.load_state_dict(model.state_dict())
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.step = payload["step"]
        trainer.history = list(payload.get("history", []))
        return trainer


def train(config: TrainConfig, images: Optional[np.ndarray] = None, resume: Optional[str] = None) -> dict:
    """Run (or continue) training; returns paths of the final checkpoint and metrics log."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    if resume:
        trainer = Trainer.resume(resume, images, out=config.out, total_steps=config.total_steps)
    else:
        trainer = Trainer(config, images)
    log_file = out / "metrics.jsonl"
    trainer.run(log_file=log_file, checkpoint_dir=out / "checkpoints")
    final = out / "checkpoints" / "latest.pt"
    return {"checkpoint": str(final), "metrics": str(log_file), "history": trainer.history}
