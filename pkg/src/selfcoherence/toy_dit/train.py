from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import ToySample
from .model import ToyModel
from .schedule import DiffusionSchedule

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    raw_state: dict | None = None  # last optimizer weights when an EMA replaced them


def stack_samples(samples: list[ToySample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    tokens = np.array([s.prompt.tokens for s in samples], dtype=np.int64)
    return images, tokens


def noise_loss(model: ToyModel, schedule: DiffusionSchedule, x0, tokens, t, noise):
    """Mean squared error between injected and predicted noise."""
    ab = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[t - 1].view(-1, 1, 1, 1)
    z_t = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
    eps, _ = model(z_t, t, tokens)
    return ((eps - noise) ** 2).mean()


def train(
    model: ToyModel,
    dataset: list[ToySample],
    schedule: DiffusionSchedule,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    optimizer: str = "sgd",
    result: TrainResult | None = None,
    max_steps: int | None = None,
    ema_decay: float | None = None,
    lr_schedule: str = "constant",
) -> ToyModel:
    """Fit ``model`` to predict the noise added to ``dataset`` images.

    Images are mapped from [0, 1] to [-1, 1]. Mutates and returns ``model``;
    per-epoch mean losses go to ``result`` when given. With ``ema_decay`` the
    returned weights are the exponential moving average of the iterates.
    ``lr_schedule="cosine"`` decays the rate from ``lr`` to 0 over the run.
    """
    if lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {lr_schedule!r}")
    if ema_decay is not None and not 0.0 < ema_decay < 1.0:
        raise ValueError(f"ema_decay must lie in (0, 1), got {ema_decay}")
    if not dataset:
        raise ValueError("dataset is empty")
    if schedule.num_steps != model.config.num_steps:
        raise ValueError(f"schedule has {schedule.num_steps} steps, model expects {model.config.num_steps}")
    result = result if result is not None else TrainResult()
    if epochs <= 0:
        return model
    images, tokens = stack_samples(dataset)
    x_all = torch.from_numpy(images * 2.0 - 1.0)
    tok_all = torch.from_numpy(tokens)
    rng = np.random.default_rng(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    if optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=lr)
    elif optimizer == "adam":
        opt = torch.optim.Adam(params, lr=lr)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    n = len(dataset)
    total_steps = epochs * math.ceil(n / batch_size)
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    if lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 0.5 * (1 + math.cos(math.pi * k / total_steps)))
    else:
        sched = None
    ema = [p.detach().clone() for p in params] if ema_decay is not None else None
    model.train()
    T = schedule.num_steps
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x0 = x_all[idx]
            t = torch.from_numpy(rng.integers(1, T + 1, size=len(idx)))
            noise = torch.from_numpy(rng.standard_normal(x0.shape).astype(np.float32))
            loss = noise_loss(model, schedule, x0, tok_all[idx], t, noise)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            if ema is not None:
                with torch.no_grad():
                    for e, p in zip(ema, params):
                        e.lerp_(p, 1.0 - ema_decay)
            total += value * len(idx)
            count += len(idx)
            result.step_losses.append(value)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        result.epoch_losses.append(total / count)
        log.info("epoch %d loss %.5f", epoch, result.epoch_losses[-1])
        if max_steps is not None and step >= max_steps:
            break
    if ema is not None:
        result.raw_state = {k: v.clone() for k, v in model.state_dict().items()}
        with torch.no_grad():
            for e, p in zip(ema, params):
                p.copy_(e)
    model.eval()
    return model
