"""Shared builders for the test suite."""

import numpy as np
import torch

from selfcoherence.toy_dit.model import ModelConfig, build_model
from selfcoherence.toy_dit.schedule import DiffusionSchedule
from selfcoherence.toy_dit.train import noise_loss

# filled by the acceptance suite, printed by conftest.pytest_terminal_summary
ACCEPTANCE_LINES: list[str] = []


def tiny_model(seed=0, grid=(4, 4), blocks=1, dim=8, heads=2, steps=10, vocab=7):
    cfg = ModelConfig(vocab, num_blocks=blocks, embed_dim=dim, num_heads=heads, grid=grid, num_steps=steps)
    return build_model(cfg, seed)


def gradient_check(seed=0, step=1e-3):
    """Per-tensor relative error between autograd and central differences.

    Runs a float64 one-block model (d=8, 4x4 grid) on a fixed noise-prediction
    loss and returns ``{name: ||g - fd|| / max(||g||, ||fd||, 1e-6)}``; the
    floor keeps tensors with an exactly-zero gradient (key biases, which the
    softmax ignores) from dividing rounding noise by zero.
    """
    model = tiny_model(seed).double()
    schedule = DiffusionSchedule.linear(10)
    rng = np.random.default_rng(seed)
    x0 = torch.from_numpy(rng.uniform(-1, 1, size=(2, 4, 4, 3)))
    noise = torch.from_numpy(rng.standard_normal((2, 4, 4, 3)))
    tokens = torch.tensor([[0, 4, 2, 5], [1, 6, 3, 4]])
    t = torch.tensor([3, 8])

    def loss():
        return noise_loss(model, schedule, x0, tokens, t, noise)

    model.zero_grad()
    loss().backward()
    errors = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic, numeric = [], []
            flat, grad = p.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss().item()
                flat[i] = orig - step
                down = loss().item()
                flat[i] = orig
                analytic.append(grad[i].item())
                numeric.append((up - down) / (2 * step))
            a, n = np.array(analytic), np.array(numeric)
            errors[name] = float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-6))
    return errors
