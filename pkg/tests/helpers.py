"""Shared test utilities: toy batches and finite-difference gradient checks."""

from __future__ import annotations

import numpy as np
import torch

from lip2speech.audio import AudioWaveform
from lip2speech.model import Batch, ModelConfig

RATE = 16000


def sine(freq: float, seconds: float = 1.0, rate: int = RATE, amp: float = 0.5) -> AudioWaveform:
    t = np.arange(int(round(seconds * rate))) / rate
    return AudioWaveform(amp * np.sin(2 * np.pi * freq * t), rate)


def make_batch(config: ModelConfig, lengths=(6, 4), t_p=(5, 3), t_r=(7, 5), seed=0,
               dtype=torch.float32, units=True) -> Batch:
    """Random padded batch consistent with ``config``; lengths are per utterance."""
    g = torch.Generator().manual_seed(seed)
    b = len(lengths)
    t_v, tp, tr = max(lengths), max(t_p), max(t_r)
    t_mel = 4 * t_v
    return Batch(
        visual=torch.randn(b, t_v, config.visual_dim, generator=g, dtype=dtype),
        visual_lengths=torch.tensor(lengths),
        phonemes=torch.randint(0, config.n_phonemes, (b, tp), generator=g),
        phoneme_lengths=torch.tensor(t_p),
        prompt=torch.randn(b, tr, config.n_mels, generator=g, dtype=dtype),
        prompt_lengths=torch.tensor(t_r),
        timbre=torch.randn(b, config.timbre_dim, generator=g, dtype=dtype),
        f0=100 + 100 * torch.rand(b, t_v, generator=g, dtype=dtype),
        energy=torch.rand(b, t_v, generator=g, dtype=dtype),
        mel=torch.randn(b, t_mel, config.n_mels, generator=g, dtype=dtype),
        units=torch.randint(0, config.n_units, (b, t_mel // 2), generator=g) if units else None,
        ids=[f"u{i}" for i in range(b)],
    )


def _rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def fd_input_check(fn, inputs, eps=1e-6, seed=0) -> float:
    """Worst relative error between autograd and central differences over every input entry.

    ``fn`` maps the (double) input tensors to an output tensor; the scalar
    loss is a fixed random projection of that output.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    with torch.no_grad():
        out = fn(*inputs)
    w = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)

    def loss(*xs):
        return (fn(*xs) * w).sum()

    grads = torch.autograd.grad(loss(*inputs), inputs)
    worst = 0.0
    for k, x in enumerate(inputs):
        fd = torch.zeros_like(x)
        flat = x.detach().view(-1)
        for i in range(flat.numel()):
            args = [y.detach() for y in inputs]
            plus, minus = args[k].clone(), args[k].clone()
            plus.view(-1)[i] += eps
            minus.view(-1)[i] -= eps
            with torch.no_grad():
                args[k] = plus
                lp = loss(*args).item()
                args[k] = minus
                lm = loss(*args).item()
            fd.view(-1)[i] = (lp - lm) / (2 * eps)
        worst = max(worst, _rel_err(grads[k], fd))
    return worst


def fd_param_check(module: torch.nn.Module, fn, eps=1e-6, seed=0, n_directions=3) -> float:
    """Directional derivative check over all trainable parameters of ``module``.

    Compares sum(grad * d) with (L(p + eps d) - L(p - eps d)) / (2 eps) for a
    few random unit directions ``d``.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    with torch.no_grad():
        out = fn()
    g = torch.Generator().manual_seed(seed + 1)
    w = torch.randn(out.shape, generator=g, dtype=out.dtype)

    def loss():
        return (fn() * w).sum()

    grads = torch.autograd.grad(loss(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if gr is None else gr for p, gr in zip(params, grads)]
    worst = 0.0
    for _ in range(n_directions):
        dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
        norm = torch.sqrt(sum((d ** 2).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum((gr * d).sum() for gr, d in zip(grads, dirs)).item()
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(eps * d)
            lp = loss().item()
            for p, d in zip(params, dirs):
                p.sub_(2 * eps * d)
            lm = loss().item()
            for p, d in zip(params, dirs):
                p.add_(eps * d)
        numeric = (lp - lm) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return worst
