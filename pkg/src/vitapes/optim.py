"""AdamW with a linear-warmup cosine schedule."""

from __future__ import annotations

import math

import numpy as np


def cosine_warmup(step, total_steps, base_lr, warmup_fraction=0.1, min_lr=0.0):
    """Learning rate at ``step`` (0-based) of ``total_steps``."""
    total_steps = max(int(total_steps), 1)
    warmup = max(int(round(warmup_fraction * total_steps)), 0)
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(total_steps - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def no_decay(name):
    """Biases, norms, positional tables and the CLS vector are not decayed."""
    leaf = name.rsplit(".", 1)[-1]
    return (
        name.startswith("pe.")
        or name.startswith("decoder.pe")
        or name in ("cls", "decoder.mask_token")
        or leaf in ("g", "b")
        or leaf.startswith("b")
    )


class AdamW:
    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.1, grad_clip=None):
        self.named = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None

    def grad_norm(self):
        total = 0.0
        for _, p in self.named:
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return math.sqrt(total)

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        scale = 1.0
        if self.grad_clip is not None:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                scale = self.grad_clip / (norm + 1e-12)
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n, p in self.named:
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.weight_decay and not no_decay(n):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        state = {"t": np.array([self.t], dtype=np.int64)}
        for n, _ in self.named:
            state[f"m.{n}"] = self.m[n]
            state[f"v.{n}"] = self.v[n]
        return state

    def load_state_dict(self, state):
        self.t = int(state["t"][0])
        for n, _ in self.named:
            self.m[n] = np.array(state[f"m.{n}"])
            self.v[n] = np.array(state[f"v.{n}"])
