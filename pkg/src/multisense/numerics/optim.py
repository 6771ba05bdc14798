"""Adam optimizer and the warmup+cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LrSchedule:
    warmup_steps: int
    peak_lr: float
    total_steps: int


def schedule_lr(step, sched):
    """Linear warmup from 0 to peak at warmup_steps, cosine decay to 0 at total_steps.

    Steps beyond total_steps clamp to the final value.
    """
    if step < 0:
        raise ValueError(f"negative step {step}")
    w, total, peak = sched.warmup_steps, sched.total_steps, sched.peak_lr
    if step <= w:
        return peak * (step / w) if w > 0 else peak
    step = min(step, total)
    progress = (step - w) / max(1, total - w)
    return peak * 0.5 * (1.0 + float(np.cos(np.pi * progress)))


class Adam:
    """Adam over a {name: Tensor} parameter registry.

    Moments are created lazily per parameter and only updated for parameters
    that received a gradient in the current step, so parameters untouched by
    the enabled losses keep pristine optimizer state.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        """Apply one update using each parameter's accumulated .grad."""
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state_arrays(self):
        """Flat view of optimizer state for checkpointing."""
        out = {"__step__": np.asarray([self.step_count], dtype=np.float64)}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["__step__"][0])
        self.m = {}
        self.v = {}
        for key, arr in arrays.items():
            if key.startswith("m/"):
                self.m[key[2:]] = arr.copy()
            elif key.startswith("v/"):
                self.v[key[2:]] = arr.copy()
