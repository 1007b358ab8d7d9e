"""Shared training configuration, loss traces and divergence handling."""

from __future__ import annotations

import csv
import io
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        msg = f"training diverged at step {step}"
        super().__init__(msg + (f": {detail}" if detail else ""))
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    batch_size: int = 32
    seed: int = 0
    beta: float = 1.0
    warmup_frac: float = 0.1
    clip_norm: Optional[float] = 10.0
    teacher: str = "sample"          # sample | mean
    lr_decay: bool = True            # cosine decay to 10% of lr
    eval_every: int = 0              # >0: score held-out data and keep the best parameters

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError("warmup_frac must lie in [0, 1]")
        if self.teacher not in ("sample", "mean"):
            raise ValueError("teacher must be 'sample' or 'mean'")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    def beta_at(self, step: int) -> float:
        """KL weight: linear warm-up over the first ``warmup_frac`` of steps."""
        warm = int(self.warmup_frac * self.steps)
        if warm <= 0:
            return self.beta
        return self.beta * min(1.0, (step + 1) / warm)

    def lr_at(self, step: int) -> float:
        if not self.lr_decay or self.steps <= 1:
            return self.lr
        frac = step / (self.steps - 1)
        return self.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossTrace:
    rows: list = field(default_factory=list)   # (step, term, value)

    def log(self, step: int, **terms: float) -> None:
        for name in sorted(terms):
            self.rows.append((int(step), name, float(terms[name])))

    def series(self, term: str) -> np.ndarray:
        return np.array([v for _, t, v in self.rows if t == term])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "term", "value"])
        for step, term, value in self.rows:
            w.writerow([step, term, repr(value)])
        return buf.getvalue()


def check_finite(step: int, value: float, what: str = "loss") -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(step, f"{what} = {value}")


@contextmanager
def step_guard(step: int):
    """Report any floating-point failure inside a training step as divergence at ``step``."""
    try:
        yield
    except TrainingDiverged:
        raise
    except FloatingPointError as exc:
        raise TrainingDiverged(step, str(exc)) from exc


def smoothed(values: np.ndarray, window: int = 100) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(values)))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


class BestTracker:
    """Snapshot of the parameters with the lowest held-out score seen so far."""

    def __init__(self, store, names):
        self.store = store
        self.names = list(names)
        self.best = math.inf
        self.best_step = -1
        self.snapshot = None

    def update(self, step: int, score: float) -> bool:
        check_finite(step, score, "held-out score")
        if score < self.best:
            self.best = score
            self.best_step = step
            self.snapshot = {n: self.store[n].value.copy() for n in self.names}
            return True
        return False

    def restore(self) -> None:
        if self.snapshot is None:
            return
        for n, v in self.snapshot.items():
            self.store[n].value = v.copy()
