"""Parameterized building blocks over :mod:`prosody_priors.autodiff`.

Layers register their arrays in a shared :class:`ParamStore` under a dotted
prefix and read them back on every call, so loading a checkpoint into the
store is enough to restore a model.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .core import RngStream


class Dense:
    def __init__(self, store: ad.ParamStore, name: str, n_in: int, n_out: int,
                 rng: Optional[RngStream] = None, zero: bool = False, gain: float = 1.0):
        self.store = store
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        if zero or rng is None:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal((n_in, n_out)) * (gain / np.sqrt(n_in))
        store.add(f"{name}.w", w)
        store.add(f"{name}.b", np.zeros(n_out))

    def __call__(self, x) -> ad.Tensor:
        return ad.matmul(x, self.store[f"{self.name}.w"]) + self.store[f"{self.name}.b"]


class GRU:
    """Single-layer unidirectional GRU over (batch, time, features) inputs.

    Padded steps beyond an utterance's length are computed but never feed back
    into valid steps, because the recurrence only runs forward in time.
    """

    def __init__(self, store: ad.ParamStore, name: str, n_in: int, hidden: int, rng: RngStream):
        self.store = store
        self.name = name
        self.hidden = hidden
        store.add(f"{name}.w_x", rng.normal((n_in, 3 * hidden)) / np.sqrt(n_in))
        # orthogonal recurrent weights per gate
        blocks = [np.linalg.qr(rng.normal((hidden, hidden)))[0] for _ in range(3)]
        store.add(f"{name}.w_h", np.concatenate(blocks, axis=1))
        store.add(f"{name}.b", np.zeros(3 * hidden))

    def project(self, x) -> ad.Tensor:
        return ad.matmul(x, self.store[f"{self.name}.w_x"]) + self.store[f"{self.name}.b"]

    def step(self, gx_t, h) -> ad.Tensor:
        return ad.gru_cell(gx_t, ad.constant(h), self.store[f"{self.name}.w_h"])

    def initial(self, batch: int) -> ad.Tensor:
        return ad.constant(np.zeros((batch, self.hidden)))

    def __call__(self, x) -> ad.Tensor:
        x = ad.constant(x)
        gx = self.project(x)
        h = self.initial(x.shape[0])
        outs = []
        for t in range(x.shape[1]):
            h = self.step(gx[:, t], h)
            outs.append(h)
        return ad.stack(outs, axis=1)


class MLP:
    """``Dense -> tanh -> Dense`` with an optionally zero-initialized output layer."""

    def __init__(self, store: ad.ParamStore, name: str, n_in: int, hidden: int, n_out: int,
                 rng: RngStream, zero_out: bool = False):
        self.hidden = Dense(store, f"{name}.l1", n_in, hidden, rng)
        self.out = Dense(store, f"{name}.l2", hidden, n_out, rng, zero=zero_out)

    def __call__(self, x) -> ad.Tensor:
        return self.out(ad.tanh(self.hidden(x)))
