"""Conditional normalizing flow prior over per-phoneme channel sequences.

Each step carries ``[z_n ; v_dur]`` where ``v_dur = log(d_n + u)``, ``u ~ U[0, 1)``
dequantizes the integer duration (the duration channel is optional).  The
stack maps data ``v`` to base variables ``z_0`` through repeating
``actnorm -> invertible linear -> affine coupling`` blocks, and

    log p(v | c) = log p_0(z_0 | c) + sum_i log|det J_i|

with every Jacobian taken in the data-to-base direction.  The base
distribution is a diagonal Gaussian whose per-step parameters come from a GRU
over the context followed by two linear heads.

The coupling conditioner sees the identity half at the previous, current and
next step (a width-3 temporal convolution) together with the context, so the
stack can model dependencies between neighbouring phonemes.

All batched inputs are ``(B, T, C)`` with a ``(B, T)`` mask; padded steps are
computed but never influence valid ones and are excluded from likelihoods.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .batching import chunks, minibatches
from .checkpoint import Checkpoint
from .core import GaussianSeq, RngStream, ShapeError, as_seq
from .corpus import NllEstimate
from .latents import LatentDataset
from .nn import GRU, Dense
from .training import BestTracker, LossTrace, TrainConfig, check_finite, step_guard


class FlowNonFinite(FloatingPointError):
    def __init__(self, layer: str, direction: str):
        super().__init__(f"non-finite value in flow layer '{layer}' ({direction})")
        self.layer = layer


def _shift_prev(x, mask):
    """``out[:, t] = x[:, t-1]`` with zeros at t = 0."""
    B, _, C = x.shape
    return ad.concat([np.zeros((B, 1, C)), x[:, :-1]], axis=1)


def _shift_next(x, mask):
    """``out[:, t] = x[:, t+1]`` when step t+1 is valid, else zeros."""
    B, _, C = x.shape
    nxt = ad.concat([x[:, 1:], np.zeros((B, 1, C))], axis=1)
    valid_next = np.concatenate([mask[:, 1:], np.zeros((mask.shape[0], 1))], axis=1)
    return ad.mul(nxt, valid_next[..., None])


class ActNorm:
    """Per-channel affine ``y = (x + bias) * exp(logs)``."""

    kind = "actnorm"

    def __init__(self, store: ad.ParamStore, name: str, channels: int):
        self.store, self.name, self.channels = store, name, channels
        store.add(f"{name}.bias", np.zeros(channels))
        store.add(f"{name}.logs", np.zeros(channels))

    def initialize(self, x: np.ndarray, mask: np.ndarray) -> None:
        """Set bias/scale so the valid entries of ``x`` get zero mean and unit std."""
        rows = x[mask > 0]
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        self.store[f"{self.name}.bias"].value = -mean
        self.store[f"{self.name}.logs"].value = -np.log(np.maximum(std, 1e-6))

    def forward(self, x, c, mask):
        b, s = self.store[f"{self.name}.bias"], self.store[f"{self.name}.logs"]
        y = ad.mul(ad.add(x, b), ad.exp(s))
        logdet = ad.mul(ad.sum(s), mask.sum(axis=1))
        return y, logdet

    def inverse(self, y, c, mask):
        b = self.store[f"{self.name}.bias"].value
        s = self.store[f"{self.name}.logs"].value
        return y * np.exp(-s) - b

    def buffers(self) -> dict:
        return {}


class InvLinear:
    """Channel mixing ``y_t = W x_t`` with ``W = P L (U + diag(sign * exp(logs)))``.

    The permutation and the diagonal signs are fixed at construction from the
    LU factorization of a random orthogonal matrix.
    """

    kind = "invlinear"

    def __init__(self, store: ad.ParamStore, name: str, channels: int, rng: Optional[RngStream]):
        self.store, self.name, self.channels = store, name, channels
        C = channels
        w0 = np.linalg.qr(rng.normal((C, C)))[0] if rng is not None else np.eye(C)
        perm, lower, upper = scipy.linalg.lu(w0)
        diag = np.diag(upper)
        self.perm = perm
        self.sign = np.sign(diag)
        self.lower_mask = np.tril(np.ones((C, C)), -1)
        self.upper_mask = np.triu(np.ones((C, C)), 1)
        store.add(f"{name}.lower", lower * self.lower_mask)
        store.add(f"{name}.upper", upper * self.upper_mask)
        store.add(f"{name}.logs", np.log(np.abs(diag)))

    def weight(self) -> ad.Tensor:
        C = self.channels
        s = self.store
        low = ad.add(ad.mul(s[f"{self.name}.lower"], self.lower_mask), np.eye(C))
        diag = ad.mul(np.eye(C), ad.reshape(ad.mul(ad.exp(s[f"{self.name}.logs"]), self.sign), (1, C)))
        up = ad.add(ad.mul(s[f"{self.name}.upper"], self.upper_mask), diag)
        return ad.matmul(ad.matmul(self.perm, low), up)

    def forward(self, x, c, mask):
        w = self.weight()
        y = ad.matmul(x, ad.transpose(w))
        logdet = ad.mul(ad.sum(self.store[f"{self.name}.logs"]), mask.sum(axis=1))
        return y, logdet

    def inverse(self, y, c, mask):
        w = self.weight().value
        return np.linalg.solve(w, y.reshape(-1, self.channels).T).T.reshape(y.shape)

    def buffers(self) -> dict:
        return {f"{self.name}.perm": self.perm, f"{self.name}.sign": self.sign}

    def load_buffers(self, buffers: dict) -> None:
        self.perm = np.asarray(buffers[f"{self.name}.perm"])
        self.sign = np.asarray(buffers[f"{self.name}.sign"])


class Coupling:
    """Affine coupling: the second channel half is scaled and shifted.

    ``y_b = x_b * s + t`` with ``s = sigmoid(raw) + 0.5`` and ``(t, raw)`` from a
    conditioner over ``[x_a(t-1), x_a(t), x_a(t+1), c_t]``.  The conditioner's
    output layer starts at zero, so a fresh coupling is the identity.
    """

    kind = "coupling"

    def __init__(self, store: ad.ParamStore, name: str, channels: int, context_dim: int,
                 hidden: int, rng: Optional[RngStream]):
        self.store, self.name, self.channels = store, name, channels
        self.n_id = channels // 2
        self.n_tr = channels - self.n_id
        self.inp = Dense(store, f"{name}.inp", 3 * self.n_id + context_dim, hidden, rng)
        self.out = Dense(store, f"{name}.out", hidden, 2 * self.n_tr, zero=True)

    def params(self, xa, c, mask):
        x_in = ad.concat([_shift_prev(xa, mask), xa, _shift_next(xa, mask), c], axis=-1)
        raw = self.out(ad.tanh(self.inp(x_in)))
        shift = raw[..., :self.n_tr]
        scale = ad.add(ad.sigmoid(raw[..., self.n_tr:]), 0.5)
        return shift, scale

    def forward(self, x, c, mask):
        x = ad.constant(x)
        xa, xb = x[..., :self.n_id], x[..., self.n_id:]
        shift, scale = self.params(xa, c, mask)
        yb = ad.add(ad.mul(xb, scale), shift)
        logdet = ad.sum(ad.mul(ad.sum(ad.log(scale), axis=-1), mask), axis=-1)
        return ad.concat([xa, yb], axis=-1), logdet

    def inverse(self, y, c, mask):
        ya, yb = y[..., :self.n_id], y[..., self.n_id:]
        shift, scale = self.params(ad.constant(ya), c, mask)
        xb = (yb - shift.value) / scale.value
        return np.concatenate([ya, xb], axis=-1)

    def buffers(self) -> dict:
        return {}


class BaseConditioner:
    """GRU over the context plus two linear heads giving per-step (mean, log std)."""

    def __init__(self, store: ad.ParamStore, name: str, context_dim: int, channels: int,
                 hidden: int, rng: RngStream):
        self.store, self.name, self.channels = store, name, channels
        self.gru = GRU(store, f"{name}.gru", context_dim, hidden, rng)
        self.mean = Dense(store, f"{name}.mean", hidden, channels, zero=True)
        self.logstd = Dense(store, f"{name}.logstd", hidden, channels, zero=True)

    def __call__(self, c) -> tuple[ad.Tensor, ad.Tensor]:
        h = self.gru(c)
        return self.mean(h), self.logstd(h)


@dataclass
class FlowConfig:
    latent_dim: int
    context_dim: int
    with_durations: bool = True
    n_blocks: int = 4
    coupling_hidden: int = 64
    base_hidden: int = 64
    seed: int = 0

    @property
    def channels(self) -> int:
        return self.latent_dim + int(self.with_durations)

    def validate(self) -> None:
        for k in ("latent_dim", "context_dim", "coupling_hidden", "base_hidden"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")


class FlowPrior:
    def __init__(self, config: FlowConfig, store: Optional[ad.ParamStore] = None):
        config.validate()
        self.config = config
        self.store = store if store is not None else ad.ParamStore()
        rng = RngStream(config.seed).substream(11)
        C = config.channels
        self.layers: list = []
        for i in range(config.n_blocks):
            self.layers.append(ActNorm(self.store, f"flow.{i}.actnorm", C))
            self.layers.append(InvLinear(self.store, f"flow.{i}.invlinear", C, rng))
            self.layers.append(Coupling(self.store, f"flow.{i}.coupling", C, config.context_dim,
                                        config.coupling_hidden, rng))
        self.base = BaseConditioner(self.store, "base", config.context_dim, C,
                                    config.base_hidden, rng)
        self.initialized = False

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def _check(self, v, c, mask) -> None:
        if v.shape[-1] != self.config.channels:
            raise ShapeError("flow channels", v.shape, (self.config.channels,))
        if c.shape[-1] != self.config.context_dim:
            raise ShapeError("flow context width", c.shape, (self.config.context_dim,))
        if v.shape[:2] != c.shape[:2] or v.shape[:2] != mask.shape:
            raise ShapeError("flow steps (data, context, mask)", v.shape[:2], c.shape[:2])

    def forward(self, v, c, mask) -> tuple[ad.Tensor, ad.Tensor]:
        """Batched data-to-base map; returns ``z_0`` and per-utterance logdet (B,)."""
        v, c = ad.constant(v), ad.constant(c)
        self._check(v, c, mask)
        x = ad.mul(v, mask[..., None])
        total = ad.constant(np.zeros(mask.shape[0]))
        for layer in self.layers:
            try:
                x, ld = layer.forward(x, c, mask)
            except ad.NonFiniteError as exc:
                raise FlowNonFinite(layer.name, "forward") from exc
            total = ad.add(total, ld)
        return x, total

    def inverse(self, z0: np.ndarray, c: np.ndarray, mask: np.ndarray) -> np.ndarray:
        z0 = np.asarray(z0, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        self._check(z0, c, mask)
        x = z0
        for layer in reversed(self.layers):
            try:
                x = layer.inverse(x, c, mask)
            except ad.NonFiniteError as exc:
                raise FlowNonFinite(layer.name, "inverse") from exc
            if not np.all(np.isfinite(x)):
                raise FlowNonFinite(layer.name, "inverse")
        return x * mask[..., None]

    def log_likelihood(self, v, c, mask) -> ad.Tensor:
        """Per-utterance ``log p(v | c)``, shape (B,)."""
        z0, logdet = self.forward(v, c, mask)
        mean, logstd = self.base(c)
        lp = ad.sum(ad.gaussian_log_prob(z0, mean, logstd), axis=-1)
        return ad.add(ad.sum(ad.mul(lp, mask), axis=-1), logdet)

    def initialize(self, v: np.ndarray, c: np.ndarray, mask: np.ndarray) -> None:
        """Data-dependent actnorm initialization from one batch, layer by layer."""
        x = ad.constant(np.asarray(v, dtype=np.float64) * mask[..., None])
        c = ad.constant(c)
        for layer in self.layers:
            if isinstance(layer, ActNorm):
                layer.initialize(x.value, mask)
            x, _ = layer.forward(x, c, mask)
        self.initialized = True

    def base_sample(self, c: np.ndarray, mask: np.ndarray, temperature: float, rngs) -> np.ndarray:
        if not temperature > 0 or not math.isfinite(temperature):
            raise ValueError(f"temperature must be > 0, got {temperature}")
        mean, logstd = self.base(c)
        eps = np.zeros(mean.shape)
        lengths = mask.sum(axis=1).astype(int)
        for i, r in enumerate(rngs):
            eps[i, :lengths[i]] = r.normal((lengths[i], self.config.channels))
        return (mean.value + temperature * np.exp(logstd.value) * eps) * mask[..., None]

    def sample_batch(self, c: np.ndarray, mask: np.ndarray, temperature: float, rngs):
        """Sample channel sequences; returns (latents (B, T, D), durations (B, T) or None)."""
        z0 = self.base_sample(c, mask, temperature, rngs)
        v = self.inverse(z0, c, mask)
        D = self.config.latent_dim
        if not self.config.with_durations:
            return v[..., :D], None
        return v[..., :D], undequantize(v[..., D]) * (mask > 0)

    def param_names(self) -> list[str]:
        return list(self.store.params)

    def buffers(self) -> dict:
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def to_checkpoint(self, step: int = 0, rng_state: Optional[dict] = None,
                      extra: Optional[dict] = None) -> Checkpoint:
        state = self.store.state_dict()
        hp = asdict(self.config)
        hp["layers"] = [[layer.kind, layer.name] for layer in self.layers]
        return Checkpoint(kind="flow", hparams=hp, params=state["params"],
                          optimizer={"m": state["m"], "v": state["v"], "t": state["t"]},
                          step=step, rng_state=rng_state, prior_mode="flow",
                          buffers=self.buffers(), extra=extra or {})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "FlowPrior":
        if ckpt.kind != "flow":
            raise ValueError(f"expected a flow checkpoint, got {ckpt.kind!r}")
        hp = dict(ckpt.hparams)
        layers = hp.pop("layers", None)
        flow = cls(FlowConfig(**hp))
        if layers is not None and [[l.kind, l.name] for l in flow.layers] != layers:
            raise ValueError("checkpoint layer order does not match the configured stack")
        flow.store.load_state_dict(ckpt.store_state())
        for layer in flow.layers:
            if isinstance(layer, InvLinear):
                layer.load_buffers(ckpt.buffers)
        flow.initialized = True
        return flow


# ---------------------------------------------------------------------------
# single-utterance wrappers
# ---------------------------------------------------------------------------

def _one(v, c):
    v = as_seq(v, "v")
    c = as_seq(c, "context")
    if v.shape[0] != c.shape[0]:
        raise ShapeError("data vs context step count", v.shape, c.shape)
    return v[None], c[None], np.ones((1, v.shape[0]))


def forward_with_logdet(flow: FlowPrior, v, c) -> tuple[np.ndarray, float]:
    v, c, m = _one(v, c)
    z0, ld = flow.forward(v, c, m)
    return z0.value[0], float(ld.value[0])


def inverse(flow: FlowPrior, z0, c) -> np.ndarray:
    z0, c, m = _one(z0, c)
    return flow.inverse(z0, c, m)[0]


def log_likelihood(flow: FlowPrior, v, c) -> float:
    v, c, m = _one(v, c)
    return float(flow.log_likelihood(v, c, m).value[0])


def base_distribution(flow: FlowPrior, c) -> GaussianSeq:
    c = as_seq(c, "context")
    mean, logstd = flow.base(c[None])
    return GaussianSeq(mean.value[0], logstd.value[0])


def sample(flow: FlowPrior, c, temperature: float, rng: RngStream):
    """One sample for a single context: (latents (N, D), durations (N,) or None)."""
    c = as_seq(c, "context")
    z, d = flow.sample_batch(c[None], np.ones((1, c.shape[0])), temperature, [rng])
    return z[0], (None if d is None else d[0])


# ---------------------------------------------------------------------------
# data and training
# ---------------------------------------------------------------------------

def dequantize(durations, u) -> np.ndarray:
    """``log(d + u)`` for integer durations ``d >= 1`` and ``u`` in [0, 1)."""
    return np.log(np.asarray(durations, dtype=np.float64) + u)


def undequantize(v) -> np.ndarray:
    # the small offset keeps exp(log(d)) from rounding down below d
    return np.maximum(1, np.floor(np.exp(v) + 1e-9)).astype(np.int64)


def flow_batch(flow: FlowPrior, ds: LatentDataset, idx, latents: str = "mean",
               rng: Optional[RngStream] = None):
    """Padded (v, context, mask) for dataset rows ``idx``.

    ``latents='sample'`` draws fresh posterior samples (needs ``rng``); the
    duration channel is dequantized with ``rng`` noise, or with ``u = 0.5``
    when no rng is given.
    """
    means, mask = ds.batch(idx, "means")
    if latents == "sample":
        stds, _ = ds.batch(idx, "stds")
        z = means + stds * rng.normal(means.shape)
    elif latents == "mean":
        z = means
    else:
        raise ValueError("latents must be 'mean' or 'sample'")
    ctx, _ = ds.batch(idx, "context")
    if flow.config.with_durations:
        dur, _ = ds.batch(idx, "durations")
        u = rng.uniform(dur.shape) if rng is not None else np.full(dur.shape, 0.5)
        vd = np.where(mask[..., None] > 0, dequantize(np.maximum(dur, 1), u), 0.0)
        v = np.concatenate([z, vd], axis=-1)
    else:
        v = z
    return v * mask[..., None], ctx, mask


def per_dim_nll(flow: FlowPrior, ds: LatentDataset, latents: str = "mean",
                rng: Optional[RngStream] = None, batch: int = 64) -> NllEstimate:
    """Mean negative log-likelihood per step and channel, with a per-utterance SE."""
    per_utt, steps = [], []
    for idx in chunks(len(ds), batch):
        v, c, m = flow_batch(flow, ds, idx, latents, rng)
        per_utt.append(-flow.log_likelihood(v, c, m).value)
        steps.append(m.sum(axis=1))
    nll, n = np.concatenate(per_utt), np.concatenate(steps)
    C = flow.config.channels
    value = float(nll.sum() / (n.sum() * C))
    ratio = nll / (n * C)
    se = float(ratio.std(ddof=1) / math.sqrt(len(ratio))) if len(ratio) > 1 else 0.0
    return NllEstimate(value, se, int(n.sum()))


def train_flow(flow: FlowPrior, dataset: LatentDataset, config: TrainConfig,
               valid: Optional[LatentDataset] = None) -> tuple[Checkpoint, LossTrace]:
    """Maximum-likelihood training on posterior latents (and dequantized durations).

    ``config.teacher`` selects the latents: ``sample`` draws fresh posterior
    samples each step, ``mean`` uses the posterior means.
    """
    config.validate()
    if dataset.latent_dim != flow.config.latent_dim or dataset.context_dim != flow.config.context_dim:
        raise ShapeError("dataset (latent, context) dims", (dataset.latent_dim, dataset.context_dim),
                         (flow.config.latent_dim, flow.config.context_dim))
    rng = RngStream(config.seed)
    batches = minibatches(len(dataset), config.batch_size, rng.substream(1))
    noise = rng.substream(2)
    names = flow.param_names()
    trace = LossTrace()
    tracker = BestTracker(flow.store, names) if valid is not None and config.eval_every else None
    for step in range(config.steps):
        v, c, m = flow_batch(flow, dataset, next(batches), config.teacher, noise)
        if not flow.initialized:
            flow.initialize(v, c, m)
        with step_guard(step), ad.GradContext() as gc:
            ll = flow.log_likelihood(v, c, m)
            loss = ad.mul(ad.sum(ll), -1.0 / (m.sum() * flow.config.channels))
        check_finite(step, float(loss.value))
        ad.backward(gc, loss)
        ad.adam_step(flow.store, config.lr_at(step), names=names, clip_norm=config.clip_norm)
        trace.log(step, nll=float(loss.value))
        if tracker is not None and ((step + 1) % config.eval_every == 0 or step + 1 == config.steps):
            score = per_dim_nll(flow, valid).value
            tracker.update(step, score)
            trace.log(step, valid_nll=score)
    if tracker is not None:
        tracker.restore()
    ckpt = flow.to_checkpoint(step=config.steps, rng_state=noise.get_state(),
                              extra={"train": asdict(config)})
    return ckpt, trace
