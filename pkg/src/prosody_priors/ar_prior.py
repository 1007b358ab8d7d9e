"""Autoregressive Gaussian prior p(z_n | z_<n, y) over phoneme latents.

The network sees the text context ``c_n`` and the previous latent
``z_{n-1}`` (a learned ``z_0`` at the first step), runs a GRU, and emits a
per-step mean and log standard deviation from two zero-initialized linear
heads.  A small duration regressor maps ``c_n`` to a log duration so that
AR-prior systems can generate full utterances.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import autodiff as ad
from .batching import minibatches
from .checkpoint import Checkpoint
from .core import GaussianSeq, RngStream, ShapeError, as_seq
from .corpus import NllEstimate
from .latents import LatentDataset
from .nn import GRU, MLP, Dense
from .training import BestTracker, LossTrace, TrainConfig, check_finite, step_guard


class ArPriorNet:
    def __init__(self, store: ad.ParamStore, context_dim: int, latent_dim: int,
                 hidden: int = 64, rng: Optional[RngStream] = None, prefix: str = "prior",
                 dur_hidden: int = 32):
        rng = rng if rng is not None else RngStream(0)
        self.store = store
        self.prefix = prefix
        self.context_dim = context_dim
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.dur_hidden = dur_hidden
        self.inp = Dense(store, f"{prefix}.inp", context_dim + latent_dim, hidden, rng)
        self.gru = GRU(store, f"{prefix}.gru", hidden, hidden, rng)
        self.mean_head = Dense(store, f"{prefix}.mean", hidden, latent_dim, zero=True)
        self.logstd_head = Dense(store, f"{prefix}.logstd", hidden, latent_dim, zero=True)
        store.add(f"{prefix}.z0", np.zeros(latent_dim))
        self.dur = MLP(store, f"{prefix}.dur", context_dim, dur_hidden, 1, rng)

    @property
    def param_names(self) -> list[str]:
        return self.store.names(self.prefix + ".")

    def hparams(self) -> dict:
        return {"context_dim": self.context_dim, "latent_dim": self.latent_dim,
                "hidden": self.hidden, "dur_hidden": self.dur_hidden, "prefix": self.prefix}

    def _check(self, context, teacher) -> None:
        c, z = ad.constant(context), ad.constant(teacher)
        if c.shape[:-1] != z.shape[:-1]:
            raise ShapeError("context vs teacher latents (steps)", c.shape, z.shape)
        if c.shape[-1] != self.context_dim or z.shape[-1] != self.latent_dim:
            raise ShapeError("context/latent widths", (c.shape[-1], z.shape[-1]),
                             (self.context_dim, self.latent_dim))

    def forward(self, context, teacher) -> tuple[ad.Tensor, ad.Tensor]:
        """Teacher-forced prior parameters for (B, T, *) inputs."""
        self._check(context, teacher)
        teacher = ad.constant(teacher)
        B = teacher.shape[0]
        z0 = ad.add(np.zeros((B, 1, self.latent_dim)), self.store[f"{self.prefix}.z0"])
        prev = ad.concat([z0, teacher[:, :-1]], axis=1)
        h_in = ad.tanh(self.inp(ad.concat([context, prev], axis=-1)))
        h = self.gru(h_in)
        return self.mean_head(h), self.logstd_head(h)

    def log_duration(self, context) -> ad.Tensor:
        return self.dur(context)[..., 0]

    def predict_durations(self, context) -> np.ndarray:
        d = np.rint(np.exp(self.log_duration(context).value))
        return np.maximum(d, 1).astype(np.int64)

    def sample_batch(self, context: np.ndarray, mask: np.ndarray, temperature: float,
                     rngs: list) -> np.ndarray:
        """Ancestral sampling for padded contexts; row ``i`` draws from ``rngs[i]``."""
        if not temperature >= 0 or not math.isfinite(temperature):
            raise ValueError(f"temperature must be >= 0, got {temperature}")
        B, T, _ = context.shape
        D = self.latent_dim
        eps = np.zeros((B, T, D))
        if temperature > 0:
            lengths = mask.sum(axis=1).astype(int)
            for i, r in enumerate(rngs):
                eps[i, :lengths[i]] = r.normal((lengths[i], D))
        s = self.store
        p = self.prefix
        prev = np.broadcast_to(s[f"{p}.z0"].value, (B, D))
        h = self.gru.initial(B)
        out = np.zeros((B, T, D))
        for t in range(T):
            x_t = np.concatenate([context[:, t], prev], axis=-1)
            h_in = ad.tanh(self.inp(x_t))
            h = self.gru.step(self.gru.project(h_in), h)
            mean = self.mean_head(h).value
            std = np.exp(self.logstd_head(h).value)
            z = mean + temperature * std * eps[:, t]
            out[:, t] = z
            prev = z
        return out


def prior_forward(net: ArPriorNet, context, teacher_latents) -> GaussianSeq:
    """Single-utterance teacher-forced prior distribution."""
    c = as_seq(context, "context")
    z = as_seq(teacher_latents, "teacher_latents")
    if c.shape[0] != z.shape[0]:
        raise ShapeError("context vs teacher step count", c.shape, z.shape)
    mean, log_std = net.forward(c[None], z[None])
    return GaussianSeq(mean.value[0], log_std.value[0])


def sample(net: ArPriorNet, context, temperature: float, rng: RngStream,
           with_durations: bool = True):
    """Sample one latent sequence (and durations) for a single context sequence."""
    c = as_seq(context, "context")
    z = net.sample_batch(c[None], np.ones((1, c.shape[0])), temperature, [rng])[0]
    if not with_durations:
        return z
    return z, net.predict_durations(c[None])[0]


def kl_loss(net: ArPriorNet, context, means, stds, teacher, mask) -> tuple[ad.Tensor, ad.Tensor]:
    """Masked sum of KL(q || p) over steps and dims, and the number of valid steps."""
    mp, lp = net.forward(context, teacher)
    kl = ad.gaussian_kl(means, np.log(stds), mp, lp)
    return ad.sum(ad.mul(kl, mask[..., None])), float(mask.sum())


def duration_loss(net: ArPriorNet, context, durations, mask) -> ad.Tensor:
    pred = net.log_duration(context)
    err = ad.squared_error(pred, np.log(np.maximum(durations, 1.0)))
    return ad.sum(ad.mul(err, mask))


def _batch(ds: LatentDataset, idx):
    means, mask = ds.batch(idx, "means")
    stds, _ = ds.batch(idx, "stds")
    stds = np.where(mask[..., None] > 0, stds, 1.0)
    ctx, _ = ds.batch(idx, "context")
    dur, _ = ds.batch(idx, "durations")
    return means, stds, ctx, dur[..., 0], mask


def mean_kl(net: ArPriorNet, ds: LatentDataset, teacher: str = "mean",
            rng: Optional[RngStream] = None, batch: int = 64) -> float:
    """Average per-step KL(q || p) (summed over dims) on a dataset."""
    total, steps = 0.0, 0.0
    for start in range(0, len(ds), batch):
        idx = range(start, min(start + batch, len(ds)))
        means, stds, ctx, _, mask = _batch(ds, idx)
        tf = means if teacher == "mean" else means + stds * rng.normal(means.shape)
        kl, n = kl_loss(net, ctx, means, stds, tf, mask)
        total += float(kl.value)
        steps += n
    return total / steps


def teacher_forced_nll(net: ArPriorNet, ds: LatentDataset, batch: int = 64) -> NllEstimate:
    """Per-dim NLL of the stored means under the teacher-forced prior."""
    per_step = []
    for start in range(0, len(ds), batch):
        idx = range(start, min(start + batch, len(ds)))
        means, _, ctx, _, mask = _batch(ds, idx)
        mp, lp = net.forward(ctx, means)
        lp_terms = ad.gaussian_log_prob(means, mp, lp).value.sum(axis=-1)
        per_step.append(-lp_terms[mask > 0] / net.latent_dim)
    terms = np.concatenate(per_step)
    se = float(terms.std(ddof=1) / math.sqrt(terms.size)) if terms.size > 1 else 0.0
    return NllEstimate(float(terms.mean()), se, int(terms.size))


def train_posthoc(net: ArPriorNet, dataset: LatentDataset, config: TrainConfig,
                  valid: Optional[LatentDataset] = None) -> LossTrace:
    """Fit the prior to frozen posteriors by minimizing the mean KL(q || p).

    With ``valid`` and ``config.eval_every > 0`` the held-out KL (mean teacher)
    is scored periodically and the best parameters are restored at the end.
    """
    config.validate()
    if dataset.latent_dim != net.latent_dim or dataset.context_dim != net.context_dim:
        raise ShapeError("dataset (latent, context) dims", (dataset.latent_dim, dataset.context_dim),
                         (net.latent_dim, net.context_dim))
    rng = RngStream(config.seed)
    batches = minibatches(len(dataset), config.batch_size, rng.substream(1))
    noise = rng.substream(2)
    trace = LossTrace()
    names = net.param_names
    tracker = BestTracker(net.store, names) if valid is not None and config.eval_every else None
    for step in range(config.steps):
        means, stds, ctx, dur, mask = _batch(dataset, next(batches))
        teacher = means + stds * noise.normal(means.shape) if config.teacher == "sample" else means
        with step_guard(step), ad.GradContext() as gc:
            kl, n = kl_loss(net, ctx, means, stds, teacher, mask)
            dl = duration_loss(net, ctx, dur, mask)
            loss = ad.mul(ad.add(kl, dl), 1.0 / n)
        check_finite(step, float(loss.value))
        ad.backward(gc, loss)
        ad.adam_step(net.store, config.lr_at(step), names=names, clip_norm=config.clip_norm)
        trace.log(step, kl=float(kl.value) / n, dur_mse=float(dl.value) / n)
        if tracker is not None and ((step + 1) % config.eval_every == 0 or step + 1 == config.steps):
            score = mean_kl(net, valid)
            tracker.update(step, score)
            trace.log(step, valid_kl=score)
    if tracker is not None:
        tracker.restore()
    return trace


def to_checkpoint(net: ArPriorNet, step: int = 0, extra: Optional[dict] = None) -> Checkpoint:
    state = net.store.state_dict()
    return Checkpoint(kind="ar_prior", hparams=net.hparams(), params=state["params"],
                      optimizer={"m": state["m"], "v": state["v"], "t": state["t"]},
                      step=step, prior_mode="autoregressive", extra=extra or {})


def from_checkpoint(ckpt: Checkpoint) -> ArPriorNet:
    if ckpt.kind != "ar_prior":
        raise ValueError(f"expected an ar_prior checkpoint, got {ckpt.kind!r}")
    hp = ckpt.hparams
    net = ArPriorNet(ad.ParamStore(), hp["context_dim"], hp["latent_dim"], hp["hidden"],
                     prefix=hp.get("prefix", "prior"), dur_hidden=hp["dur_hidden"])
    net.store.load_state_dict(ckpt.store_state())
    return net
