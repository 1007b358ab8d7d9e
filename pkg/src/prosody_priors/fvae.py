"""Toy fine-grained VAE with one latent vector per phoneme.

Text encoder: symbol embedding + GRU, giving a context ``c_n`` per phoneme.
Posterior ``q(z_n | x, y)``: observation frames are averaged per phoneme with
the exact alignment, concatenated with ``c_n`` and mapped to a diagonal
Gaussian.  The posterior has no autoregressive connections.
Decoder ``p(x | z)``: ``[z_n ; c_n]`` is mapped to one observation mean that
is repeated over the phoneme's frames, with unit observation variance.

Because the decoder mean is constant within a phoneme, the frame-level
Gaussian log-likelihood reduces exactly to per-phoneme sufficient statistics::

    sum_f |x_f - m_n|^2 = d_n |xbar_n - m_n|^2 + sum_f |x_f - xbar_n|^2

The prior is either N(0, I) per phoneme (``standard``, the FVAE) or the
autoregressive network of :mod:`prosody_priors.ar_prior` (``autoregressive``,
the DVAE), trained jointly with teacher-forced posterior samples.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .ar_prior import ArPriorNet
from .batching import chunks, minibatches, pad
from .checkpoint import Checkpoint
from .core import LOG_2PI, RngStream, ShapeError
from .corpus import Corpus, Utterance, analyze_observation
from .latents import LatentDataset, LatentRecord
from .metrics import ffe, mcd
from .nn import GRU, Dense
from .training import BestTracker, LossTrace, TrainConfig, check_finite, step_guard

PRIOR_MODES = ("standard", "autoregressive")


@dataclass
class FvaeConfig:
    vocab: int
    obs_dim: int
    n_cep: int = 13
    latent_dim: int = 8
    text_emb: int = 32
    text_hidden: int = 32
    enc_hidden: int = 64
    dec_hidden: int = 64
    prior_mode: str = "standard"
    prior_hidden: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")
        for k in ("vocab", "obs_dim", "latent_dim", "text_emb", "text_hidden",
                  "enc_hidden", "dec_hidden", "prior_hidden"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")

    @classmethod
    def for_corpus(cls, corpus: Corpus, **kw) -> "FvaeConfig":
        return cls(vocab=corpus.config.vocab, obs_dim=corpus.config.obs_dim,
                   n_cep=corpus.config.n_cep, **kw)


@dataclass
class ElboTerms:
    recon: float
    kl_per_step: np.ndarray
    beta: float

    @property
    def kl(self) -> float:
        return float(self.kl_per_step.sum())

    @property
    def total(self) -> float:
        return self.recon - self.beta * self.kl


@dataclass
class Batch:
    symbols: np.ndarray     # (B, T) int
    pooled: np.ndarray      # (B, T, obs)
    durations: np.ndarray   # (B, T)
    mask: np.ndarray        # (B, T)
    scatter: float          # within-phoneme sum of squares over the batch
    n_frames: int


class UtteranceCache:
    """Per-utterance sufficient statistics, computed once per corpus."""

    def __init__(self, corpus: Corpus):
        self.symbols = [u.symbols for u in corpus]
        self.pooled = [u.pooled_observation() for u in corpus]
        self.durations = [u.durations.astype(np.float64) for u in corpus]
        self.scatter = np.array([u.within_phoneme_scatter() for u in corpus])
        self.frames = np.array([u.n_frames for u in corpus])

    def __len__(self) -> int:
        return len(self.symbols)

    def batch(self, idx) -> Batch:
        idx = list(idx)
        sym, mask = pad([self.symbols[i] for i in idx])
        pooled, _ = pad([self.pooled[i] for i in idx])
        dur, _ = pad([self.durations[i] for i in idx])
        return Batch(sym[..., 0].astype(np.int64), pooled, dur[..., 0], mask,
                     float(self.scatter[idx].sum()), int(self.frames[idx].sum()))


class FvaeModel:
    def __init__(self, config: FvaeConfig, store: Optional[ad.ParamStore] = None):
        config.validate()
        self.config = config
        self.store = store if store is not None else ad.ParamStore()
        rng = RngStream(config.seed).substream(7)
        c = config
        self.store.add("text.emb", 0.5 * rng.normal((c.vocab, c.text_emb)))
        self.text_gru = GRU(self.store, "text.gru", c.text_emb, c.text_hidden, rng)
        self.enc = Dense(self.store, "post.l1", c.obs_dim + c.text_hidden, c.enc_hidden, rng)
        self.post_mean = Dense(self.store, "post.mean", c.enc_hidden, c.latent_dim, rng, gain=0.5)
        self.post_logstd = Dense(self.store, "post.logstd", c.enc_hidden, c.latent_dim, zero=True)
        self.dec1 = Dense(self.store, "dec.l1", c.latent_dim + c.text_hidden, c.dec_hidden, rng)
        self.dec2 = Dense(self.store, "dec.l2", c.dec_hidden, c.obs_dim, rng)
        self.prior: Optional[ArPriorNet] = None
        if c.prior_mode == "autoregressive":
            self.add_ar_prior()

    def add_ar_prior(self) -> ArPriorNet:
        """Attach a fresh AR prior (used for DVAE training and for conversion)."""
        if self.prior is None:
            c = self.config
            self.prior = ArPriorNet(self.store, c.text_hidden, c.latent_dim, c.prior_hidden,
                                    RngStream(c.seed).substream(8), prefix="prior")
            self.config.prior_mode = "autoregressive"
        return self.prior

    @property
    def prior_names(self) -> list[str]:
        return self.prior.param_names if self.prior is not None else []

    @property
    def vae_names(self) -> list[str]:
        prior = set(self.prior_names)
        return [n for n in self.store.params if n not in prior]

    # -- network pieces -----------------------------------------------------

    def text_context(self, symbols: np.ndarray) -> ad.Tensor:
        if np.any(symbols < 0) or np.any(symbols >= self.config.vocab):
            raise ValueError(f"symbols must lie in [0, {self.config.vocab})")
        emb = ad.getitem(self.store["text.emb"], symbols)
        return self.text_gru(emb)

    def posterior(self, pooled, context) -> tuple[ad.Tensor, ad.Tensor]:
        h = ad.tanh(self.enc(ad.concat([pooled, context], axis=-1)))
        return self.post_mean(h), self.post_logstd(h)

    def decode(self, z, context) -> ad.Tensor:
        return self.dec2(ad.tanh(self.dec1(ad.concat([z, context], axis=-1))))

    # -- objective ----------------------------------------------------------

    def batch_terms(self, b: Batch, eps: np.ndarray) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
        """(recon, per-step KL (B, T), context) for a batch with frozen noise ``eps``."""
        if b.pooled.shape[-1] != self.config.obs_dim:
            raise ShapeError("observation width", b.pooled.shape, (self.config.obs_dim,))
        c = self.text_context(b.symbols)
        mq, lq = self.posterior(b.pooled, c)
        z = mq + ad.mul(ad.exp(lq), eps)
        m = self.decode(z, c)
        sq = ad.sum(ad.squared_error(m, b.pooled), axis=-1)
        weighted = ad.sum(ad.mul(sq, b.durations * b.mask))
        const = -0.5 * b.scatter - 0.5 * b.n_frames * self.config.obs_dim * LOG_2PI
        recon = ad.add(ad.mul(weighted, -0.5), const)
        if self.prior is None:
            kl = ad.gaussian_kl(mq, lq, 0.0, 0.0)
        else:
            mp, lp = self.prior.forward(c, z)
            kl = ad.gaussian_kl(mq, lq, mp, lp)
        kl_steps = ad.mul(ad.sum(kl, axis=-1), b.mask)
        return recon, kl_steps, c

    def posterior_stats(self, b: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = self.text_context(b.symbols)
        mq, lq = self.posterior(b.pooled, c)
        return mq.value, lq.value, c.value

    # -- checkpoints --------------------------------------------------------

    def kind(self) -> str:
        return "dvae" if self.prior is not None else "fvae"

    def to_checkpoint(self, step: int = 0, rng_state: Optional[dict] = None,
                      extra: Optional[dict] = None) -> Checkpoint:
        state = self.store.state_dict()
        return Checkpoint(kind=self.kind(), hparams=asdict(self.config), params=state["params"],
                          optimizer={"m": state["m"], "v": state["v"], "t": state["t"]},
                          step=step, rng_state=rng_state, prior_mode=self.config.prior_mode,
                          extra=extra or {})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "FvaeModel":
        if ckpt.kind not in ("fvae", "dvae"):
            raise ValueError(f"expected an fvae/dvae checkpoint, got {ckpt.kind!r}")
        model = cls(FvaeConfig(**ckpt.hparams))
        model.store.load_state_dict(ckpt.store_state())
        return model


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def elbo(model: FvaeModel, utterance: Utterance, rng: RngStream, beta: float = 1.0) -> ElboTerms:
    """Single-sample ELBO of one utterance: ``recon - beta * sum(kl_per_step)``."""
    cache = UtteranceCache(Corpus(None, "", [utterance]))
    b = cache.batch([0])
    eps = rng.normal((1, utterance.n_phonemes, model.config.latent_dim))
    recon, kl_steps, _ = model.batch_terms(b, eps)
    return ElboTerms(recon=float(recon.value), kl_per_step=kl_steps.value[0], beta=beta)


def _neg_elbo(model: FvaeModel, b: Batch, eps, beta: float):
    recon, kl_steps, _ = model.batch_terms(b, eps)
    kl = ad.sum(kl_steps)
    loss = ad.mul(ad.sub(ad.mul(kl, beta), recon), 1.0 / b.n_frames)
    return loss, recon, kl


def heldout_neg_elbo(model: FvaeModel, cache: UtteranceCache, seed: int = 0,
                     beta: float = 1.0) -> float:
    """Per-frame negative ELBO on held-out data with fixed noise."""
    rng = RngStream(seed).substream(99)
    total, frames = 0.0, 0
    for idx in chunks(len(cache), 64):
        b = cache.batch(idx)
        eps = rng.normal(b.pooled.shape[:2] + (model.config.latent_dim,))
        loss, _, _ = _neg_elbo(model, b, eps, beta)
        total += float(loss.value) * b.n_frames
        frames += b.n_frames
    return total / frames


def train(model: FvaeModel, corpus: Corpus, config: TrainConfig,
          valid: Optional[Corpus] = None) -> tuple[Checkpoint, LossTrace]:
    """ELBO training with the model's prior (N(0, I) for FVAE, AR for DVAE)."""
    config.validate()
    if corpus.config is not None and corpus.config.obs_dim != model.config.obs_dim:
        raise ShapeError("corpus vs model observation width",
                         (corpus.config.obs_dim,), (model.config.obs_dim,))
    cache = UtteranceCache(corpus)
    vcache = UtteranceCache(valid) if valid is not None and len(valid) else None
    rng = RngStream(config.seed)
    batches = minibatches(len(cache), config.batch_size, rng.substream(1))
    noise = rng.substream(2)
    trace = LossTrace()
    names = list(model.store.params)
    tracker = BestTracker(model.store, names) if vcache is not None and config.eval_every else None
    for step in range(config.steps):
        b = cache.batch(next(batches))
        eps = noise.normal(b.pooled.shape[:2] + (model.config.latent_dim,))
        beta = config.beta_at(step)
        with step_guard(step), ad.GradContext() as gc:
            loss, recon, kl = _neg_elbo(model, b, eps, beta)
        check_finite(step, float(loss.value))
        ad.backward(gc, loss)
        ad.adam_step(model.store, config.lr_at(step), names=names, clip_norm=config.clip_norm)
        n_ph = float(b.mask.sum())
        trace.log(step, loss=float(loss.value), recon=float(recon.value) / b.n_frames,
                  kl=float(kl.value) / n_ph, beta=beta)
        if tracker is not None and ((step + 1) % config.eval_every == 0 or step + 1 == config.steps):
            score = heldout_neg_elbo(model, vcache, config.seed, config.beta)
            tracker.update(step, score)
            trace.log(step, valid_loss=score)
    if tracker is not None:
        tracker.restore()
    ckpt = model.to_checkpoint(step=config.steps, rng_state=noise.get_state(),
                               extra={"train": asdict(config)})
    return ckpt, trace


def _frozen_posterior(model: FvaeModel, b: Batch):
    mq, lq, c = model.posterior_stats(b)
    return mq, lq, c


def heldout_prior_kl(model: FvaeModel, corpus: Corpus, seed: int = 0) -> float:
    """Mean per-phoneme KL(q || p) with the posterior mean as teacher input."""
    if model.prior is None:
        raise ValueError("model has no autoregressive prior")
    cache = UtteranceCache(corpus)
    total, n = 0.0, 0.0
    for idx in chunks(len(cache), 64):
        b = cache.batch(idx)
        mq, lq, c = _frozen_posterior(model, b)
        mp, lp = model.prior.forward(c, mq)
        kl = ad.gaussian_kl(mq, lq, mp, lp).value.sum(axis=-1)
        total += float((kl * b.mask).sum())
        n += float(b.mask.sum())
    return total / n


def finetune_prior(model: FvaeModel, corpus: Corpus, config: TrainConfig,
                   valid: Optional[Corpus] = None) -> LossTrace:
    """Train only the prior network against the frozen posterior.

    Encoder, decoder and text encoder parameters are not touched.  The
    duration regressor inside the prior namespace is fit alongside.  With
    ``valid`` and ``config.eval_every`` set, the prior with the lowest held-out
    KL is kept, the untouched starting prior included.
    """
    from .ar_prior import duration_loss

    config.validate()
    if model.prior is None:
        raise ValueError("model has no autoregressive prior; call add_ar_prior() first")
    cache = UtteranceCache(corpus)
    rng = RngStream(config.seed)
    batches = minibatches(len(cache), config.batch_size, rng.substream(3))
    noise = rng.substream(4)
    names = model.prior_names
    trace = LossTrace()
    tracker = BestTracker(model.store, names) if valid is not None and config.eval_every else None
    if tracker is not None:
        # the starting prior is a candidate too, so fine-tuning never ends worse on ``valid``
        tracker.update(-1, heldout_prior_kl(model, valid))
    for step in range(config.steps):
        b = cache.batch(next(batches))
        mq, lq, c = _frozen_posterior(model, b)
        teacher = mq + np.exp(lq) * noise.normal(mq.shape) if config.teacher == "sample" else mq
        with step_guard(step), ad.GradContext() as gc:
            mp, lp = model.prior.forward(c, teacher)
            kl = ad.sum(ad.mul(ad.gaussian_kl(mq, lq, mp, lp), b.mask[..., None]))
            dl = duration_loss(model.prior, c, b.durations, b.mask)
            n = float(b.mask.sum())
            loss = ad.mul(ad.add(kl, dl), 1.0 / n)
        check_finite(step, float(loss.value))
        ad.backward(gc, loss)
        ad.adam_step(model.store, config.lr_at(step), names=names, clip_norm=config.clip_norm)
        trace.log(step, kl=float(kl.value) / n, dur_mse=float(dl.value) / n)
        if tracker is not None and ((step + 1) % config.eval_every == 0 or step + 1 == config.steps):
            score = heldout_prior_kl(model, valid)
            tracker.update(step, score)
            trace.log(step, valid_kl=score)
    if tracker is not None:
        tracker.restore()
    return trace


def extract_posteriors(model: FvaeModel, corpus: Corpus, seed: int = 0) -> LatentDataset:
    """Posterior means/stds, one reparameterized sample, durations and context per utterance.

    The sample of utterance ``i`` uses substream ``(5, i)`` of ``seed``.
    """
    if corpus.config is not None and corpus.config.obs_dim != model.config.obs_dim:
        raise ShapeError("corpus vs model observation width",
                         (corpus.config.obs_dim,), (model.config.obs_dim,))
    cache = UtteranceCache(corpus)
    master = RngStream(seed)
    records = []
    for idx in chunks(len(cache), 64):
        b = cache.batch(idx)
        mq, lq, c = _frozen_posterior(model, b)
        for j, i in enumerate(idx):
            u = corpus.utterances[i]
            n = u.n_phonemes
            mean, std = mq[j, :n], np.exp(lq[j, :n])
            sample = mean + std * master.substream(5, int(i)).normal(mean.shape)
            records.append(LatentRecord(id=u.id, symbols=u.symbols, means=mean, stds=std,
                                        sample=sample, durations=u.durations, context=c[j, :n]))
    return LatentDataset(records, {"source": model.kind(), "seed": int(seed),
                                   "latent_dim": model.config.latent_dim})


def render_frames(phoneme_obs: np.ndarray, durations) -> np.ndarray:
    """Repeat each phoneme-level observation over its frames."""
    return np.repeat(phoneme_obs, np.asarray(durations, dtype=np.int64), axis=0)


def decode_latents(model: FvaeModel, symbols, latents) -> np.ndarray:
    """Phoneme-level observation means for one utterance's latents."""
    c = model.text_context(np.asarray(symbols)[None])
    return model.decode(np.asarray(latents)[None], c).value[0]


@dataclass
class ReconReport:
    mcd_db: float
    ffe_pct: float
    mse: float
    n_utterances: int


def reconstruct(model: FvaeModel, corpus: Corpus) -> list[np.ndarray]:
    """Frame-level reconstructions from posterior means."""
    cache = UtteranceCache(corpus)
    out = []
    for idx in chunks(len(cache), 64):
        b = cache.batch(idx)
        mq, _, c = _frozen_posterior(model, b)
        m = model.decode(mq, c).value
        for j, i in enumerate(idx):
            u = corpus.utterances[i]
            out.append(render_frames(m[j, :u.n_phonemes], u.durations))
    return out


def reconstruction_report(model: FvaeModel, corpus: Corpus) -> ReconReport:
    """Utterance-averaged MCD and FFE, and frame MSE, of posterior-mean reconstructions."""
    recs = reconstruct(model, corpus)
    mcds, ffes, sq, n = [], [], 0.0, 0
    for u, x_hat in zip(corpus, recs):
        syn = analyze_observation(x_hat, model.config.n_cep)
        mcds.append(mcd(u.track, syn))
        ffes.append(ffe(u.track, syn))
        sq += float(np.sum((u.observation - x_hat) ** 2))
        n += x_hat.size
    return ReconReport(float(np.mean(mcds)), float(np.mean(ffes)), sq / n, len(recs))


def mean_observation_mse(train: Corpus, test: Corpus) -> float:
    """MSE of predicting every test frame by the training-set mean frame."""
    mu = np.concatenate([u.observation for u in train]).mean(axis=0)
    obs = np.concatenate([u.observation for u in test])
    return float(np.mean((obs - mu) ** 2))
