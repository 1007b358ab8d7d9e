"""Synthetic prosody corpora drawn from a fully known generative process.

Each utterance is a symbol sequence ``y`` with per-symbol latents following a
conditional AR(1) Gaussian process::

    z_n = A z_{n-1} + E emb(y_n) + sigma * eps_n,      z_0 = 0

Durations are shifted-geometric with a symbol-specific mean modulated by the
latent.  Every frame of phoneme ``n`` observes the same phoneme-level vector
plus i.i.d. Gaussian jitter.  The observation layout is

====================  ===================================================
channel 0             normalized energy ``(E - 60) / 4``
channel 1             normalized log-F0 (0 on unvoiced phonemes)
channel 2             voicing score, +1 voiced / -1 unvoiced
channels 3 .. 3+K     cepstra
remaining channels    fixed random tanh decoder of the latent
====================  ===================================================

and :func:`analyze_observation` turns any observation matrix back into frame
tracks, which plays the role of pitch/energy extraction for decoded samples.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import serialization as ser
from .core import LOG_2PI, RngStream
from .metrics import FrameTrack

ENERGY_BASE, ENERGY_SCALE = 60.0, 4.0
F0_BASE, F0_LOG_SCALE = 150.0, 0.15
TRACK_CHANNELS = 3


class ProcessMismatchError(ValueError):
    pass


@dataclass
class CorpusConfig:
    n_utterances: int = 200
    min_len: int = 8
    max_len: int = 24
    vocab: int = 40
    latent_dim: int = 8
    obs_dim: int = 32
    n_cep: int = 13
    seed: int = 0
    ar_radius: float = 0.7
    innovation_std: float = 0.5
    symbol_scale: float = 0.6
    obs_noise: float = 0.3
    unvoiced_frac: float = 0.3
    max_duration: int = 40
    duration_effect: float = 0.3
    decoder_hidden: int = 32

    def validate(self) -> None:
        for name in ("vocab", "latent_dim", "obs_dim", "n_cep", "min_len", "max_len",
                     "max_duration", "decoder_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_utterances < 0:
            raise ValueError("n_utterances must be >= 0")
        if self.min_len > self.max_len:
            raise ValueError(f"length range [{self.min_len}, {self.max_len}] is empty")
        if self.obs_dim < TRACK_CHANNELS + self.n_cep:
            raise ValueError(f"obs_dim must be >= {TRACK_CHANNELS + self.n_cep} "
                             f"(3 track channels + n_cep)")
        if not 0.0 <= self.ar_radius < 1.0:
            raise ValueError("ar_radius must lie in [0, 1)")
        if not self.innovation_std > 0 or not self.obs_noise > 0:
            raise ValueError("innovation_std and obs_noise must be positive")
        if not 0.0 <= self.unvoiced_frac <= 1.0:
            raise ValueError("unvoiced_frac must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**known)


_PROCESS_ARRAYS = ("embedding", "mix", "ar", "voiced_symbols", "dur_mean", "w_dur",
                   "w_energy", "w_f0", "cep_map", "dec_w1", "dec_b1", "dec_w2")


@dataclass(eq=False)
class TrueProcess:
    embedding: np.ndarray      # (V, D) symbol offsets before mixing
    mix: np.ndarray            # (D, D)
    ar: np.ndarray             # (D, D), spectral radius < 1
    innovation_std: float
    voiced_symbols: np.ndarray  # (V,) 1.0 voiced / 0.0 unvoiced
    dur_mean: np.ndarray       # (V,) mean of the geometric part, in frames
    w_dur: np.ndarray          # (D,)
    duration_effect: float
    w_energy: np.ndarray       # (D,)
    w_f0: np.ndarray           # (D,)
    cep_map: np.ndarray        # (K, D)
    dec_w1: np.ndarray
    dec_b1: np.ndarray
    dec_w2: np.ndarray
    obs_noise: float
    max_duration: int

    @property
    def latent_dim(self) -> int:
        return self.ar.shape[0]

    @property
    def vocab(self) -> int:
        return self.embedding.shape[0]

    @property
    def n_cep(self) -> int:
        return self.cep_map.shape[0]

    @property
    def obs_dim(self) -> int:
        return TRACK_CHANNELS + self.n_cep + self.dec_w2.shape[1]

    def symbol_offsets(self, symbols) -> np.ndarray:
        """``E emb(y_n)`` for every step, shape (N, D)."""
        return self.embedding[np.asarray(symbols)] @ self.mix.T

    def conditional_means(self, symbols, latents) -> np.ndarray:
        """Mean of z_n given z_{n-1} and y_n, using z_0 = 0."""
        prev = np.vstack([np.zeros((1, self.latent_dim)), latents[:-1]])
        return prev @ self.ar.T + self.symbol_offsets(symbols)

    def phoneme_observation(self, symbols, latents) -> np.ndarray:
        """Noise-free phoneme-level observation vectors, shape (N, obs_dim)."""
        voiced = self.voiced_symbols[np.asarray(symbols)]
        energy = latents @ self.w_energy
        f0 = voiced * (latents @ self.w_f0)
        voicing = 2.0 * voiced - 1.0
        cep = latents @ self.cep_map.T
        extra = np.tanh(latents @ self.dec_w1 + self.dec_b1) @ self.dec_w2
        return np.column_stack([energy, f0, voicing, cep, extra])

    def to_dict(self) -> dict:
        d = {k: ser.encode_array(getattr(self, k)) for k in _PROCESS_ARRAYS}
        d.update(innovation_std=float(self.innovation_std), obs_noise=float(self.obs_noise),
                 duration_effect=float(self.duration_effect), max_duration=int(self.max_duration))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrueProcess":
        kw = {k: ser.decode_array(d[k]) for k in _PROCESS_ARRAYS}
        return cls(innovation_std=float(d["innovation_std"]), obs_noise=float(d["obs_noise"]),
                   duration_effect=float(d["duration_effect"]),
                   max_duration=int(d["max_duration"]), **kw)

    def checksum(self) -> str:
        return ser.sha256_bytes(ser.dumps(self.to_dict()).encode())

    def with_innovation_std(self, std: float) -> "TrueProcess":
        d = self.to_dict()
        d["innovation_std"] = float(std)
        return TrueProcess.from_dict(d)


@dataclass(eq=False)
class Utterance:
    id: str
    symbols: np.ndarray
    durations: np.ndarray
    oracle_latents: np.ndarray
    track: FrameTrack
    observation: np.ndarray

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.oracle_latents = np.asarray(self.oracle_latents, dtype=np.float64)
        self.observation = np.asarray(self.observation, dtype=np.float64)

    @property
    def n_phonemes(self) -> int:
        return len(self.symbols)

    @property
    def n_frames(self) -> int:
        return self.observation.shape[0]

    def check(self) -> None:
        n = self.n_phonemes
        if len(self.durations) != n or self.oracle_latents.shape[0] != n:
            raise ValueError(f"{self.id}: per-phoneme arrays disagree with {n} symbols")
        if np.any(self.durations < 1):
            raise ValueError(f"{self.id}: durations must be >= 1")
        total = int(self.durations.sum())
        if total != self.track.n_frames or total != self.n_frames:
            raise ValueError(f"{self.id}: durations sum to {total} but tracks have "
                             f"{self.track.n_frames} and observation {self.n_frames} frames")

    def pooled_observation(self) -> np.ndarray:
        """Per-phoneme mean of observation frames under the exact alignment."""
        starts = np.concatenate([[0], np.cumsum(self.durations)[:-1]])
        return np.add.reduceat(self.observation, starts, axis=0) / self.durations[:, None]

    def within_phoneme_scatter(self) -> float:
        """Sum over frames of the squared distance to the frame's phoneme mean."""
        pooled = np.repeat(self.pooled_observation(), self.durations, axis=0)
        return float(np.sum((self.observation - pooled) ** 2))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        t, o = self.track, other.track
        return (self.id == other.id
                and np.array_equal(self.symbols, other.symbols)
                and np.array_equal(self.durations, other.durations)
                and np.array_equal(self.oracle_latents, other.oracle_latents)
                and np.array_equal(self.observation, other.observation)
                and np.array_equal(t.f0, o.f0) and np.array_equal(t.voiced, o.voiced)
                and np.array_equal(t.energy, o.energy) and np.array_equal(t.mcep, o.mcep))


@dataclass(eq=False)
class Corpus:
    config: CorpusConfig
    process_checksum: str
    utterances: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (asdict(self.config) == asdict(other.config)
                and self.process_checksum == other.process_checksum
                and len(self) == len(other)
                and all(a == b for a, b in zip(self.utterances, other.utterances)))

    def split(self, n_heldout: int) -> tuple["Corpus", "Corpus"]:
        """Return (first part, last ``n_heldout`` utterances)."""
        if not 0 <= n_heldout <= len(self):
            raise ValueError(f"cannot hold out {n_heldout} of {len(self)} utterances")
        cut = len(self) - n_heldout
        return (Corpus(self.config, self.process_checksum, self.utterances[:cut]),
                Corpus(self.config, self.process_checksum, self.utterances[cut:]))


def analyze_observation(x: np.ndarray, n_cep: int) -> FrameTrack:
    """Read frame tracks off observation channels (inverse of the track encoding)."""
    x = np.asarray(x, dtype=np.float64)
    voiced = x[:, 2] > 0.0
    energy = ENERGY_BASE + ENERGY_SCALE * x[:, 0]
    f0 = np.where(voiced, F0_BASE * np.exp(F0_LOG_SCALE * x[:, 1]), 0.0)
    return FrameTrack(f0=f0, voiced=voiced, energy=energy,
                      mcep=x[:, TRACK_CHANNELS:TRACK_CHANNELS + n_cep])


def make_process(config: CorpusConfig) -> TrueProcess:
    config.validate()
    rng = RngStream(config.seed).substream(0)
    D, V, K = config.latent_dim, config.vocab, config.n_cep
    raw = rng.normal((D, D))
    radius = np.max(np.abs(np.linalg.eigvals(raw)))
    ar = raw * (config.ar_radius / radius) if radius > 0 else raw * 0.0
    n_unvoiced = int(round(config.unvoiced_frac * V))
    voiced = np.ones(V)
    voiced[rng.permutation(V)[:n_unvoiced]] = 0.0
    extra = config.obs_dim - TRACK_CHANNELS - K
    H = config.decoder_hidden
    return TrueProcess(
        embedding=config.symbol_scale * rng.normal((V, D)),
        mix=np.linalg.qr(rng.normal((D, D)))[0],
        ar=ar,
        innovation_std=config.innovation_std,
        voiced_symbols=voiced,
        dur_mean=rng.uniform(V, 1.5, 7.0),
        w_dur=rng.normal(D) / math.sqrt(D),
        duration_effect=config.duration_effect,
        w_energy=rng.normal(D) / math.sqrt(D),
        w_f0=rng.normal(D) / math.sqrt(D),
        cep_map=rng.normal((K, D)) / math.sqrt(D),
        dec_w1=1.5 * rng.normal((D, H)) / math.sqrt(D),
        dec_b1=0.5 * rng.normal(H),
        dec_w2=rng.normal((H, extra)) / math.sqrt(H),
        obs_noise=config.obs_noise,
        max_duration=config.max_duration,
    )


def sample_utterance(process: TrueProcess, config: CorpusConfig, index: int,
                     rng: RngStream, prefix: str = "utt") -> Utterance:
    n = int(rng.integers(config.min_len, config.max_len + 1))
    symbols = rng.integers(0, process.vocab, n)
    D = process.latent_dim
    offsets = process.symbol_offsets(symbols)
    z = np.zeros((n, D))
    prev = np.zeros(D)
    eps = rng.normal((n, D))
    for t in range(n):
        prev = process.ar @ prev + offsets[t] + process.innovation_std * eps[t]
        z[t] = prev
    extra_mean = process.dur_mean[symbols] * np.exp(process.duration_effect * (z @ process.w_dur))
    durations = rng.generator.geometric(1.0 / (1.0 + extra_mean))
    durations = np.clip(durations, 1, process.max_duration)
    frames = np.repeat(process.phoneme_observation(symbols, z), durations, axis=0)
    x = frames + process.obs_noise * rng.normal(frames.shape)
    # reference voicing comes from the symbol, not from the noisy voicing score
    voiced = np.repeat(process.voiced_symbols[symbols] > 0, durations)
    x_ref = x.copy()
    x_ref[:, 2] = np.where(voiced, 1.0, -1.0)
    utt = Utterance(id=f"{prefix}{index:05d}", symbols=symbols, durations=durations,
                    oracle_latents=z, track=analyze_observation(x_ref, process.n_cep),
                    observation=x)
    utt.check()
    return utt


def generate_corpus(config: CorpusConfig, workers: int = 1) -> tuple[Corpus, TrueProcess]:
    """Generate ``config.n_utterances`` utterances and the process that made them.

    Utterance ``i`` draws only from substream ``(1, i)`` of the master seed, so
    the result does not depend on ``workers``.
    """
    process = make_process(config)
    master = RngStream(config.seed)

    def one(i: int) -> Utterance:
        return sample_utterance(process, config, i, master.substream(1, i))

    indices = range(config.n_utterances)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            utts = list(pool.map(one, indices))
    else:
        utts = [one(i) for i in indices]
    return Corpus(config, process.checksum(), utts), process


@dataclass(frozen=True)
class NllEstimate:
    value: float          # mean NLL per step and dimension
    stderr: float         # standard error over steps (0 with a single step)
    n_steps: int


def ar_gaussian_nll_terms(corpus: Corpus, process: TrueProcess) -> np.ndarray:
    """Per-step NLL (summed over dims) of the oracle latents under ``process``."""
    out = []
    for utt in corpus:
        mean = process.conditional_means(utt.symbols, utt.oracle_latents)
        u = (utt.oracle_latents - mean) / process.innovation_std
        nll = 0.5 * LOG_2PI + math.log(process.innovation_std) + 0.5 * u * u
        out.append(nll.sum(axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def oracle_nll(corpus: Corpus, process: TrueProcess, check: bool = True) -> NllEstimate:
    """Exact conditional NLL of the oracle latents, averaged per step and dimension."""
    if check and corpus.process_checksum != process.checksum():
        raise ProcessMismatchError("process checksum does not match the corpus header")
    terms = ar_gaussian_nll_terms(corpus, process) / process.latent_dim
    if terms.size == 0:
        raise ValueError("corpus has no steps")
    se = float(terms.std(ddof=1) / math.sqrt(terms.size)) if terms.size > 1 else 0.0
    return NllEstimate(float(terms.mean()), se, int(terms.size))


def stationary_covariance(process: TrueProcess) -> np.ndarray:
    """Stationary covariance of z under i.i.d. uniform symbols."""
    from scipy.linalg import solve_discrete_lyapunov

    offs = process.embedding @ process.mix.T
    cov_u = np.cov(offs, rowvar=False, bias=True) + process.innovation_std ** 2 * np.eye(process.latent_dim)
    return solve_discrete_lyapunov(process.ar, cov_u)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _utterance_record(u: Utterance) -> dict:
    return {
        "id": u.id,
        "symbols": [int(s) for s in u.symbols],
        "durations": [int(d) for d in u.durations],
        "oracle_latents": ser.encode_array(u.oracle_latents),
        "f0": ser.encode_array(u.track.f0),
        "voiced": [int(v) for v in u.track.voiced],
        "energy": ser.encode_array(u.track.energy),
        "mcep": ser.encode_array(u.track.mcep),
        "observation": ser.encode_array(u.observation),
    }


def _utterance_from_record(rec: dict) -> Utterance:
    track = FrameTrack(f0=ser.decode_array(rec["f0"]), voiced=np.asarray(rec["voiced"], dtype=bool),
                       energy=ser.decode_array(rec["energy"]), mcep=ser.decode_array(rec["mcep"]))
    return Utterance(id=str(rec["id"]), symbols=rec["symbols"], durations=rec["durations"],
                     oracle_latents=ser.decode_array(rec["oracle_latents"]), track=track,
                     observation=ser.decode_array(rec["observation"]))


def corpus_bytes(corpus: Corpus) -> bytes:
    lines = [ser.dumps(_utterance_record(u)) + "\n" for u in corpus]
    body = "".join(lines).encode()
    header = {
        "format_version": ser.FORMAT_VERSION,
        "kind": "corpus",
        "config": asdict(corpus.config),
        "process_checksum": corpus.process_checksum,
        "n_utterances": len(corpus),
        "records_sha256": ser.sha256_bytes(body),
    }
    return (ser.dumps(header) + "\n").encode() + body


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_bytes(corpus_bytes(corpus))


def load_corpus(path) -> Corpus:
    data = Path(path).read_bytes()
    return parse_corpus(data, str(path))


def parse_corpus(data: bytes, path: Optional[str] = None) -> Corpus:
    nl = data.find(b"\n")
    if nl < 0:
        raise ser.FormatError("missing header line", offset=len(data), path=path)
    try:
        header = json.loads(data[:nl])
    except json.JSONDecodeError as exc:
        raise ser.FormatError(f"header is not JSON: {exc.msg}", offset=exc.pos, path=path) from exc
    ser.check_version(header, path)
    if header.get("kind") != "corpus":
        raise ser.FormatError(f"expected kind 'corpus', got {header.get('kind')!r}", 0, path)
    body = data[nl + 1:]
    if ser.sha256_bytes(body) != header.get("records_sha256"):
        # locate a truncated/corrupt record before reporting a bare checksum failure
        _scan_records(body, nl + 1, path)
        raise ser.ChecksumError("record checksum mismatch", offset=nl + 1, path=path)
    utts = _scan_records(body, nl + 1, path)
    if len(utts) != header.get("n_utterances"):
        raise ser.FormatError(f"header promises {header.get('n_utterances')} utterances, "
                              f"found {len(utts)}", offset=len(data), path=path)
    config = CorpusConfig.from_dict(header["config"])
    return Corpus(config, header["process_checksum"], utts)


def _scan_records(body: bytes, base: int, path: Optional[str]) -> list:
    utts = []
    pos = 0
    while pos < len(body):
        end = body.find(b"\n", pos)
        if end < 0:
            raise ser.FormatError("truncated record (no terminating newline)",
                                  offset=base + pos, path=path)
        line = body[pos:end]
        try:
            rec = json.loads(line)
            utt = _utterance_from_record(rec)
            utt.check()
        except json.JSONDecodeError as exc:
            raise ser.FormatError(f"malformed record: {exc.msg}", offset=base + pos + exc.pos,
                                  path=path) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ser.FormatError(f"malformed record: {exc}", offset=base + pos, path=path) from exc
        utts.append(utt)
        pos = end + 1
    return utts


def process_bytes(process: TrueProcess) -> bytes:
    doc = {"format_version": ser.FORMAT_VERSION, "kind": "true_process",
           "checksum": process.checksum(), "process": process.to_dict()}
    return (ser.dumps(doc) + "\n").encode()


def save_process(process: TrueProcess, path) -> None:
    Path(path).write_bytes(process_bytes(process))


def load_process(path) -> TrueProcess:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ser.FormatError(f"not JSON: {exc.msg}", offset=exc.pos, path=str(path)) from exc
    ser.check_version(doc, str(path))
    process = TrueProcess.from_dict(doc["process"])
    if process.checksum() != doc.get("checksum"):
        raise ser.ChecksumError("process checksum mismatch", offset=0, path=str(path))
    return process
