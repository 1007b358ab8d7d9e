"""Reconstruction, expressiveness and diversity metrics over frame tracks.

All standard deviations are population standard deviations (``ddof=0``) and
all averages are unweighted.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ShapeError

MCD_SCALE = 10.0 / math.log(10.0)
FFE_PITCH_TOLERANCE = 0.2


class MetricError(ValueError):
    pass


@dataclass(eq=False)
class FrameTrack:
    """Frame-level prosody tracks.  ``f0`` is only meaningful where ``voiced``."""

    f0: np.ndarray
    voiced: np.ndarray
    energy: np.ndarray
    mcep: np.ndarray

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        self.mcep = np.asarray(self.mcep, dtype=np.float64)
        if self.mcep.ndim != 2:
            raise ValueError(f"mcep must be (frames, K), got {self.mcep.shape}")
        n = self.n_frames
        for name in ("f0", "voiced", "energy"):
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"track field {name}", getattr(self, name).shape, (n,))

    @property
    def n_frames(self) -> int:
        return self.mcep.shape[0]


@dataclass(eq=False)
class PhonemeFeatures:
    """Per-phoneme energy, F0 and duration.  ``f0`` is 0 where ``f0_present`` is False."""

    energy: np.ndarray
    f0: np.ndarray
    f0_present: np.ndarray
    duration: np.ndarray

    @property
    def n_phonemes(self) -> int:
        return len(self.duration)


@dataclass(frozen=True)
class ProsodyStd:
    E: float
    F0: float
    Dur: float

    def as_tuple(self) -> tuple:
        return (self.E, self.F0, self.Dur)


def _check_frames(ref: FrameTrack, syn: FrameTrack) -> None:
    if ref.n_frames != syn.n_frames:
        raise ShapeError("reference vs synthesized frame count", (ref.n_frames,), (syn.n_frames,))


def ffe(ref: FrameTrack, syn: FrameTrack) -> float:
    """F0 frame error in percent.

    A frame counts as an error if the voicing decisions differ, or if both are
    voiced and the pitch deviates by more than 20% of the reference.
    """
    _check_frames(ref, syn)
    if ref.n_frames == 0:
        raise MetricError("ffe of empty tracks")
    voicing_err = ref.voiced != syn.voiced
    both = ref.voiced & syn.voiced
    pitch_err = both & (np.abs(syn.f0 - ref.f0) > FFE_PITCH_TOLERANCE * ref.f0)
    return 100.0 * float(np.mean(voicing_err | pitch_err))


def mcd(ref: FrameTrack, syn: FrameTrack) -> float:
    """Frame-averaged mel-cepstral distortion in dB, excluding coefficient 0."""
    _check_frames(ref, syn)
    if ref.mcep.shape[1] != syn.mcep.shape[1]:
        raise ShapeError("cepstral order", ref.mcep.shape, syn.mcep.shape)
    if ref.n_frames == 0:
        raise MetricError("mcd of empty tracks")
    diff = ref.mcep[:, 1:] - syn.mcep[:, 1:]
    per_frame = MCD_SCALE * np.sqrt(2.0 * np.sum(diff * diff, axis=1))
    return float(np.mean(per_frame))


def features_from_track(track: FrameTrack, durations: Sequence[int]) -> PhonemeFeatures:
    """Average frame tracks within each phoneme using an exact alignment."""
    durations = np.asarray(durations, dtype=np.int64)
    if np.any(durations < 1):
        raise MetricError("alignment durations must be >= 1")
    if int(durations.sum()) != track.n_frames:
        raise MetricError(f"alignment covers {int(durations.sum())} frames, "
                          f"track has {track.n_frames}")
    starts = np.concatenate([[0], np.cumsum(durations)[:-1]])
    energy = np.add.reduceat(track.energy, starts) / durations
    voiced_count = np.add.reduceat(track.voiced.astype(np.float64), starts)
    f0_sum = np.add.reduceat(np.where(track.voiced, track.f0, 0.0), starts)
    present = voiced_count > 0
    f0 = np.where(present, f0_sum / np.maximum(voiced_count, 1.0), 0.0)
    return PhonemeFeatures(energy=energy, f0=f0, f0_present=present,
                           duration=durations.astype(np.float64))


def features_from_utterance(utterance, alignment: Optional[Sequence[int]] = None) -> PhonemeFeatures:
    """Phoneme features of a corpus utterance, aligned by its own durations by default."""
    durations = utterance.durations if alignment is None else alignment
    return features_from_track(utterance.track, durations)


def _centred_std(x: np.ndarray) -> float:
    """Population std, exactly zero for constant input."""
    return float(np.std(x - x[0]))


def expressiveness_stddev(utterances: Sequence[tuple]) -> ProsodyStd:
    """Per-symbol-type std of each feature across the set, averaged over types.

    ``utterances`` is a sequence of ``(symbols, PhonemeFeatures)``.  A type
    contributes to a feature when it has at least two observations of it.
    """
    sym = np.concatenate([np.asarray(s, dtype=np.int64) for s, _ in utterances]) \
        if utterances else np.zeros(0, dtype=np.int64)
    if not len(sym):
        raise MetricError("no phonemes given")
    energy = np.concatenate([f.energy for _, f in utterances])
    dur = np.concatenate([f.duration for _, f in utterances])
    f0 = np.concatenate([f.f0 for _, f in utterances])
    present = np.concatenate([f.f0_present for _, f in utterances])

    e_stds, d_stds, f_stds = [], [], []
    for s in np.unique(sym):
        idx = sym == s
        if idx.sum() >= 2:
            e_stds.append(_centred_std(energy[idx]))
            d_stds.append(_centred_std(dur[idx]))
        fidx = idx & present
        if fidx.sum() >= 2:
            f_stds.append(_centred_std(f0[fidx]))
    if not e_stds:
        raise MetricError("no symbol type occurs at least twice")
    return ProsodyStd(E=float(np.mean(e_stds)),
                      F0=float(np.mean(f_stds)) if f_stds else 0.0,
                      Dur=float(np.mean(d_stds)))


def diversity_stddev(samples: Sequence[Sequence[PhonemeFeatures]]) -> ProsodyStd:
    """Per-position std across resamples of one text, averaged over positions then texts.

    ``samples[t][r]`` holds the features of resample ``r`` of text ``t``.
    """
    if not samples:
        raise MetricError("no texts given")
    e_text, f_text, d_text = [], [], []
    for t, versions in enumerate(samples):
        if len(versions) < 2:
            raise MetricError(f"text {t}: need at least 2 resamples, got {len(versions)}")
        counts = {v.n_phonemes for v in versions}
        if len(counts) != 1:
            raise MetricError(f"text {t}: inconsistent phoneme counts {sorted(counts)}")
        energy = np.stack([v.energy for v in versions])
        dur = np.stack([v.duration for v in versions])
        f0 = np.stack([v.f0 for v in versions])
        present = np.stack([v.f0_present for v in versions])
        # std is shift invariant; centring on the first version makes identical
        # resamples give exactly zero instead of rounding residue
        e_text.append(np.mean(np.std(energy - energy[0], axis=0)))
        d_text.append(np.mean(np.std(dur - dur[0], axis=0)))
        n_present = present.sum(axis=0)
        ok = n_present >= 2
        if ok.any():
            safe = np.maximum(n_present, 1)
            first = f0[np.argmax(present, axis=0), np.arange(f0.shape[1])]
            dev = np.where(present, f0 - first, 0.0)
            mu = dev.sum(axis=0) / safe
            var = np.where(present, (dev - mu) ** 2, 0.0).sum(axis=0) / safe
            f_text.append(np.mean(np.sqrt(var[ok])))
    return ProsodyStd(E=float(np.mean(e_text)),
                      F0=float(np.mean(f_text)) if f_text else 0.0,
                      Dur=float(np.mean(d_text)))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    model: str
    group: str = "prior"
    temperature: Optional[float] = None
    mcd_db: Optional[float] = None
    ffe_pct: Optional[float] = None
    expressiveness: Optional[ProsodyStd] = None
    diversity: Optional[ProsodyStd] = None
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("mcd_db", "ffe_pct"):
            val = getattr(self, name)
            if val is not None and not (math.isfinite(val) and val >= 0):
                raise MetricError(f"{name} must be finite and >= 0, got {val}")
        for name in ("expressiveness", "diversity"):
            val = getattr(self, name)
            if isinstance(val, dict):
                val = ProsodyStd(**val)
                setattr(self, name, val)
            if val is not None and not all(math.isfinite(x) and x >= 0 for x in val.as_tuple()):
                raise MetricError(f"{name} must be finite and >= 0, got {val}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


# report row order: reference systems first, then AR-prior systems, then flows by temperature.
GROUP_ORDER = {"reference": 0, "fvae": 1, "ar": 1, "dvae": 2, "flow": 3}


def sort_reports(reports: Sequence[MetricsReport]) -> list[MetricsReport]:
    return sorted(reports, key=lambda r: (GROUP_ORDER.get(r.group, 9),
                                          r.counts.get("dim", 0),
                                          r.temperature if r.temperature is not None else -1.0,
                                          r.model))


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.2f}"


def render_table(reports: Sequence[MetricsReport], kind: str, fmt: str = "markdown") -> str:
    """Render ``recon`` (MCD/FFE) or ``express``/``diversity`` (E/F0/Dur) tables."""
    rows = []
    for r in sort_reports(reports):
        if kind == "recon":
            if r.mcd_db is None:
                continue
            rows.append([r.model, _fmt(r.mcd_db), _fmt(r.ffe_pct)])
        else:
            val = r.expressiveness if kind == "express" else r.diversity
            if val is None:
                continue
            rows.append([r.model, _fmt(val.E), _fmt(val.F0), _fmt(val.Dur)])
    header = ["model", "MCD", "FFE"] if kind == "recon" else ["model", "E", "F0", "Dur"]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines) + "\n"
