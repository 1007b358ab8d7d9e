"""Sampling prosody from a prior and decoding it into phoneme-level features.

A *sampler* wraps a trained prior (post-hoc AR net, a DVAE's own prior, or a
flow) and produces latents plus integer durations for a padded batch of text
contexts.  Decoding always goes through an FVAE decoder: the phoneme-level
observation means are repeated over the sampled durations, analysed into
frame tracks, and reduced to phoneme features.

Sample ``r`` of text ``t`` draws from substream ``(6, t, r)`` of the seed, so
a sample set is reproducible and independent of batching.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import serialization as ser
from .ar_prior import ArPriorNet
from .core import RngStream
from .corpus import analyze_observation
from .flow import FlowPrior
from .fvae import FvaeModel, render_frames
from .metrics import PhonemeFeatures, ProsodyStd, diversity_stddev, expressiveness_stddev, \
    features_from_track

DEFAULT_TEMPERATURES = (0.33, 0.5, 0.8)
DEFAULT_TEXTS = 50
DEFAULT_RESAMPLES = 10


class UnknownSymbolError(ValueError):
    pass


class Sampler:
    """Uniform sampling interface over the prior families."""

    def __init__(self, prior, group: str):
        if not isinstance(prior, (ArPriorNet, FlowPrior)):
            raise TypeError(f"unsupported prior type {type(prior).__name__}")
        self.prior = prior
        self.group = group

    def sample_batch(self, context: np.ndarray, mask: np.ndarray, temperature: float,
                     rngs: list) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(self.prior, FlowPrior):
            if not self.prior.config.with_durations:
                raise ValueError("flow prior was trained without a duration channel")
            z, d = self.prior.sample_batch(context, mask, temperature, rngs)
            return z, d
        z = self.prior.sample_batch(context, mask, temperature, rngs)
        d = self.prior.predict_durations(context)
        return z, d


@dataclass
class SampleRecord:
    text: int
    resample: int
    temperature: float
    symbols: np.ndarray
    latents: np.ndarray
    durations: np.ndarray
    features: PhonemeFeatures


def decode_features(model: FvaeModel, symbols, latents, durations) -> PhonemeFeatures:
    """Phoneme features of the decoded observation for one sampled utterance."""
    ctx = model.text_context(np.asarray(symbols)[None])
    obs = model.decode(np.asarray(latents)[None], ctx).value[0]
    frames = render_frames(obs, durations)
    track = analyze_observation(frames, model.config.n_cep)
    return features_from_track(track, durations)


def sample_texts(model: FvaeModel, sampler: Sampler, texts: Sequence[np.ndarray],
                 temperature: float, resamples: int, seed: int) -> list[SampleRecord]:
    """``resamples`` decoded samples for each text, ordered by (text, resample)."""
    for sym in texts:
        sym = np.asarray(sym)
        if sym.size == 0 or np.any(sym < 0) or np.any(sym >= model.config.vocab):
            raise UnknownSymbolError(f"text symbols must lie in [0, {model.config.vocab})")
    master = RngStream(seed)
    out = []
    for t, sym in enumerate(texts):
        sym = np.asarray(sym, dtype=np.int64)
        ctx = model.text_context(sym[None]).value
        ctx = np.repeat(ctx, resamples, axis=0)
        mask = np.ones(ctx.shape[:2])
        rngs = [master.substream(6, t, r) for r in range(resamples)]
        z, d = sampler.sample_batch(ctx, mask, temperature, rngs)
        d = np.broadcast_to(d, mask.shape)
        for r in range(resamples):
            feats = decode_features(model, sym, z[r], d[r])
            out.append(SampleRecord(t, r, float(temperature), sym, z[r], np.asarray(d[r]), feats))
    return out


def diversity_of(records: Sequence[SampleRecord]) -> ProsodyStd:
    """Diversity stddev over a sample set grouped by text."""
    by_text: dict = {}
    for rec in records:
        by_text.setdefault(rec.text, []).append(rec.features)
    return diversity_stddev([by_text[t] for t in sorted(by_text)])


def expressiveness_of(records: Sequence[SampleRecord]) -> ProsodyStd:
    """Expressiveness stddev over all sampled utterances, grouped by symbol type."""
    return expressiveness_stddev([(r.symbols, r.features) for r in records])


# ---------------------------------------------------------------------------
# sample files
# ---------------------------------------------------------------------------

def _record_doc(r: SampleRecord) -> dict:
    f = r.features
    return {"text": r.text, "resample": r.resample, "temperature": r.temperature,
            "symbols": [int(s) for s in r.symbols], "latents": ser.encode_array(r.latents),
            "durations": [int(x) for x in r.durations],
            "features": {"energy": ser.encode_array(f.energy), "f0": ser.encode_array(f.f0),
                         "f0_present": [bool(x) for x in f.f0_present],
                         "duration": ser.encode_array(f.duration)}}


def _record_from_doc(d: dict) -> SampleRecord:
    f = d["features"]
    feats = PhonemeFeatures(energy=ser.decode_array(f["energy"]), f0=ser.decode_array(f["f0"]),
                            f0_present=np.asarray(f["f0_present"], dtype=bool),
                            duration=ser.decode_array(f["duration"]))
    return SampleRecord(int(d["text"]), int(d["resample"]), float(d["temperature"]),
                        np.asarray(d["symbols"], dtype=np.int64), ser.decode_array(d["latents"]),
                        np.asarray(d["durations"], dtype=np.int64), feats)


def samples_bytes(records: Sequence[SampleRecord], meta: dict) -> bytes:
    header = {"format_version": ser.FORMAT_VERSION, "kind": "samples",
              "n_records": len(records), "meta": meta}
    lines = [ser.dumps(header)] + [ser.dumps(_record_doc(r)) for r in records]
    return ("\n".join(lines) + "\n").encode()


def parse_samples(data: bytes, path: Optional[str] = None) -> tuple[list[SampleRecord], dict]:
    import json

    header = None
    records = []
    offset = 0
    for line in data.split(b"\n"):
        if line:
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ser.FormatError(f"malformed line: {exc.msg}", offset=offset + exc.pos,
                                      path=path) from exc
            if header is None:
                ser.check_version(doc, path)
                if doc.get("kind") != "samples":
                    raise ser.FormatError(f"expected a samples file, got {doc.get('kind')!r}",
                                          offset=0, path=path)
                header = doc
            else:
                try:
                    records.append(_record_from_doc(doc))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ser.FormatError(f"malformed sample record: {exc}", offset=offset,
                                          path=path) from exc
        offset += len(line) + 1
    if header is None:
        raise ser.FormatError("empty samples file", offset=0, path=path)
    if header.get("n_records") != len(records):
        raise ser.FormatError(f"header promises {header.get('n_records')} records, "
                              f"found {len(records)}", offset=len(data), path=path)
    return records, header.get("meta", {})
