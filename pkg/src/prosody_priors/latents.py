"""Latent datasets: per-utterance posterior statistics that the priors are fit to.

File format is JSON-lines: one header line, then one record per utterance with
``{id, symbols, means, stds, sample, durations, context}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import serialization as ser
from .batching import pad


@dataclass(eq=False)
class LatentRecord:
    id: str
    symbols: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    sample: np.ndarray
    durations: np.ndarray
    context: np.ndarray

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        for name in ("means", "stds", "sample", "context"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.symbols)
        for name in ("means", "stds", "sample", "context"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{self.id}: {name} has {getattr(self, name).shape[0]} steps, "
                                 f"expected {n}")
        if self.means.shape != self.stds.shape or self.means.shape != self.sample.shape:
            raise ValueError(f"{self.id}: means/stds/sample shapes differ")
        if np.any(self.stds <= 0):
            raise ValueError(f"{self.id}: stds must be positive")
        if len(self.durations) != n or np.any(self.durations < 1):
            raise ValueError(f"{self.id}: durations must be positive, one per step")

    def __eq__(self, other) -> bool:
        if not isinstance(other, LatentRecord):
            return NotImplemented
        return self.id == other.id and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("symbols", "means", "stds", "sample", "durations", "context"))


@dataclass(eq=False)
class LatentDataset:
    records: list
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LatentDataset):
            return NotImplemented
        return self.meta == other.meta and len(self) == len(other) and all(
            a == b for a, b in zip(self.records, other.records))

    @property
    def latent_dim(self) -> int:
        return self.records[0].means.shape[1]

    @property
    def context_dim(self) -> int:
        return self.records[0].context.shape[1]

    def subset(self, idx) -> "LatentDataset":
        return LatentDataset([self.records[i] for i in idx], dict(self.meta))

    def split(self, n_heldout: int) -> tuple["LatentDataset", "LatentDataset"]:
        cut = len(self) - n_heldout
        return self.subset(range(cut)), self.subset(range(cut, len(self)))

    def batch(self, idx, field_name: str) -> tuple[np.ndarray, np.ndarray]:
        return pad([getattr(self.records[i], field_name) for i in idx])

    def mean_posterior_std(self) -> float:
        """Average posterior std over all steps and dims (collapse diagnostic)."""
        return float(np.mean(np.concatenate([r.stds.ravel() for r in self.records])))


def oracle_dataset(corpus, std: float = 1e-3) -> LatentDataset:
    """Latent dataset made directly from the oracle latents, with one-hot symbol context.

    ``means`` and ``sample`` equal the oracle latents and ``stds`` is a small
    constant, so KL training against it is maximum likelihood on the latents.
    """
    vocab = corpus.config.vocab
    recs = []
    for u in corpus:
        ctx = np.eye(vocab)[u.symbols]
        recs.append(LatentRecord(id=u.id, symbols=u.symbols, means=u.oracle_latents,
                                 stds=np.full_like(u.oracle_latents, std),
                                 sample=u.oracle_latents, durations=u.durations, context=ctx))
    return LatentDataset(recs, {"source": "oracle", "process_checksum": corpus.process_checksum})


def _record_doc(r: LatentRecord) -> dict:
    return {"id": r.id, "symbols": [int(s) for s in r.symbols],
            "means": ser.encode_array(r.means), "stds": ser.encode_array(r.stds),
            "sample": ser.encode_array(r.sample), "durations": [int(d) for d in r.durations],
            "context": ser.encode_array(r.context)}


def latents_bytes(ds: LatentDataset) -> bytes:
    header = {"format_version": ser.FORMAT_VERSION, "kind": "latents",
              "n_records": len(ds), "meta": ds.meta}
    lines = [ser.dumps(header)] + [ser.dumps(_record_doc(r)) for r in ds]
    return ("\n".join(lines) + "\n").encode()


def save_latents(ds: LatentDataset, path) -> None:
    Path(path).write_bytes(latents_bytes(ds))


def load_latents(path) -> LatentDataset:
    data = Path(path).read_bytes()
    offset = 0
    records = []
    header: Optional[dict] = None
    for line in data.split(b"\n"):
        if line:
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ser.FormatError(f"malformed line: {exc.msg}", offset=offset + exc.pos,
                                      path=str(path)) from exc
            if header is None:
                ser.check_version(doc, str(path))
                header = doc
            else:
                try:
                    records.append(LatentRecord(
                        id=doc["id"], symbols=doc["symbols"],
                        means=ser.decode_array(doc["means"]), stds=ser.decode_array(doc["stds"]),
                        sample=ser.decode_array(doc["sample"]), durations=doc["durations"],
                        context=ser.decode_array(doc["context"])))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ser.FormatError(f"malformed record: {exc}", offset=offset,
                                          path=str(path)) from exc
        offset += len(line) + 1
    if header is None:
        raise ser.FormatError("empty latent file", offset=0, path=str(path))
    if header.get("n_records") != len(records):
        raise ser.FormatError(f"header promises {header.get('n_records')} records, "
                              f"found {len(records)}", offset=len(data), path=str(path))
    return LatentDataset(records, header.get("meta", {}))
