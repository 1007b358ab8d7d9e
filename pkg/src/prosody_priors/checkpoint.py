"""Versioned JSON checkpoints holding named float64 parameter arrays."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import serialization as ser


@dataclass
class Checkpoint:
    kind: str                       # fvae | dvae | ar_prior | flow
    hparams: dict
    params: dict                    # name -> ndarray
    optimizer: dict = field(default_factory=dict)   # {"m": {...}, "v": {...}, "t": {...}}
    step: int = 0
    rng_state: Optional[dict] = None
    prior_mode: Optional[str] = None
    buffers: dict = field(default_factory=dict)     # fixed, non-trained arrays
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc: dict[str, Any] = {
            "format_version": ser.FORMAT_VERSION,
            "kind": self.kind,
            "hparams": self.hparams,
            "params": {n: ser.encode_array(a) for n, a in self.params.items()},
            "buffers": {n: ser.encode_array(a) for n, a in self.buffers.items()},
            "optimizer": {
                "m": {n: ser.encode_array(a) for n, a in self.optimizer.get("m", {}).items()},
                "v": {n: ser.encode_array(a) for n, a in self.optimizer.get("v", {}).items()},
                "t": {n: int(t) for n, t in self.optimizer.get("t", {}).items()},
            },
            "step": int(self.step),
            "rng_state": self.rng_state,
            "prior_mode": self.prior_mode,
            "extra": self.extra,
        }
        return ser.dumps(doc) + "\n"

    @classmethod
    def from_json(cls, text: str, path: Optional[str] = None) -> "Checkpoint":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ser.FormatError(f"checkpoint is not JSON: {exc.msg}", offset=exc.pos,
                                  path=path) from exc
        ser.check_version(doc, path)
        try:
            opt = doc.get("optimizer", {})
            return cls(
                kind=doc["kind"],
                hparams=doc["hparams"],
                params={n: ser.decode_array(a) for n, a in doc["params"].items()},
                buffers={n: ser.decode_array(a) for n, a in doc.get("buffers", {}).items()},
                optimizer={
                    "m": {n: ser.decode_array(a) for n, a in opt.get("m", {}).items()},
                    "v": {n: ser.decode_array(a) for n, a in opt.get("v", {}).items()},
                    "t": {n: int(t) for n, t in opt.get("t", {}).items()},
                },
                step=int(doc.get("step", 0)),
                rng_state=doc.get("rng_state"),
                prior_mode=doc.get("prior_mode"),
                extra=doc.get("extra", {}),
            )
        except (KeyError, TypeError) as exc:
            raise ser.FormatError(f"checkpoint missing field: {exc}", path=path) from exc

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_json(Path(path).read_text(), str(path))

    def store_state(self) -> dict:
        return {"params": self.params, **self.optimizer}
