"""Command-line pipeline: corpus generation, training, latent extraction, sampling, evaluation.

Every command writes into ``--out``: its artifacts, ``config.json`` (the
effective configuration, defaults included) and ``manifest.json`` (sha256 of
every output and input).  Configs are JSON files; command-line flags override
file values, and ``--set key=value`` overrides any dotted key with a JSON value.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data
error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

from . import __version__
from . import ar_prior as arp
from . import autodiff as ad
from . import serialization as ser
from .checkpoint import Checkpoint
from .core import RngStream, ShapeError
from .corpus import CorpusConfig, ProcessMismatchError, corpus_bytes, generate_corpus, \
    load_corpus, process_bytes
from .flow import FlowConfig, FlowNonFinite, FlowPrior, train_flow
from .fvae import FvaeConfig, FvaeModel, extract_posteriors, finetune_prior, \
    reconstruction_report, train as train_vae
from .latents import LatentDataset, latents_bytes, load_latents
from .metrics import MetricError, MetricsReport, features_from_utterance, \
    expressiveness_stddev, render_table, sort_reports
from .synthesis import DEFAULT_RESAMPLES, DEFAULT_TEMPERATURES, DEFAULT_TEXTS, Sampler, \
    UnknownSymbolError, diversity_of, expressiveness_of, parse_samples, sample_texts, \
    samples_bytes
from .training import TrainConfig, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _train_defaults(**kw) -> dict:
    return asdict(TrainConfig(**kw))


def _without(dc, *names) -> dict:
    d = asdict(dc)
    for n in names:
        d.pop(n)
    return d


DEFAULTS = {
    "gen-data": {"corpus": asdict(CorpusConfig()), "workers": 0},
    "train-fvae": {"model": _without(FvaeConfig(vocab=1, obs_dim=1), "vocab", "obs_dim", "n_cep",
                                     "prior_mode"),
                   "train": _train_defaults(lr=3e-3), "heldout": 0},
    "train-dvae": {"model": _without(FvaeConfig(vocab=1, obs_dim=1), "vocab", "obs_dim", "n_cep",
                                     "prior_mode"),
                   "train": _train_defaults(lr=3e-3), "heldout": 0},
    "train-flow": {"model": _without(FlowConfig(latent_dim=1, context_dim=1), "latent_dim",
                                     "context_dim"),
                   "train": _train_defaults(eval_every=100), "valid_frac": 0.1},
    "train-ar-prior": {"model": {"hidden": 64, "dur_hidden": 32, "seed": 0},
                       "train": _train_defaults(lr=1e-3, eval_every=100), "valid_frac": 0.1},
    "finetune-prior": {"train": _train_defaults(steps=1000, lr=1e-4), "prior_hidden": 64,
                       "heldout": 0},
    "extract-latents": {"seed": 0},
    "sample": {"seed": 0, "texts": DEFAULT_TEXTS, "resamples": DEFAULT_RESAMPLES,
               "temperatures": list(DEFAULT_TEMPERATURES), "name": ""},
    "eval-recon": {"texts": DEFAULT_TEXTS, "name": ""},
    "eval-express": {"texts": DEFAULT_TEXTS, "name": ""},
    "eval-diversity": {"name": ""},
    "report": {},
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise UsageError(f"unknown config key '{where}{k}'")
        if isinstance(out[k], dict) and out[k] and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key '{key}'")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key '{key}'")
    node[parts[-1]] = value


def build_config(key: str, args) -> dict:
    cfg = copy.deepcopy(DEFAULTS[key])
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = _merge(cfg, loaded)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            v = json.loads(v)
        except json.JSONDecodeError:
            pass
        _set_dotted(cfg, k, v)
    seed = getattr(args, "seed", None)
    if seed is not None:
        for path in ("corpus.seed", "model.seed", "train.seed", "seed"):
            try:
                _set_dotted(cfg, path, seed)
            except UsageError:
                pass
    dim = getattr(args, "dim", None)
    if dim is not None:
        for path in ("corpus.latent_dim", "model.latent_dim"):
            try:
                _set_dotted(cfg, path, dim)
            except UsageError:
                pass
    temps = getattr(args, "temperature", None)
    if temps:
        if "temperatures" not in cfg:
            raise UsageError("--temperature is not used by this command")
        cfg["temperatures"] = list(temps)
    _validate(key, cfg)
    return cfg


def _dataclass(cls, d: dict, **extra):
    try:
        obj = cls(**d, **extra)
    except TypeError as exc:
        raise UsageError(f"bad {cls.__name__} settings: {exc}") from exc
    try:
        obj.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return obj


def _validate(key: str, cfg: dict) -> None:
    if "corpus" in cfg:
        _dataclass(CorpusConfig, cfg["corpus"])
    if "train" in cfg:
        _dataclass(TrainConfig, cfg["train"])
    if key in ("train-fvae", "train-dvae"):
        _dataclass(FvaeConfig, cfg["model"], vocab=1, obs_dim=1)
    if key == "train-flow":
        _dataclass(FlowConfig, cfg["model"], latent_dim=1, context_dim=1)
    if "valid_frac" in cfg and not 0.0 <= float(cfg["valid_frac"]) < 1.0:
        raise UsageError("valid_frac must lie in [0, 1)")
    if "temperatures" in cfg:
        temps = cfg["temperatures"]
        if not temps or not all(isinstance(t, (int, float)) and t > 0 for t in temps):
            raise UsageError("temperatures must be a non-empty list of positive numbers")
    if "resamples" in cfg and int(cfg["resamples"]) < 2:
        raise UsageError("resamples must be >= 2")
    for k in ("texts", "heldout", "workers"):
        if k in cfg and int(cfg[k]) < 0:
            raise UsageError(f"{k} must be >= 0")


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

class RunOutput:
    """Collects artifacts in memory and writes them, the config echo and the manifest together."""

    def __init__(self, out: str, command: str, config: dict):
        self.dir = Path(out)
        self.command = command
        self.config = config
        self.files: dict[str, bytes] = {}
        self.inputs: list = []

    def add(self, name: str, data) -> None:
        self.files[name] = data.encode() if isinstance(data, str) else data

    def add_input(self, path) -> None:
        p = Path(path)
        self.inputs.append({"name": p.name, "sha256": ser.sha256_file(p)})

    def commit(self) -> None:
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create output directory {self.dir}: {exc}") from exc
        config_bytes = (ser.dumps(self.config) + "\n").encode()
        self.files["config.json"] = config_bytes
        manifest = {
            "tool": "prosody-priors", "version": __version__, "command": self.command,
            "config_sha256": ser.sha256_bytes(config_bytes),
            "inputs": self.inputs,
            "outputs": [{"name": n, "sha256": ser.sha256_bytes(b), "bytes": len(b)}
                        for n, b in sorted(self.files.items())],
        }
        self.files["manifest.json"] = (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode()
        for name, data in self.files.items():
            try:
                (self.dir / name).write_bytes(data)
            except OSError as exc:
                raise DataError(f"cannot write {self.dir / name}: {exc}") from exc


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_ckpt(path, kinds) -> Checkpoint:
    ckpt = Checkpoint.load(_need(path, "--checkpoint"))
    if ckpt.kind not in kinds:
        raise DataError(f"{path}: expected a checkpoint of kind {sorted(kinds)}, got {ckpt.kind!r}")
    return ckpt


def _vae_from(ckpt: Checkpoint, corpus=None) -> FvaeModel:
    model = FvaeModel.from_checkpoint(ckpt)
    if corpus is not None and corpus.config is not None:
        if (corpus.config.obs_dim, corpus.config.vocab) != (model.config.obs_dim, model.config.vocab):
            raise ShapeError("corpus (obs_dim, vocab) vs checkpoint",
                             (corpus.config.obs_dim, corpus.config.vocab),
                             (model.config.obs_dim, model.config.vocab))
    return model


def _tail(corpus, n: int):
    n = min(n, len(corpus)) if n > 0 else len(corpus)
    return corpus.split(n)[1]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg, out: RunOutput) -> None:
    config = CorpusConfig.from_dict(cfg["corpus"])
    workers = int(cfg["workers"]) or (os.cpu_count() or 1)
    corpus, process = generate_corpus(config, workers=workers)
    out.add("corpus.jsonl", corpus_bytes(corpus))
    out.add("process.json", process_bytes(process))


def _corpus_arg(args, out: RunOutput):
    path = _need(args.corpus, "--corpus")
    out.add_input(path)
    return load_corpus(path)


def cmd_train_vae(args, cfg, out: RunOutput, mode: str) -> None:
    corpus = _corpus_arg(args, out)
    model_cfg = FvaeConfig.for_corpus(corpus, prior_mode=mode, **cfg["model"])
    model = FvaeModel(model_cfg)
    train_cfg = TrainConfig.from_dict(cfg["train"])
    valid = None
    if cfg["heldout"]:
        corpus, valid = corpus.split(int(cfg["heldout"]))
    ckpt, trace = train_vae(model, corpus, train_cfg, valid=valid)
    out.add("checkpoint.json", ckpt.to_json())
    out.add("loss_trace.csv", trace.to_csv())


def _latents_arg(args, out: RunOutput) -> LatentDataset:
    path = _need(args.latents, "--latents")
    out.add_input(path)
    ds = load_latents(path)
    if len(ds) == 0:
        raise DataError(f"{path}: latent file has no records")
    return ds


def _split_latents(ds: LatentDataset, frac: float):
    n_valid = int(round(frac * len(ds)))
    if n_valid == 0 or n_valid >= len(ds):
        return ds, None
    return ds.split(n_valid)


def cmd_train_flow(args, cfg, out: RunOutput) -> None:
    ds = _latents_arg(args, out)
    train, valid = _split_latents(ds, float(cfg["valid_frac"]))
    flow = FlowPrior(FlowConfig(latent_dim=ds.latent_dim, context_dim=ds.context_dim, **cfg["model"]))
    ckpt, trace = train_flow(flow, train, TrainConfig.from_dict(cfg["train"]), valid=valid)
    out.add("checkpoint.json", ckpt.to_json())
    out.add("loss_trace.csv", trace.to_csv())


def cmd_train_ar(args, cfg, out: RunOutput) -> None:
    ds = _latents_arg(args, out)
    train, valid = _split_latents(ds, float(cfg["valid_frac"]))
    m = cfg["model"]
    net = arp.ArPriorNet(ad.ParamStore(), ds.context_dim, ds.latent_dim, int(m["hidden"]),
                         RngStream(int(m["seed"])).substream(8), dur_hidden=int(m["dur_hidden"]))
    tc = TrainConfig.from_dict(cfg["train"])
    trace = arp.train_posthoc(net, train, tc, valid=valid)
    out.add("checkpoint.json", arp.to_checkpoint(net, step=tc.steps,
                                                  extra={"train": asdict(tc)}).to_json())
    out.add("loss_trace.csv", trace.to_csv())


def cmd_finetune(args, cfg, out: RunOutput) -> None:
    ckpt = _load_ckpt(args.checkpoint, {"fvae", "dvae"})
    out.add_input(args.checkpoint)
    corpus = _corpus_arg(args, out)
    model = _vae_from(ckpt, corpus)
    if model.prior is None:
        model.config.prior_hidden = int(cfg["prior_hidden"])
        model.add_ar_prior()
    tc = TrainConfig.from_dict(cfg["train"])
    valid = None
    if cfg["heldout"]:
        corpus, valid = corpus.split(int(cfg["heldout"]))
    trace = finetune_prior(model, corpus, tc, valid=valid)
    out.add("checkpoint.json", model.to_checkpoint(step=ckpt.step, extra={
        "finetune": asdict(tc), "base_kind": ckpt.kind}).to_json())
    out.add("loss_trace.csv", trace.to_csv())


def cmd_extract(args, cfg, out: RunOutput) -> None:
    ckpt = _load_ckpt(args.checkpoint, {"fvae", "dvae"})
    out.add_input(args.checkpoint)
    corpus = _corpus_arg(args, out)
    model = _vae_from(ckpt, corpus)
    ds = extract_posteriors(model, corpus, seed=int(cfg["seed"]))
    out.add("latents.jsonl", latents_bytes(ds))
    out.add("posterior_std.json", ser.dumps({"mean_posterior_std": ds.mean_posterior_std(),
                                             "n_records": len(ds)}) + "\n")


def _sampler_for(args, model: FvaeModel, out: RunOutput) -> Sampler:
    if args.prior is None:
        if model.prior is None:
            raise UsageError("an FVAE checkpoint needs --prior (ar_prior or flow checkpoint)")
        return Sampler(model.prior, "dvae")
    pc = Checkpoint.load(_need(args.prior, "--prior"))
    out.add_input(args.prior)
    if pc.kind == "flow":
        prior = FlowPrior.from_checkpoint(pc)
        group = "flow"
        dims = (prior.config.latent_dim, prior.config.context_dim)
    elif pc.kind == "ar_prior":
        prior = arp.from_checkpoint(pc)
        group = "ar"
        dims = (prior.latent_dim, prior.context_dim)
    else:
        raise DataError(f"{args.prior}: not a prior checkpoint (kind {pc.kind!r})")
    if dims != (model.config.latent_dim, model.config.text_hidden):
        raise ShapeError("prior (latent, context) dims vs model", dims,
                         (model.config.latent_dim, model.config.text_hidden))
    return Sampler(prior, group)


def cmd_sample(args, cfg, out: RunOutput) -> None:
    ckpt = _load_ckpt(args.checkpoint, {"fvae", "dvae"})
    out.add_input(args.checkpoint)
    corpus = _corpus_arg(args, out)
    model = _vae_from(ckpt, corpus)
    sampler = _sampler_for(args, model, out)
    texts = [u.symbols for u in _tail(corpus, int(cfg["texts"]))]
    records = []
    for t in cfg["temperatures"]:
        records += sample_texts(model, sampler, texts, float(t), int(cfg["resamples"]),
                                int(cfg["seed"]))
    name = cfg["name"] or f"{sampler.group} D={model.config.latent_dim}"
    meta = {"group": sampler.group, "name": name, "dim": model.config.latent_dim,
            "texts": len(texts), "resamples": int(cfg["resamples"])}
    out.add("samples.jsonl", samples_bytes(records, meta))


def _reports_out(out: RunOutput, reports, kind: str) -> None:
    reports = sort_reports(reports)
    out.add("report.json", ser.dumps([r.to_dict() for r in reports]) + "\n")
    out.add("report.md", render_table(reports, kind, "markdown"))
    out.add("report.csv", render_table(reports, kind, "csv"))


def _load_samples(paths, out: RunOutput):
    if not paths:
        raise UsageError("--samples is required")
    sets = []
    for path in paths:
        p = Path(path)
        if p.is_dir():
            p = p / "samples.jsonl"
        if not p.is_file():
            raise DataError(f"sample file not found: {p}")
        out.add_input(p)
        records, meta = parse_samples(p.read_bytes(), str(p))
        if not records:
            raise DataError(f"{p}: sample file has no records")
        sets.append((records, meta))
    return sets


def _by_temperature(records):
    groups: dict = {}
    for r in records:
        groups.setdefault(r.temperature, []).append(r)
    return sorted(groups.items())


def cmd_eval(args, cfg, out: RunOutput, kind: str) -> None:
    reports = []
    if kind == "recon":
        ckpt = _load_ckpt(args.checkpoint, {"fvae", "dvae"})
        out.add_input(args.checkpoint)
        corpus = _corpus_arg(args, out)
        model = _vae_from(ckpt, corpus)
        held = _tail(corpus, int(cfg["texts"]))
        rec = reconstruction_report(model, held)
        name = cfg["name"] or f"{model.kind().upper()} D={model.config.latent_dim}"
        reports.append(MetricsReport(model=name, group="dvae" if model.prior else "fvae",
                                     mcd_db=rec.mcd_db, ffe_pct=rec.ffe_pct,
                                     counts={"utterances": rec.n_utterances,
                                             "dim": model.config.latent_dim},
                                     config={"mse": rec.mse}))
    elif kind == "express" and args.corpus and not args.samples:
        corpus = _corpus_arg(args, out)
        held = _tail(corpus, int(cfg["texts"]))
        std = expressiveness_stddev([(u.symbols, features_from_utterance(u)) for u in held])
        reports.append(MetricsReport(model=cfg["name"] or "ground truth", group="reference",
                                     expressiveness=std, counts={"utterances": len(held)}))
    else:
        for records, meta in _load_samples(args.samples, out):
            for temp, recs in _by_temperature(records):
                if kind == "express":
                    std = expressiveness_of(recs)
                    extra = {"expressiveness": std}
                else:
                    std = diversity_of(recs)
                    extra = {"diversity": std}
                name = cfg["name"] or meta.get("name", meta.get("group", "samples"))
                if meta.get("group") == "flow":
                    name = f"{name} T={temp:g}"
                reports.append(MetricsReport(
                    model=name, group=meta.get("group", "flow"),
                    temperature=temp if meta.get("group") == "flow" else None,
                    counts={"samples": len(recs), "dim": meta.get("dim", 0)},
                    config={"sampling_temperature": temp}, **extra))
    _reports_out(out, reports, kind)


def cmd_report(args, cfg, out: RunOutput) -> None:
    if not args.inputs:
        raise UsageError("report needs at least one --inputs report.json")
    reports = []
    for path in args.inputs:
        p = Path(path)
        if p.is_dir():
            p = p / "report.json"
        if not p.is_file():
            raise DataError(f"report file not found: {p}")
        out.add_input(p)
        try:
            reports += [MetricsReport.from_dict(d) for d in json.loads(p.read_text())]
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{p}: malformed report: {exc}") from exc
    reports = sort_reports(reports)
    parts = []
    for kind, title in (("recon", "Reconstruction"), ("express", "Expressiveness"),
                        ("diversity", "Diversity")):
        table = render_table(reports, kind, "markdown")
        if table.count("\n") > 2:
            parts.append(f"## {title}\n\n{table}")
            out.add(f"{kind}.csv", render_table(reports, kind, "csv"))
    out.add("report.md", "\n".join(parts))
    out.add("report.json", ser.dumps([r.to_dict() for r in reports]) + "\n")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a dotted config key with a JSON value")

    p = _Parser(prog="prosody-priors", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--dim", type=int, help="true latent dimension")
    g.add_argument("--workers", type=int, help="utterance worker threads (default: all cores)")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("variant", choices=["fvae", "dvae", "flow", "ar-prior"])
    t.add_argument("--corpus")
    t.add_argument("--latents")
    t.add_argument("--dim", type=int, help="latent dimension (fvae/dvae)")

    f = sub.add_parser("finetune-prior", parents=[common], help="fit only the AR prior")
    f.add_argument("--checkpoint")
    f.add_argument("--corpus")

    e = sub.add_parser("extract-latents", parents=[common], help="save posterior latents")
    e.add_argument("--checkpoint")
    e.add_argument("--corpus")

    s = sub.add_parser("sample", parents=[common], help="sample and decode prosody")
    s.add_argument("--checkpoint", help="FVAE/DVAE checkpoint used for decoding")
    s.add_argument("--prior", help="ar_prior or flow checkpoint (omit for a DVAE's own prior)")
    s.add_argument("--corpus", help="texts are the last `texts` utterances of this corpus")
    s.add_argument("--temperature", type=float, action="append")

    v = sub.add_parser("eval", parents=[common], help="compute metrics")
    v.add_argument("kind", choices=["recon", "express", "diversity"])
    v.add_argument("--checkpoint")
    v.add_argument("--corpus")
    v.add_argument("--samples", nargs="+")

    r = sub.add_parser("report", parents=[common], help="merge metric reports into tables")
    r.add_argument("--inputs", nargs="+")
    return p


def _dispatch(args) -> tuple[str, callable]:
    c = args.command
    if c == "gen-data":
        return "gen-data", cmd_gen_data
    if c == "train":
        if args.variant in ("fvae", "dvae"):
            mode = "standard" if args.variant == "fvae" else "autoregressive"
            return f"train-{args.variant}", lambda a, cfg, o: cmd_train_vae(a, cfg, o, mode)
        if args.variant == "flow":
            return "train-flow", cmd_train_flow
        return "train-ar-prior", cmd_train_ar
    if c == "finetune-prior":
        return c, cmd_finetune
    if c == "extract-latents":
        return c, cmd_extract
    if c == "sample":
        return c, cmd_sample
    if c == "eval":
        return f"eval-{args.kind}", lambda a, cfg, o: cmd_eval(a, cfg, o, args.kind)
    return "report", cmd_report


def run(argv: Optional[list] = None) -> int:
    """Run one command; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        key, fn = _dispatch(args)
        if key == "gen-data" and args.workers is not None:
            args.set = (args.set or []) + [f"workers={args.workers}"]
        cfg = build_config(key, args)
        out = RunOutput(args.out, key, cfg)
        fn(args, cfg, out)
        out.commit()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, ad.NonFiniteError, FlowNonFinite, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ser.FormatError, ShapeError, ProcessMismatchError, MetricError,
            UnknownSymbolError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
