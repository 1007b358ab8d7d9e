"""Acceptance suite.

One test per criterion; each logs a PASS/FAIL line through the ``record``
fixture and the lines are repeated in the terminal summary.  The expensive
training runs are module-scoped fixtures shared between criteria.
"""

import math
import time

import numpy as np
import pytest

from oracles import loop_diversity, loop_express, loop_ffe, loop_mcd, random_feats, random_track
from pipeline import digest, run_pipeline
from prosody_priors import ar_prior as arp
from prosody_priors import autodiff as ad
from prosody_priors import flow as fl
from prosody_priors import fvae
from prosody_priors.core import GaussianSeq, RngStream, gaussian_kl
from prosody_priors.corpus import CorpusConfig, generate_corpus, oracle_nll
from prosody_priors.flow import FlowConfig, FlowPrior
from prosody_priors.latents import oracle_dataset
from prosody_priors.metrics import diversity_stddev, expressiveness_stddev, ffe, mcd
from prosody_priors.nn import GRU, MLP, Dense
from prosody_priors.synthesis import Sampler, diversity_of, expressiveness_of, sample_texts
from prosody_priors.training import TrainConfig

FEATURES = ("E", "F0", "Dur")


def fmt(xs, digits=3):
    return "(" + ", ".join(f"{x:.{digits}f}" for x in xs) + ")"


# ---------------------------------------------------------------------------
# 1. closed-form KL against Monte Carlo
# ---------------------------------------------------------------------------

def test_c01_kl_matches_monte_carlo(record):
    start = time.perf_counter()
    r = np.random.default_rng(20240101)
    z_scores = []
    for _ in range(100):
        D = int(r.integers(1, 5))
        mq, mp = r.normal(size=D), r.normal(size=D)
        lq, lp = 0.5 * r.normal(size=D), 0.5 * r.normal(size=D)
        _, kl = gaussian_kl(GaussianSeq(mq[None], lq[None]), GaussianSeq(mp[None], lp[None]))
        # log q - log p written out directly, independent of the library's density code
        z = mq + np.exp(lq) * r.standard_normal((1_000_000, D))
        d = (-(z - mq) ** 2 / (2 * np.exp(2 * lq)) - lq
             + (z - mp) ** 2 / (2 * np.exp(2 * lp)) + lp).sum(axis=1)
        se = d.std(ddof=1) / math.sqrt(d.size)
        z_scores.append((kl - d.mean()) / se)
    elapsed = time.perf_counter() - start
    worst = float(np.max(np.abs(z_scores)))
    record(1, "closed-form KL vs Monte Carlo", worst <= 3.0 and elapsed < 60,
           f"100 pairs, 1e6 samples each, worst |diff|/SE = {worst:.2f} (limit 3), "
           f"{elapsed:.0f} s (limit 60)")


# ---------------------------------------------------------------------------
# 2. gradient suite
# ---------------------------------------------------------------------------

def _perturb(store, names, scale, seed):
    r = RngStream(seed)
    for n in names:
        p = store[n]
        p.value[...] = p.value + scale * r.normal(p.value.shape)


def _gradient_blocks():
    """(block name, loss_fn, store) for every trainable block, at small sizes."""
    r = np.random.default_rng(0)
    blocks = []

    store = ad.ParamStore()
    dense = Dense(store, "d", 4, 3, RngStream(1))
    _perturb(store, store.params, 0.2, 1)
    x = r.normal(size=(5, 4))
    blocks.append(("dense", lambda: ad.sum(ad.tanh(dense(x))), store))

    store = ad.ParamStore()
    mlp = MLP(store, "m", 4, 5, 2, RngStream(2))
    _perturb(store, store.params, 0.2, 2)
    blocks.append(("mlp", lambda: ad.sum(ad.square(mlp(x))), store))

    store = ad.ParamStore()
    gru = GRU(store, "g", 3, 4, RngStream(3))
    seq = r.normal(size=(2, 6, 3))
    blocks.append(("gru", lambda: ad.sum(ad.square(gru(seq))), store))

    corpus, _ = generate_corpus(CorpusConfig(n_utterances=2, min_len=3, max_len=4, obs_dim=18,
                                             n_cep=4, seed=1))
    tiny = dict(latent_dim=3, text_emb=4, text_hidden=4, enc_hidden=5, dec_hidden=5,
                prior_hidden=4)
    b = fvae.UtteranceCache(corpus).batch([0, 1])
    eps = r.normal(size=b.pooled.shape[:2] + (3,))
    for mode in ("standard", "autoregressive"):
        model = fvae.FvaeModel(fvae.FvaeConfig.for_corpus(corpus, prior_mode=mode, **tiny))
        _perturb(model.store, model.prior_names, 0.3, 4)

        def elbo_loss(model=model):
            recon, kl, _ = model.batch_terms(b, eps)
            return ad.sub(ad.sum(kl), recon)

        blocks.append((f"vae ({'fvae' if mode == 'standard' else 'dvae'} prior): text encoder, "
                       "posterior, decoder", elbo_loss, model.store))

    net = arp.ArPriorNet(ad.ParamStore(), 3, 2, 5, RngStream(5), dur_hidden=4)
    _perturb(net.store, net.param_names, 0.4, 5)
    c = r.normal(size=(2, 6, 3))
    m, s = r.normal(size=(2, 6, 2)), np.exp(0.3 * r.normal(size=(2, 6, 2)))
    teacher = m + s * r.normal(size=m.shape)
    mask = np.ones((2, 6))
    mask[1, 4:] = 0
    dur = r.integers(1, 6, size=(2, 6)).astype(float)

    def ar_loss():
        kl, _ = arp.kl_loss(net, c, m, s, teacher, mask)
        return ad.add(kl, arp.duration_loss(net, c, dur, mask))

    blocks.append(("ar prior incl. duration head", ar_loss, net.store))

    flow = FlowPrior(FlowConfig(2, 2, with_durations=True, n_blocks=1, coupling_hidden=3,
                                base_hidden=3, seed=6))
    _perturb(flow.store, flow.param_names(), 0.3, 6)
    v = r.normal(size=(2, 4, 3))
    fc = r.normal(size=(2, 4, 2))
    fmask = np.ones((2, 4))
    fmask[1, 3:] = 0
    v = v * fmask[..., None]
    flow_loss = lambda: ad.sum(flow.log_likelihood(v, fc, fmask))  # noqa: E731
    for kind in ("actnorm", "invlinear", "coupling", "base"):
        names = [n for n in flow.param_names()
                 if (n.startswith("base.") if kind == "base" else f".{kind}." in n)]
        blocks.append((f"flow {kind}", flow_loss, (flow.store, names)))
    return blocks


def test_c02_gradient_suite(record):
    start = time.perf_counter()
    lines, ok = [], True
    for name, loss_fn, store in _gradient_blocks():
        names = None
        if isinstance(store, tuple):
            store, names = store
        check = ad.check_gradients(loss_fn, store, names)
        passed = check.passes(tol=1e-4, frac=0.95, worst=1e-3)
        ok &= passed
        lines.append(f"{name}: {check.all_errors.size} coords, "
                     f"{100 * check.fraction_within(1e-4):.1f}% <= 1e-4, "
                     f"worst {check.worst:.1e}")
    elapsed = time.perf_counter() - start
    record(2, "gradient suite", ok and elapsed < 300,
           "; ".join(lines) + f"; {elapsed:.0f} s (limit 300)")


# ---------------------------------------------------------------------------
# shared training runs
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def oracle_runs():
    """Flow and AR prior fit to oracle latents of a known AR process, three seeds."""
    start = time.perf_counter()
    runs = []
    for seed in (0, 1, 2):
        corpus, process = generate_corpus(CorpusConfig(n_utterances=500, seed=seed))
        rest, test = corpus.split(50)
        train, valid = rest.split(50)
        dtr, dva, dte = oracle_dataset(train), oracle_dataset(valid), oracle_dataset(test)
        cfg = dict(seed=seed, eval_every=100, teacher="mean")
        flow = FlowPrior(FlowConfig(latent_dim=dtr.latent_dim, context_dim=dtr.context_dim,
                                    with_durations=False, seed=seed))
        fl.train_flow(flow, dtr, TrainConfig(steps=1000, lr=2e-3, **cfg), valid=dva)
        net = arp.ArPriorNet(ad.ParamStore(), dtr.context_dim, dtr.latent_dim, 64, RngStream(seed))
        arp.train_posthoc(net, dtr, TrainConfig(steps=1000, lr=1e-3, **cfg), valid=dva)
        runs.append({"oracle": oracle_nll(test, process), "flow": fl.per_dim_nll(flow, dte),
                     "ar": arp.teacher_forced_nll(net, dte), "flow_model": flow, "test": dte})
    return runs, time.perf_counter() - start


@pytest.fixture(scope="module")
def prior_runs():
    """Per seed: FVAE with post-hoc flow and AR priors, a fine-tuned DVAE, and their samples."""
    runs = []
    for seed in range(5):
        corpus, _ = generate_corpus(CorpusConfig(n_utterances=500, seed=seed))
        rest, test = corpus.split(50)
        train, valid = rest.split(50)
        texts = [u.symbols for u in test]
        vae_cfg = TrainConfig(steps=1500, lr=3e-3, seed=seed, eval_every=100)
        model = fvae.FvaeModel(fvae.FvaeConfig.for_corpus(corpus, latent_dim=8, seed=seed))
        fvae.train(model, train, vae_cfg, valid=valid)
        dtr = fvae.extract_posteriors(model, train, seed)
        dva = fvae.extract_posteriors(model, valid, seed)
        prior_cfg = dict(steps=1500, seed=seed, eval_every=100)

        flow = FlowPrior(FlowConfig(latent_dim=8, context_dim=dtr.context_dim, seed=seed))
        untrained = FlowPrior(FlowConfig(latent_dim=8, context_dim=dtr.context_dim, seed=seed))
        untrained.initialize(*fl.flow_batch(untrained, dtr, range(32)))
        fl.train_flow(flow, dtr, TrainConfig(lr=2e-3, **prior_cfg), valid=dva)
        ar = arp.ArPriorNet(ad.ParamStore(), dtr.context_dim, 8, 64, RngStream(seed))
        arp.train_posthoc(ar, dtr, TrainConfig(lr=1e-3, **prior_cfg), valid=dva)

        dvae = fvae.FvaeModel(fvae.FvaeConfig.for_corpus(corpus, latent_dim=8, seed=seed,
                                                         prior_mode="autoregressive"))
        fvae.train(dvae, train, vae_cfg, valid=valid)
        kl_before = fvae.heldout_prior_kl(dvae, test)
        fvae.finetune_prior(dvae, train, TrainConfig(steps=750, lr=1e-4, seed=seed, eval_every=50),
                            valid=valid)
        kl_after = fvae.heldout_prior_kl(dvae, test)

        flow_sampler = Sampler(flow, "flow")
        samples = {("flow", t): sample_texts(model, flow_sampler, texts, t, 10, seed)
                   for t in (0.33, 0.5, 0.8)}
        samples[("ar", 1.0)] = sample_texts(model, Sampler(ar, "ar"), texts, 1.0, 10, seed)
        samples[("dvae", 1.0)] = sample_texts(dvae, Sampler(dvae.prior, "dvae"), texts, 1.0, 10, seed)
        runs.append({"kl_before": kl_before, "kl_after": kl_after, "samples": samples,
                     "flow": flow, "untrained_flow": untrained, "latents": dva})
    return runs


# ---------------------------------------------------------------------------
# 3. flow exactness
# ---------------------------------------------------------------------------

def _round_trip_error(flow, ds, n_inputs, seed):
    """Worst forward/inverse error over random inputs built on real contexts."""
    r = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_inputs):
        rec = ds.records[i % len(ds)]
        c = rec.context[None]
        mask = np.ones((1, len(rec.symbols)))
        v = 1.5 * r.normal(size=(1, mask.shape[1], flow.config.channels))
        z, _ = flow.forward(v, c, mask)
        worst = max(worst, float(np.max(np.abs(flow.inverse(z.value, c, mask) - v))))
        back, _ = flow.forward(flow.inverse(v, c, mask), c, mask)
        worst = max(worst, float(np.max(np.abs(back.value - v))))
    return worst


def test_c03_flow_exactness(record, prior_runs):
    run = prior_runs[0]
    before = _round_trip_error(run["untrained_flow"], run["latents"], 100, 0)
    after = _round_trip_error(run["flow"], run["latents"], 100, 1)

    # numeric Jacobian of the whole stack at D + 1 = 8 channels, N = 3 steps
    flow = FlowPrior(FlowConfig(7, 4, with_durations=True, n_blocks=2, coupling_hidden=8,
                                base_hidden=8, seed=3))
    _perturb(flow.store, flow.param_names(), 0.3, 3)
    r = np.random.default_rng(3)
    N, C = 3, 8
    v, c, m = r.normal(size=(1, N, C)), r.normal(size=(1, N, 4)), np.ones((1, N))
    _, ld = flow.forward(v, c, m)
    h = 1e-6
    jac = np.zeros((N * C, N * C))
    for i in range(N * C):
        e = np.zeros(N * C)
        e[i] = h
        fp = flow.forward((v.ravel() + e).reshape(v.shape), c, m)[0].value.ravel()
        fm = flow.forward((v.ravel() - e).reshape(v.shape), c, m)[0].value.ravel()
        jac[:, i] = (fp - fm) / (2 * h)
    logdet_err = abs(np.linalg.slogdet(jac)[1] - float(ld.value[0]))

    # 1-D density normalization
    flow1 = FlowPrior(FlowConfig(1, 2, with_durations=False, n_blocks=3, coupling_hidden=8,
                                 base_hidden=8, seed=4))
    _perturb(flow1.store, flow1.param_names(), 0.5, 4)
    grid = np.linspace(-40, 40, 40001)
    ll = flow1.log_likelihood(grid.reshape(-1, 1, 1), np.tile([[[0.4, -1.0]]], (len(grid), 1, 1)),
                              np.ones((len(grid), 1))).value
    mass = float(np.trapezoid(np.exp(ll), grid))

    ok = before <= 1e-6 and after <= 1e-6 and logdet_err <= 1e-4 and abs(mass - 1) <= 1e-3
    record(3, "flow exactness", ok,
           f"round trip {before:.1e} before / {after:.1e} after training (limit 1e-6); "
           f"logdet vs numeric Jacobian {logdet_err:.1e} (limit 1e-4); "
           f"1-D density mass {mass:.6f} (limit 1 +/- 1e-3)")


# ---------------------------------------------------------------------------
# 4. oracle recovery
# ---------------------------------------------------------------------------

def test_c04_oracle_recovery(record, oracle_runs):
    runs, elapsed = oracle_runs
    gaps = {k: [r[k].value - r["oracle"].value for r in runs] for k in ("flow", "ar")}
    med = {k: float(np.median(v)) for k, v in gaps.items()}
    ok = med["flow"] <= 0.2 and med["ar"] <= 0.2 and elapsed < 900
    record(4, "oracle recovery", ok,
           f"median NLL gap to oracle: flow {med['flow']:.3f}, ar {med['ar']:.3f} nats/dim "
           f"(limit 0.2; per seed flow {fmt(gaps['flow'])}, ar {fmt(gaps['ar'])}); "
           f"{elapsed:.0f} s (limit 900)")


def test_c04_trained_nll_respects_oracle(oracle_runs):
    # no model can beat the generating process beyond sampling noise
    for r in oracle_runs[0]:
        for k in ("flow", "ar"):
            se = math.hypot(r["oracle"].stderr, r[k].stderr)
            assert r[k].value >= r["oracle"].value - 3 * se


# ---------------------------------------------------------------------------
# 5. fine-tuning the DVAE prior
# ---------------------------------------------------------------------------

def test_c05_finetune_lowers_heldout_kl(record, prior_runs):
    runs = prior_runs[:3]
    before = [r["kl_before"] for r in runs]
    after = [r["kl_after"] for r in runs]
    ok = float(np.median(after)) < float(np.median(before))
    record(5, "DVAE prior fine-tuning", ok,
           f"median held-out KL {np.median(before):.3f} -> {np.median(after):.3f} nats/phoneme "
           f"(per seed before {fmt(before)}, after {fmt(after)})")


# ---------------------------------------------------------------------------
# 6. reconstruction against latent size
# ---------------------------------------------------------------------------

DIMS = (8, 16, 32, 64)


def test_c06_reconstruction_trend(record):
    mcds = np.zeros((3, len(DIMS)))
    for i, seed in enumerate((0, 1, 2)):
        corpus, _ = generate_corpus(CorpusConfig(n_utterances=500, seed=seed, latent_dim=24))
        rest, test = corpus.split(50)
        train, valid = rest.split(50)
        for j, D in enumerate(DIMS):
            model = fvae.FvaeModel(fvae.FvaeConfig.for_corpus(corpus, latent_dim=D, seed=seed))
            fvae.train(model, train, TrainConfig(steps=2000, lr=3e-3, seed=seed, eval_every=100),
                       valid=valid)
            mcds[i, j] = fvae.reconstruction_report(model, test).mcd_db
    med = np.median(mcds, axis=0)
    # noise: standard error of the seed mean at each size
    se = mcds.std(axis=0, ddof=1) / math.sqrt(mcds.shape[0])
    steps_ok = [bool(med[j + 1] <= med[j] + 2 * max(se[j], se[j + 1])) for j in range(len(DIMS) - 1)]
    gain_small = med[0] - med[1]
    gain_large = med[2] - med[3]
    ok = all(steps_ok) and gain_large < gain_small
    record(6, "reconstruction vs latent size", ok,
           f"median MCD over D={DIMS}: {fmt(med, 2)} dB, seed SE {fmt(se, 2)}; "
           f"non-increasing within 2 SE: {steps_ok}; gain 8->16 {gain_small:.2f} dB "
           f"vs 32->64 {gain_large:.2f} dB")


# ---------------------------------------------------------------------------
# 7 and 8. sampling diversity
# ---------------------------------------------------------------------------

def _triples(runs, key, measure):
    return np.array([measure(r["samples"][key]).as_tuple() for r in runs])


def test_c07_flow_temperature_trend(record, prior_runs):
    temps = (0.33, 0.5, 0.8)
    parts, ok = [], True
    for label, measure in (("diversity", diversity_of), ("expressiveness", expressiveness_of)):
        med = np.array([np.median(_triples(prior_runs, ("flow", t), measure), axis=0)
                        for t in temps])
        ok &= bool(np.all(np.diff(med, axis=0) >= 0))
        parts.append(f"{label} " + " -> ".join(fmt(row, 2) for row in med))
    record(7, "flow stddev grows with temperature", ok,
           "median (E, F0, Dur) at T=0.33/0.5/0.8: " + "; ".join(parts))


def test_c08_flow_more_diverse_than_ar(record, prior_runs):
    flow = np.median(_triples(prior_runs, ("flow", 0.5), diversity_of), axis=0)
    ar = np.median(_triples(prior_runs, ("ar", 1.0), diversity_of), axis=0)
    dvae = np.median(_triples(prior_runs, ("dvae", 1.0), diversity_of), axis=0)
    wins = [f for f, a, b, c in zip(FEATURES, flow, ar, dvae) if a > b and a > c]
    record(8, "flow diversity exceeds AR priors", len(wins) == 3,
           f"median diversity (E, F0, Dur): flow T=0.5 {fmt(flow, 2)}, AR T=1 {fmt(ar, 2)}, "
           f"DVAE T=1 {fmt(dvae, 2)}; flow ahead on {wins or 'none'}")


# ---------------------------------------------------------------------------
# 9. metric kernels
# ---------------------------------------------------------------------------

def test_c09_metric_kernels(record):
    r = np.random.default_rng(9)
    worst = 0.0
    for _ in range(200):
        n = int(r.integers(1, 15))
        a, b = random_track(r, n), random_track(r, n)
        worst = max(worst, abs(ffe(a, b) - loop_ffe(a, b)), abs(mcd(a, b) - loop_mcd(a, b)))
        utts = []
        for _ in range(int(r.integers(1, 5))):
            k = int(r.integers(2, 9))
            sym = r.integers(0, 4, k)
            sym[1] = sym[0]
            utts.append((sym, random_feats(r, k)))
        got, want = expressiveness_stddev(utts), loop_express(utts)
        worst = max(worst, *(abs(getattr(got, f) - want[f]) for f in FEATURES))
        texts = [[random_feats(r, k) for _ in range(int(r.integers(2, 5)))]
                 for k in r.integers(1, 6, int(r.integers(1, 4)))]
        got, want = diversity_stddev(texts), loop_diversity(texts)
        worst = max(worst, *(abs(getattr(got, f) - want[f]) for f in FEATURES))
    t = random_track(r, 12)
    f = random_feats(r, 5)
    degenerate = (ffe(t, t) == 0.0 and mcd(t, t) == 0.0
                  and diversity_stddev([[f, f, f]]).as_tuple() == (0.0, 0.0, 0.0))
    record(9, "metric kernels", worst <= 1e-12 and degenerate,
           f"200 random cases, worst |kernel - loop| = {worst:.1e} (limit 1e-12); "
           f"degenerate FFE/MCD/diversity exactly zero: {degenerate}")


# ---------------------------------------------------------------------------
# 10. reproducibility
# ---------------------------------------------------------------------------

def test_c10_cli_reproducibility(record, tmp_path):
    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    differing = [step for step in a if digest(a[step]) != digest(b[step])]
    n_files = sum(len(digest(d)) for d in a.values())
    record(10, "CLI reproducibility", not differing,
           f"{len(a)} command runs, {n_files} artifacts; differing: {differing or 'none'}")
