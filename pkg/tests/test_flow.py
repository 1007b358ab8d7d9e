import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from prosody_priors import autodiff as ad
from prosody_priors import flow as fl
from prosody_priors.core import GaussianSeq, RngStream, ShapeError, gaussian_log_prob
from prosody_priors.corpus import CorpusConfig, generate_corpus, oracle_nll
from prosody_priors.flow import Coupling, FlowConfig, FlowNonFinite, FlowPrior
from prosody_priors.latents import oracle_dataset
from prosody_priors.training import TrainConfig


def randomized(flow, scale=0.3, seed=0):
    r = RngStream(seed)
    for name in flow.param_names():
        p = flow.store[name]
        p.value[...] = p.value + scale * r.normal(p.value.shape)
    flow.initialized = True
    return flow


def small_flow(latent=3, ctx=2, blocks=2, durations=True, seed=0, hidden=6):
    return FlowPrior(FlowConfig(latent, ctx, with_durations=durations, n_blocks=blocks,
                                coupling_hidden=hidden, base_hidden=hidden, seed=seed))


def batch(r, B, T, C, ctx, ragged=True):
    v = r.normal(size=(B, T, C))
    c = r.normal(size=(B, T, ctx))
    mask = np.ones((B, T))
    if ragged and B > 1:
        mask[1, T // 2:] = 0
    return v * mask[..., None], c, mask


class TestInvertibility:
    def test_stack_round_trip(self):
        flow = randomized(small_flow())
        r = np.random.default_rng(0)
        for _ in range(100):
            v, c, m = batch(r, 2, 5, 4, 2)
            z, _ = flow.forward(v, c, m)
            assert np.max(np.abs(flow.inverse(z.value, c, m) - v)) < 1e-6
            z0 = r.normal(size=v.shape) * m[..., None]
            back, _ = flow.forward(flow.inverse(z0, c, m), c, m)
            # padded steps are ignored by the likelihood and not round-tripped
            assert np.max(np.abs(back.value - z0)[m > 0]) < 1e-6

    def test_layer_round_trip(self):
        flow = randomized(small_flow(), seed=1)
        r = np.random.default_rng(1)
        v, c, m = batch(r, 3, 6, 4, 2, ragged=False)
        for layer in flow.layers:
            y, _ = layer.forward(v, c, m)
            assert np.max(np.abs(layer.inverse(y.value, c, m) - v)) < 1e-6

    def test_injective_sampling(self):
        flow = randomized(small_flow(durations=False), seed=2)
        c = np.random.default_rng(2).normal(size=(1, 4, 2))
        m = np.ones((1, 4))
        r = np.random.default_rng(3)
        outs = []
        for _ in range(1000):
            z0 = r.normal(size=(1, 4, 3))
            outs.append(flow.inverse(z0, c, m).ravel())
        outs = np.array(outs)
        # every pair of distinct base points lands on distinct outputs
        d = np.abs(outs[:, None, :] - outs[None, :, :]).max(axis=-1)
        assert np.all(d[~np.eye(len(outs), dtype=bool)] > 0)


class TestLogdet:
    def test_numeric_jacobian(self):
        flow = randomized(small_flow(latent=4, blocks=2), seed=4)
        r = np.random.default_rng(4)
        N, C = 3, 5
        v, c, m = batch(r, 1, N, C, 2, ragged=False)
        _, ld = flow.forward(v, c, m)

        def f(x):
            return flow.forward(x.reshape(1, N, C), c, m)[0].value.ravel()

        h = 1e-6
        x0 = v.ravel()
        jac = np.zeros((N * C, N * C))
        for i in range(N * C):
            e = np.zeros(N * C)
            e[i] = h
            jac[:, i] = (f(x0 + e) - f(x0 - e)) / (2 * h)
        sign, logabs = np.linalg.slogdet(jac)
        assert sign != 0
        assert abs(logabs - float(ld.value[0])) < 1e-4

    def test_fresh_couplings_are_identity(self):
        flow = small_flow(seed=5)
        r = np.random.default_rng(5)
        v, c, m = batch(r, 2, 4, 4, 2)
        for layer in flow.layers:
            if isinstance(layer, Coupling):
                y, ld = layer.forward(v, c, m)
                np.testing.assert_array_equal(y.value, v)
                np.testing.assert_array_equal(ld.value, 0.0)

    def test_constant_scale_coupling(self):
        C, N = 5, 4
        layer = Coupling(ad.ParamStore(), "cp", C, 2, 6, RngStream(0))
        s = np.array([0.7, 1.3, 1.1])
        # zero output weights: raw is the bias, so scale = sigmoid(bias) + 0.5
        layer.store["cp.out.b"].value[3:] = np.log((s - 0.5) / (1.5 - s))
        r = np.random.default_rng(6)
        x, c, m = batch(r, 1, N, C, 2, ragged=False)
        _, ld = layer.forward(x, c, m)
        assert float(ld.value[0]) == pytest.approx(N * np.log(s).sum(), rel=1e-12)

    def test_actnorm_init_statistics(self):
        flow = small_flow(seed=7)
        r = np.random.default_rng(7)
        v, c, m = batch(r, 4, 9, 4, 2)
        v = 3.0 * v + 2.0
        flow.initialize(v, c, m)
        first = flow.layers[0]
        y, _ = first.forward(v * m[..., None], c, m)
        rows = y.value[m > 0]
        np.testing.assert_allclose(rows.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(rows.std(axis=0), 1.0, atol=1e-6)


class TestLikelihood:
    def test_empty_stack_reduces_to_gaussian(self):
        flow = small_flow(blocks=0)
        r = np.random.default_rng(8)
        v, c = r.normal(size=(6, 4)), r.normal(size=(6, 2))
        _, lp = gaussian_log_prob(v, GaussianSeq(np.zeros((6, 4)), np.zeros((6, 4))))
        assert fl.log_likelihood(flow, v, c) == pytest.approx(lp, rel=1e-12)

    def test_density_integrates_to_one(self):
        flow = randomized(small_flow(latent=1, durations=False, blocks=3), scale=0.5, seed=9)
        c = np.array([[0.4, -1.0]])
        grid = np.linspace(-40, 40, 40001)
        v = grid.reshape(-1, 1, 1)
        ll = flow.log_likelihood(v, np.broadcast_to(c, (len(grid), 1, 2)),
                                 np.ones((len(grid), 1))).value
        assert np.trapezoid(np.exp(ll), grid) == pytest.approx(1.0, abs=1e-3)

    def test_appending_identity_coupling(self):
        flow = randomized(small_flow(), seed=10)
        r = np.random.default_rng(10)
        v, c, m = batch(r, 2, 5, 4, 2)
        before = flow.log_likelihood(v, c, m).value
        flow.layers.append(Coupling(flow.store, "extra", 4, 2, 6, RngStream(1)))
        np.testing.assert_allclose(flow.log_likelihood(v, c, m).value, before, rtol=0, atol=1e-12)

    def test_gradients_every_layer_type(self):
        flow = randomized(small_flow(latent=2, ctx=2, blocks=1, hidden=3), seed=11)
        r = np.random.default_rng(11)
        v, c, m = batch(r, 2, 4, 3, 2)

        def loss():
            return ad.sum(flow.log_likelihood(v, c, m))

        check = ad.check_gradients(loss, flow.store)
        assert check.passes(), check.worst
        kinds = {n.split(".")[2] if n.startswith("flow.") else "base" for n in flow.param_names()}
        assert kinds == {"actnorm", "invlinear", "coupling", "base"}

    def test_shape_errors(self):
        flow = small_flow()
        with pytest.raises(ShapeError):
            fl.log_likelihood(flow, np.zeros((3, 3)), np.zeros((3, 2)))
        with pytest.raises(ShapeError):
            fl.log_likelihood(flow, np.zeros((3, 4)), np.zeros((4, 2)))

    def test_non_finite_names_layer(self):
        flow = small_flow()
        flow.store["flow.1.actnorm.logs"].value[...] = 1000.0
        with pytest.raises(FlowNonFinite) as info, np.errstate(over="ignore"):
            fl.log_likelihood(flow, np.ones((3, 4)), np.zeros((3, 2)))
        assert info.value.layer == "flow.1.actnorm"


class TestSampling:
    def test_base_std_scales_with_temperature(self):
        flow = randomized(small_flow(), seed=12)
        c = np.repeat(np.random.default_rng(12).normal(size=(1, 3, 2)), 4000, axis=0)
        m = np.ones((4000, 3))
        mean, logstd = flow.base(c)
        stds = []
        for temp in (0.33, 0.5, 0.8):
            z = flow.base_sample(c, m, temp, [RngStream(0).substream(i) for i in range(4000)])
            stds.append(np.mean(((z - mean.value) / np.exp(logstd.value)).std(axis=0)))
        ratios = np.array(stds) / np.array([0.33, 0.5, 0.8])
        assert np.all(np.abs(ratios / ratios[0] - 1) < 0.03)

    def test_deterministic_and_positive_durations(self):
        flow = randomized(small_flow(), seed=13)
        c = np.random.default_rng(13).normal(size=(6, 2))
        z1, d1 = fl.sample(flow, c, 0.5, RngStream(3))
        z2, d2 = fl.sample(flow, c, 0.5, RngStream(3))
        np.testing.assert_array_equal(z1, z2)
        np.testing.assert_array_equal(d1, d2)
        assert d1.dtype.kind == "i" and d1.min() >= 1

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            fl.sample(small_flow(), np.zeros((3, 2)), 0.0, RngStream(0))

    @given(st.integers(1, 500), st.floats(0.0, 0.999999))
    def test_dequantize_round_trip(self, d, u):
        assert fl.undequantize(fl.dequantize([d], u))[0] == d


@pytest.fixture(scope="module")
def oracle_split():
    corpus, process = generate_corpus(CorpusConfig(n_utterances=150, latent_dim=4, vocab=10, seed=3))
    train_c, valid_c = corpus.split(30)
    return oracle_dataset(train_c).split(0)[0], oracle_dataset(valid_c), valid_c, process


class TestTraining:
    def test_valid_nll_improves_and_respects_oracle(self, oracle_split):
        train, valid, valid_c, process = oracle_split
        oracle = oracle_nll(valid_c, process)
        for seed in range(3):
            flow = FlowPrior(FlowConfig(4, train.context_dim, with_durations=False, n_blocks=2,
                                        coupling_hidden=16, base_hidden=16, seed=seed))
            flow.initialize(*fl.flow_batch(flow, train, range(32)))
            before = fl.per_dim_nll(flow, valid).value
            fl.train_flow(flow, train, TrainConfig(steps=150, seed=seed, lr=3e-3, teacher="mean"))
            after = fl.per_dim_nll(flow, valid)
            assert after.value < before
            # no model can beat the generating process by more than noise
            assert after.value >= oracle.value - 3 * math.hypot(oracle.stderr, after.stderr)

    def test_round_trip_after_training(self, oracle_split):
        train, valid, _, _ = oracle_split
        flow = FlowPrior(FlowConfig(4, train.context_dim, n_blocks=2, coupling_hidden=8,
                                    base_hidden=8, seed=0))
        fl.train_flow(flow, train, TrainConfig(steps=1000, seed=0, lr=3e-3, batch_size=8))
        v, c, m = fl.flow_batch(flow, valid, range(8))
        z, _ = flow.forward(v, c, m)
        assert np.max(np.abs(flow.inverse(z.value, c, m) - v)) < 1e-6

    def test_checkpoint_round_trip(self, oracle_split):
        train, valid, _, _ = oracle_split
        flow = FlowPrior(FlowConfig(4, train.context_dim, n_blocks=2, coupling_hidden=8,
                                    base_hidden=8, seed=1))
        ckpt, _ = fl.train_flow(flow, train, TrainConfig(steps=20, seed=1))
        back = FlowPrior.from_checkpoint(type(ckpt).from_json(ckpt.to_json()))
        assert fl.per_dim_nll(back, valid).value == fl.per_dim_nll(flow, valid).value
        bad = type(ckpt).from_json(ckpt.to_json())
        bad.hparams["layers"] = bad.hparams["layers"][::-1]
        with pytest.raises(ValueError):
            FlowPrior.from_checkpoint(bad)

    def test_deterministic(self, oracle_split):
        train, _, _, _ = oracle_split
        out = []
        for _ in range(2):
            flow = FlowPrior(FlowConfig(4, train.context_dim, n_blocks=1, coupling_hidden=8,
                                        base_hidden=8, seed=2))
            ckpt, _ = fl.train_flow(flow, train, TrainConfig(steps=15, seed=2))
            out.append(ckpt.to_json())
        assert out[0] == out[1]
