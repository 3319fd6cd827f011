import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flam import autodiff as ad
from flam import embedder as em
from flam import manipulator as mp
from flam import synthdata as sd
from flam.autodiff import Tensor
from flam.errors import ConfigError, ContractError, DimensionError, TrainingError

DIM, K, N = 8, 3, 3


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class StubG:
    """Generator stand-in with a caller-supplied map (x, e) -> output."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x, e):
        x, e = ad.as_tensor(x), ad.as_tensor(e)
        return self.fn(x, e)

    def generate(self, x, e):
        return self(Tensor(np.asarray(x, float)), Tensor(np.asarray(e, float))).data


identity_g = StubG(lambda x, e: ad.l2_normalize(x))


@pytest.fixture
def nets(rng):
    G = mp.Generator(DIM, K, 10, rng)
    D = mp.Discriminator(DIM, N, K, 10, rng)
    embs = {a: em.Embedder(a, DIM, K, rng) for a in ("shape", "color", "pattern")}
    return G, D, embs


def unit(rng, shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class TestGenerator:
    def test_shape_norm_determinism(self, nets, rng):
        G = nets[0]
        x, e = unit(rng, (4, DIM)), unit(rng, (4, K))
        out = mp.generate(G, x, e)
        assert out.shape == (4, DIM)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)
        assert np.array_equal(out, mp.generate(G, x, e))
        np.testing.assert_allclose(G(Tensor(x), Tensor(e)).data, out, atol=1e-12)

    def test_concatenation_order_is_x_then_e(self, nets, rng):
        G = nets[0]
        x, e = unit(rng, DIM), unit(rng, K)
        h = G.mlp.forward_array(np.concatenate([x, e]))
        np.testing.assert_allclose(G.generate(x, e), h / np.linalg.norm(h), atol=1e-12)

    def test_dim_mismatch(self, nets):
        with pytest.raises(DimensionError):
            nets[0].generate(np.ones(DIM + 1), np.ones(K))
        with pytest.raises(DimensionError):
            nets[0].generate(np.ones(DIM), np.ones(K + 1))


class TestAdversarial:
    def test_zero_logits(self, nets, rng):
        D = nets[1]
        D.head_rf.weight.data[:] = 0
        D.head_rf.bias.data[:] = 0
        d_loss, g_loss = mp.adv_losses(D, unit(rng, (3, DIM)), unit(rng, (3, DIM)))
        assert d_loss.item() == pytest.approx(2 * np.log(2))
        assert g_loss.item() == pytest.approx(np.log(2))

    def test_fooled_discriminator_limit(self, nets, rng):
        D = nets[1]
        D.head_rf.weight.data[:] = 0
        D.head_rf.bias.data[:] = 60.0
        _, g_loss = mp.adv_losses(D, unit(rng, (2, DIM)), unit(rng, (2, DIM)))
        assert 0 <= g_loss.item() < 1e-20

    def test_scalar_oracle(self, nets, rng):
        D = nets[1]
        xr, xf = unit(rng, (5, DIM)), unit(rng, (5, DIM))
        d_loss, g_loss = mp.adv_losses(D, xr, xf)
        lr = np.array([D(Tensor(x))[0].item() for x in xr])
        lf = np.array([D(Tensor(x))[0].item() for x in xf])
        assert d_loss.item() == pytest.approx(np.mean(-np.log(sigmoid(lr)) - np.log(1 - sigmoid(lf))), rel=1e-12)
        assert g_loss.item() == pytest.approx(np.mean(-np.log(sigmoid(lf))), rel=1e-12)

    def test_d_loss_does_not_reach_generator(self, nets, rng):
        G, D, _ = nets
        x, e = Tensor(unit(rng, (3, DIM))), Tensor(unit(rng, (3, K)))
        d_loss, _ = mp.adv_losses(D, x, G(x, e))
        d_loss.backward()
        assert all(p.grad is None for p in G.parameters())
        assert any(p.grad is not None for p in D.parameters())

    def test_fd_both_sides(self, nets, rng):
        G, D, _ = nets
        x, e = Tensor(unit(rng, (4, DIM))), Tensor(unit(rng, (4, K)))
        assert ad.fd_check(lambda ps: mp.adv_losses(D, x, G(x, e))[0], D.parameters()) < 1e-4
        assert ad.fd_check(lambda ps: mp.adv_losses(D, x, G(x, e))[1], G.parameters()) < 1e-4


def scalar_matching(D, embs, x, x_minus, x_tilde, mode, target, remaining):
    total = 0.0
    for i in range(len(x)):
        f_real = D(Tensor(x[i:i + 1]))[1].data[0]
        f_fake = D(Tensor(x_tilde[i:i + 1]))[1].data[0]
        real_t = [embs[target].embed(x[i])] + [embs[r].embed(x[i]) for r in remaining]
        fake_t = [embs[target].embed(x_minus[i])] + [embs[r].embed(x[i]) for r in remaining]
        blocks = 1 if mode == "S" else len(real_t)
        for b in range(blocks):
            sl = slice(b * K, (b + 1) * K)
            total += np.sum((f_real[sl] - real_t[b]) ** 2) + np.sum((f_fake[sl] - fake_t[b]) ** 2)
    return total / len(x)


class TestFeatureMatching:
    REM = ("shape", "pattern")

    def _inputs(self, rng):
        return unit(rng, (4, DIM)), unit(rng, (4, DIM)), unit(rng, (4, DIM))

    @pytest.mark.parametrize("mode", ["M", "S"])
    def test_scalar_oracle(self, nets, rng, mode):
        _, D, embs = nets
        x, xm, xt = self._inputs(rng)
        got = mp.feature_matching_loss(D, embs, x, xm, Tensor(xt), mode, "color", self.REM).item()
        assert got == pytest.approx(scalar_matching(D, embs, x, xm, xt, mode, "color", self.REM), rel=1e-10)

    def test_perfect_match_is_zero(self, rng):
        target = unit(rng, (5, N * K))
        for mode in ("M", "S"):
            mask = mp.matching_mask(N, K, mode)
            assert mp.matching_term(Tensor(target), target, mask).item() == 0.0

    def test_s_and_m_differ_only_in_remaining_blocks(self, rng):
        f, target = rng.normal(size=(6, N * K)), rng.normal(size=(6, N * K))
        m = mp.matching_term(Tensor(f), target, mp.matching_mask(N, K, "M")).item()
        s = mp.matching_term(Tensor(f), target, mp.matching_mask(N, K, "S")).item()
        rest = np.mean(np.sum((f[:, K:] - target[:, K:]) ** 2, axis=1))
        assert m == pytest.approx(s + rest, rel=1e-12)
        assert m > s
        f[:, K:] = target[:, K:]
        m = mp.matching_term(Tensor(f), target, mp.matching_mask(N, K, "M")).item()
        s = mp.matching_term(Tensor(f), target, mp.matching_mask(N, K, "S")).item()
        assert m == s

    @pytest.mark.parametrize("mode", ["M", "S"])
    def test_fd(self, nets, rng, mode):
        G, D, embs = nets
        x, xm, _ = self._inputs(rng)
        e_minus = Tensor(embs["color"].embed(xm))
        fn = lambda ps: mp.feature_matching_loss(D, embs, x, xm, G(Tensor(x), e_minus), mode, "color", self.REM)
        assert ad.fd_check(fn, D.parameters() + G.parameters()) < 1e-4

    def test_missing_embedder(self, nets, rng):
        _, D, embs = nets
        x, xm, xt = self._inputs(rng)
        del embs["pattern"]
        with pytest.raises(ConfigError):
            mp.feature_matching_loss(D, embs, x, xm, Tensor(xt), "M", "color", self.REM)

    def test_teachers_stay_frozen(self, nets, rng):
        G, D, embs = nets
        x, xm, _ = self._inputs(rng)
        loss = mp.feature_matching_loss(D, embs, x, xm, G(Tensor(x), Tensor(unit(rng, (4, K)))), "M", "color", self.REM)
        loss.backward()
        assert all(p.grad is None for e in embs.values() for p in e.parameters())


class TestCycle:
    def test_identity_generator(self, nets, rng):
        x = unit(rng, (3, DIM))
        assert mp.cycle_loss(identity_g, nets[2]["color"], x, Tensor(unit(rng, (3, K)))).item() == pytest.approx(0, abs=1e-20)

    def test_antipodal_reconstruction(self, nets, rng):
        e_minus = unit(rng, (2, K))
        flip = StubG(lambda x, e: x if np.array_equal(e.data, e_minus) else -x)
        x = unit(rng, (2, DIM))
        assert mp.cycle_loss(flip, nets[2]["color"], x, Tensor(e_minus)).item() == pytest.approx(4.0)

    def test_scalar_oracle(self, nets, rng):
        G, _, embs = nets
        x, em_ = unit(rng, (4, DIM)), unit(rng, (4, K))
        got = mp.cycle_loss(G, embs["color"], x, Tensor(em_)).item()
        want = np.mean([np.sum((x[i] - G.generate(G.generate(x[i], em_[i]), embs["color"].embed(x[i]))) ** 2)
                        for i in range(4)])
        assert got == pytest.approx(want, rel=1e-10)

    def test_fd(self, nets, rng):
        G, _, embs = nets
        x, em_ = unit(rng, (4, DIM)), Tensor(unit(rng, (4, K)))
        assert ad.fd_check(lambda ps: mp.cycle_loss(G, embs["color"], x, em_), G.parameters()) < 1e-4


def test_fd_full_generator_objective(nets, rng):
    G, D, embs = nets
    x, xm = unit(rng, (4, DIM)), unit(rng, (4, DIM))
    e_minus = Tensor(embs["color"].embed(xm))

    def total(ps):
        xt = G(Tensor(x), e_minus)
        _, g_adv = mp.adv_losses(D, x, xt)
        _, fake = mp.feature_matching_terms(D, embs, x, xm, xt, "M", "color", ("shape", "pattern"))
        return g_adv + fake * 10.0 + mp.cycle_loss(G, embs["color"], x, e_minus) * 10.0

    assert ad.fd_check(total, G.parameters()) < 1e-4


class TestOnlineSampling:
    def test_single_eligible(self, rng):
        rem = [unit(rng, (4, K))]
        assert mp.online_sample(rem, [0, 0, 1, 0], anchor=0) == 2

    def test_identical_remaining_wins(self, rng):
        rem = [unit(rng, (3, K)), unit(rng, (3, K))]
        rem[0][2], rem[1][2] = rem[0][0], rem[1][0]
        assert mp.online_sample(rem, [0, 1, 1], anchor=0) == 2

    def test_skip_when_no_other_class(self, rng):
        assert mp.online_sample([unit(rng, (3, K))], [2, 2, 2], anchor=1) is None
        assert np.all(mp.online_partners([unit(rng, (3, K))], [2, 2, 2]) == -1)

    def test_ties_go_to_earlier_position(self, rng):
        base = unit(rng, (1, K))
        rem = [np.repeat(base, 4, axis=0)]
        assert mp.online_sample(rem, [0, 1, 1, 1], anchor=0) == 1

    @given(st.integers(0, 2**31 - 1), st.integers(2, 4))
    def test_matches_brute_force(self, seed, n_cls):
        r = np.random.default_rng(seed)
        labels = r.integers(0, n_cls, 16)
        rem = [unit(r, (16, K)), unit(r, (16, K))]
        got = mp.online_partners(rem, labels)
        for i in range(16):
            best, best_d = -1, np.inf
            for j in range(16):
                if labels[j] == labels[i]:
                    continue
                d = sum(1 - float(E[i] @ E[j] / (np.linalg.norm(E[i]) * np.linalg.norm(E[j]))) for E in rem)
                if d < best_d - 1e-12:
                    best, best_d = j, d
            assert got[i] == best
            if best >= 0:
                assert labels[got[i]] != labels[i]

    def test_uniform_partners_differ(self, rng):
        labels = rng.integers(0, 3, 40)
        p = mp.uniform_partners(labels, rng)
        assert np.all(labels[p] != labels)


class TestConvergenceProxy:
    def test_identity_is_one(self, nets, rng):
        assert mp.convergence_proxy(identity_g, nets[2]["color"], unit(rng, (6, DIM))) == pytest.approx(1.0)

    def test_orthogonal_reconstruction_is_zero(self, nets):
        rot = StubG(lambda x, e: Tensor(np.roll(np.array([1.0, 0, 0, 0, 0, 0, 0, 0]), 1)[None]))
        assert mp.convergence_proxy(rot, nets[2]["color"], np.eye(DIM)[0]) == pytest.approx(0.0)

    def test_empty_sample(self, nets):
        with pytest.raises(ContractError):
            mp.convergence_proxy(identity_g, nets[2]["color"], np.zeros((0, DIM)))


class TestConfig:
    def test_variants(self):
        assert mp.ManipConfig.for_variant("M/OS/Adv").variant == "M/OS/Adv"
        cfg = mp.ManipConfig.for_variant("M/-/-")
        assert cfg.lambda_adv == 0 and cfg.sampling == "uniform" and cfg.variant == "M/-/-"
        assert mp.ManipConfig.for_variant("S/-/Adv").matching == "S"
        with pytest.raises(ConfigError):
            mp.ManipConfig.for_variant("X/Y/Z")

    @pytest.mark.parametrize("bad", [dict(lambda_cycle=-1), dict(matching="Q"), dict(sampling="hard"),
                                     dict(label_mode="none"), dict(target_attr="color", remaining_attrs=("color",))])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            mp.ManipConfig(**bad)

    def test_resolved_fills_remaining(self, small_schema):
        cfg = mp.ManipConfig(target_attr="pattern").resolved(small_schema)
        assert cfg.remaining_attrs == ("shape", "color")
        with pytest.raises(ConfigError):
            mp.ManipConfig(target_attr="size").resolved(small_schema)


@pytest.fixture(scope="module")
def small_setup(small_dataset):
    cfg = em.EmbedderConfig(epochs=2, k=K, batch_size=32)
    return {a: em.train_embedder(small_dataset, a, cfg)[:2] for a in small_dataset.schema.types}


class TestTraining:
    CFG = dict(target_attr="color", epochs=2, hidden=12, batch_size=32, proxy_size=32)

    def test_deterministic_logs_and_weights(self, small_dataset, small_setup):
        a = mp.train_manipulator(small_dataset, small_setup, mp.ManipConfig(**self.CFG))
        b = mp.train_manipulator(small_dataset, small_setup, mp.ManipConfig(**self.CFG))
        assert a.log == b.log
        for p, q in zip(a.generator.parameters(), b.generator.parameters()):
            assert np.array_equal(p.data, q.data)

    def test_log_fields(self, small_dataset, small_setup):
        G, D, log = mp.train_manipulator(small_dataset, small_setup, mp.ManipConfig(**self.CFG))
        assert [e["epoch"] for e in log] == [0, 1]
        for entry in log:
            assert set(entry) == {"epoch", "d_adv", "g_adv", "match_real", "match_fake", "cycle", "convergence_proxy"}
            assert all(np.isfinite(v) and (v >= 0 or k == "convergence_proxy") for k, v in entry.items())

    def test_teachers_untouched(self, small_dataset, small_setup):
        before = {a: [p.data.copy() for p in e.parameters()] for a, (e, _) in small_setup.items()}
        for e, _ in small_setup.values():
            for p in e.parameters():
                p.grad = None
        for variant in mp.VARIANTS:
            mp.train_manipulator(small_dataset, small_setup, mp.ManipConfig.for_variant(variant, **self.CFG))
        for a, (e, _) in small_setup.items():
            assert all(p.grad is None for p in e.parameters())
            assert all(np.array_equal(p.data, q) for p, q in zip(e.parameters(), before[a]))

    def test_pseudo_label_mode_on_sparse_labels(self, small_dataset, small_setup):
        sparse = sd.mask_labels(small_dataset, 0.1)
        cfg = mp.ManipConfig(label_mode="pseudo-labels", **self.CFG)
        _, _, log = mp.train_manipulator(sparse, small_setup, cfg)
        assert len(log) == 2

    def test_missing_embedder(self, small_dataset, small_setup):
        partial = {k: v for k, v in small_setup.items() if k != "shape"}
        with pytest.raises(ConfigError):
            mp.train_manipulator(small_dataset, partial, mp.ManipConfig(**self.CFG))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_aborts_with_diagnostics(self, small_dataset, small_setup):
        cfg = mp.ManipConfig(lr=1e300, precision="float64", **{**self.CFG, "epochs": 3})
        with pytest.raises(TrainingError, match=r"epoch \d+"):
            mp.train_manipulator(small_dataset, small_setup, cfg)
