import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppgn import nets
from ppgn.nets import (
    AdamState,
    LayerSpec,
    ModelBundle,
    TrainConfig,
    adam_step,
    class_gradient,
    dae_score,
    gan_balance,
    gan_losses,
)
from ppgn.tensor import ShapeError, Tape, Tensor, grad_check


class TestModelBundle:
    def test_layer_spec_validation(self):
        with pytest.raises(ValueError):
            LayerSpec(0, 3, "relu")
        with pytest.raises(ValueError):
            LayerSpec(2, 3, "softplus")

    def test_dims_must_chain(self):
        layers = [LayerSpec(3, 4, "relu"), LayerSpec(5, 2, "linear")]
        params = {"W0": Tensor(np.zeros((3, 4))), "b0": Tensor(np.zeros(4)),
                  "W1": Tensor(np.zeros((5, 2))), "b1": Tensor(np.zeros(2))}
        with pytest.raises(ShapeError):
            ModelBundle("bad", layers, params)

    def test_missing_parameter(self):
        with pytest.raises(ValueError, match="missing"):
            ModelBundle("bad", [LayerSpec(2, 2, "relu")], {"W0": Tensor(np.zeros((2, 2)))})

    def test_taps(self, tiny_classifier):
        assert tiny_classifier.tap_dim("h1") == 8
        assert tiny_classifier.tap_dim("h") == 6
        with pytest.raises(KeyError):
            tiny_classifier.tap_dim("fc7")


class TestForward:
    def test_zero_network_gives_zero(self):
        m = nets.init_model("z", nets.chain_specs((4, 3, 2)), seed=0)
        m.params = {k: Tensor(np.zeros(v.shape)) for k, v in m.params.items()}
        out, _ = nets.forward(m, np.ones((5, 4)), Tape())
        np.testing.assert_array_equal(out.data, np.zeros((5, 2)))

    def test_single_linear_layer(self, rng):
        m = nets.init_model("lin", [LayerSpec(3, 2, "linear")], seed=1)
        x = rng.normal(size=(4, 3))
        out, _ = nets.forward(m, x, Tape())
        np.testing.assert_allclose(out.data, x @ m.params["W0"].data + m.params["b0"].data, rtol=1e-15)

    def test_taped_and_numpy_paths_agree_exactly(self, tiny_classifier, rng):
        x = rng.normal(size=(7, 12))
        out, taps = nets.forward(tiny_classifier, x, Tape())
        np.testing.assert_array_equal(out.data, nets.predict(tiny_classifier, x))
        np.testing.assert_array_equal(taps["h"].data, nets.encode(tiny_classifier, x, "h"))
        np.testing.assert_array_equal(taps["h1"].data, nets.encode(tiny_classifier, x, "h1"))

    def test_width_mismatch(self, tiny_classifier):
        with pytest.raises(ShapeError):
            nets.predict(tiny_classifier, np.zeros((2, 5)))


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = {"w": Tensor(np.array([1.0, -2.0]))}
        new, _ = adam_step(params, {"w": np.zeros(2)}, AdamState.fresh(params))
        np.testing.assert_array_equal(new["w"].data, params["w"].data)

    def test_first_step_size(self):
        params = {"w": Tensor(np.array(0.5))}
        state = AdamState.fresh(params)
        new, state = adam_step(params, {"w": np.array(1.0)}, state)
        assert state.t == 1
        assert new["w"].item() - 0.5 == pytest.approx(-2e-4 / (1 + 1e-8), rel=1e-9)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.batch_size) == (2e-4, 0.9, 0.999, 64)

    def test_minimises_quadratic(self):
        params = {"w": Tensor(np.array([3.0, -4.0]))}
        state = AdamState.fresh(params, lr=0.05)
        for _ in range(1000):
            params, state = adam_step(params, {"w": 2 * params["w"].data}, state)
        np.testing.assert_allclose(params["w"].data, 0.0, atol=1e-3)


class TestClassifier:
    def test_memorises_one_example(self):
        x = np.random.default_rng(0).random((1, 12))
        layers, taps = nets.classifier_spec((12, 8, 6, 3))
        m = nets.train_classifier(x, np.array([2]), TrainConfig(lr=1e-2, epochs=50), spec=(layers, taps))
        assert m.meta["train_accuracy"] == 1.0

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            nets.train_classifier(np.zeros((0, 784)), np.zeros(0, int))

    def test_seed_reproducible(self, rng):
        x, y = rng.random((40, 12)), rng.integers(0, 3, 40)
        spec = nets.classifier_spec((12, 8, 6, 3))
        a = nets.train_classifier(x, y, TrainConfig(epochs=3), spec=spec)
        b = nets.train_classifier(x, y, TrainConfig(epochs=3), spec=spec)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    @pytest.mark.slow
    def test_digits_accuracy(self, classifier, digits):
        train, _ = digits
        assert classifier.meta["test_accuracy"] >= 0.95
        assert nets.accuracy(classifier, train.images, train.labels) >= 0.95


class TestDae:
    def test_fixed_point_has_zero_score(self):
        m = nets.init_model("id", [LayerSpec(3, 3, "linear")], seed=0, meta={"sigma": 0.5})
        m.params = {"W0": Tensor(np.eye(3)), "b0": Tensor(np.zeros(3))}
        np.testing.assert_array_equal(dae_score(m, np.array([[0.2, -1.0, 4.0]])), np.zeros((1, 3)))

    def test_zero_sigma_has_no_score(self):
        m = nets.init_model("ae", [LayerSpec(2, 2, "linear")], seed=0, meta={"sigma": 0.0})
        with pytest.raises(ValueError, match="undefined"):
            dae_score(m, np.zeros(2))

    def test_stores_sigma(self, rng):
        R = nets.train_dae(rng.normal(size=(50, 2)), 0.3, TrainConfig(epochs=1))
        assert R.meta["sigma"] == 0.3

    def test_one_dimensional_gaussian(self):
        # optimal denoiser of N(0,1) data is x / (1 + sigma^2); its score at x=1 is -1/(1+sigma^2)
        data = np.random.default_rng(0).standard_normal(20000)
        R = nets.train_dae(data, 0.1, TrainConfig(lr=1e-3, epochs=30, seed=1))
        assert dae_score(R, np.array([1.0])).item() == pytest.approx(-1 / 1.01, abs=0.15)

    def test_score_points_inward(self):
        rng = np.random.default_rng(2)
        data = rng.normal(size=(5000, 2)) * 1.5 + np.array([1.0, -1.0])
        R = nets.train_dae(data, 0.15, TrainConfig(lr=1e-3, epochs=30, seed=2))
        mean = data.mean(axis=0)
        theta = rng.uniform(0, 2 * np.pi, 200)
        probes = mean + 2 * 1.5 * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        inner = np.sum(dae_score(R, probes) * (probes - mean), axis=1)
        assert np.mean(inner < 0) >= 0.95


class TestClassGradient:
    @pytest.mark.parametrize("variant", nets.GRADIENT_VARIANTS)
    def test_matches_finite_differences(self, tiny_classifier, variant):
        for seed in range(20):
            x = np.random.default_rng(seed).normal(size=(1, 12))

            def f(tape, xt):
                logits, _ = nets.forward(tiny_classifier, xt, tape)
                return tape.sum(nets.class_objective(tape, logits, seed % 3, variant))

            analytic = class_gradient(tiny_classifier, x, seed % 3, variant)
            tape = Tape()
            xt = tape.leaf(x)
            np.testing.assert_array_equal(analytic, tape.backward(f(tape, xt))[xt.node].data)
            assert grad_check(f, x) < 1e-5

    def test_log_softmax_decomposition(self, tiny_classifier, rng):
        # d log s_i / dx = d l_i / dx - d logsumexp(l) / dx
        x = rng.normal(size=(1, 12))
        tape = Tape()
        xt = tape.leaf(x)
        logits, _ = nets.forward(tiny_classifier, xt, tape)
        lse = tape.sub(tape.slice(logits, 1, 2), tape.slice(tape.log_softmax(logits), 1, 2))
        d_lse = tape.backward(tape.sum(lse))[xt.node].data
        d_logit = class_gradient(tiny_classifier, x, 1, "logit")
        np.testing.assert_allclose(class_gradient(tiny_classifier, x, 1), d_logit - d_lse, atol=1e-10)

    def test_two_class_boundary(self):
        w = np.array([[1.0, -2.0], [0.5, 3.0], [-1.0, 0.0]])
        m = nets.init_model("lin2", [LayerSpec(3, 2, "linear")], seed=0)
        m.params = {"W0": Tensor(w), "b0": Tensor(np.zeros(2))}
        g = class_gradient(m, np.zeros((1, 3)), 0)
        np.testing.assert_allclose(g[0], 0.5 * (w[:, 0] - w[:, 1]), atol=1e-15)

    def test_per_row_targets(self, tiny_classifier, rng):
        x = rng.normal(size=(3, 12))
        g = class_gradient(tiny_classifier, x, [0, 2, 1])
        for i, t in enumerate([0, 2, 1]):
            np.testing.assert_allclose(g[i], class_gradient(tiny_classifier, x[i:i + 1], t)[0], atol=1e-14)

    def test_invalid_target(self, tiny_classifier):
        with pytest.raises(IndexError):
            class_gradient(tiny_classifier, np.zeros((1, 12)), 3)

    def test_unknown_variant(self, tiny_classifier):
        with pytest.raises(ValueError):
            class_gradient(tiny_classifier, np.zeros((1, 12)), 0, "probit")


class TestGan:
    def _uniform_D(self):
        D = nets.init_model("D", nets.chain_specs((12, 5, 2)), seed=0)
        D.params = {k: Tensor(np.zeros(v.shape)) for k, v in D.params.items()}
        return D

    def test_uniform_discriminator(self, rng):
        loss_d, loss_gan = gan_losses(self._uniform_D(), rng.random((4, 12)), rng.random((6, 12)), Tape())
        assert loss_d.item() == pytest.approx(2 * math.log(2), rel=1e-14)
        assert loss_gan.item() == pytest.approx(math.log(2), rel=1e-14)

    def test_needs_two_outputs(self, rng):
        D = nets.init_model("D3", nets.chain_specs((12, 3)), seed=0)
        with pytest.raises(ShapeError):
            gan_losses(D, rng.random((2, 12)), rng.random((2, 12)), Tape())

    def test_confident_discriminator_real_term_vanishes(self):
        # real images light up feature 0, which pushes the "real" logit far up
        D = nets.init_model("D", [LayerSpec(2, 2, "linear")], seed=0)
        D.params = {"W0": Tensor(np.array([[50.0, -50.0], [0.0, 0.0]])), "b0": Tensor(np.zeros(2))}
        real = np.array([[1.0, 0.0]])
        loss_real_only, _ = gan_losses(D, real, np.zeros((1, 2)), Tape())
        assert loss_real_only.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_generator_gradient(self, tiny_generator, rng):
        D = nets.init_model("D", nets.chain_specs((12, 5, 2)), seed=9)
        h, real = rng.random((3, 6)), rng.random((3, 12))

        def f(tape, w0):
            params = dict(tiny_generator.params)
            params["W0"] = w0
            fake, _ = nets.forward(tiny_generator, h, tape, params)
            return gan_losses(D, real, fake, tape)[1]

        assert grad_check(f, tiny_generator.params["W0"].data) < 1e-4

    @pytest.mark.parametrize("ratio, train_d, train_g", [
        (1.0, True, True), (0.05, False, True), (0.1, True, True), (10.0, True, True), (10.5, True, False),
    ])
    def test_balance_rule(self, ratio, train_d, train_g):
        state = gan_balance(ratio, 1.0)
        assert (state.train_D, state.train_G) == (train_d, train_g)
        assert state.r == ratio

    def test_zero_generator_loss_pauses_generator(self):
        state = gan_balance(0.3, 0.0)
        assert state.r == math.inf
        assert (state.train_D, state.train_G) == (True, False)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1e6), st.floats(0, 1e6))
    def test_never_pauses_both(self, loss_d, loss_g):
        state = gan_balance(loss_d, loss_g)
        assert state.train_D or state.train_G


class TestGenerator:
    def _data(self):
        rng = np.random.default_rng(0)
        return rng.random((64, 12)), nets.init_model("E", *nets.classifier_spec((12, 8, 6, 3))[:1], seed=1,
                                                   taps=nets.classifier_spec((12, 8, 6, 3))[1])

    def test_encoder_untouched(self):
        images, E = self._data()
        before = E.param_snapshot()
        nets.train_generator(E, images, "joint", noise_sigmas={"x": 0.01, "h1": 0.1, "h": 0.1},
                             config=TrainConfig(epochs=2))
        after = E.param_snapshot()
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])

    def test_joint_needs_all_sigmas(self):
        images, E = self._data()
        with pytest.raises(ValueError, match="h1"):
            nets.train_generator(E, images, "joint", noise_sigmas={"x": 0.1, "h": 0.1})

    def test_reproducible(self):
        images, E = self._data()
        a, _ = nets.train_generator(E, images, config=TrainConfig(epochs=2))
        b, _ = nets.train_generator(E, images, config=TrainConfig(epochs=2))
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_joint_noise_levels(self, tiny_classifier, rng):
        images = rng.random((30, 12))
        stats = nets.code_statistics(tiny_classifier, images)
        sig = nets.joint_noise_sigmas(tiny_classifier, images)
        assert sig == pytest.approx({"x": 0.01 * stats["x"], "h1": 0.1 * stats["h1"], "h": 0.1 * stats["h"]})

    @pytest.mark.slow
    def test_reconstruction_beats_mean_image(self, generator, classifier, digits):
        train, test = digits
        rec = nets.predict(generator, nets.encode(classifier, test.images))
        rmse = np.sqrt(np.mean((rec - test.images) ** 2))
        baseline = np.sqrt(np.mean((test.images - train.images.mean(axis=0)) ** 2))
        assert rmse < baseline
