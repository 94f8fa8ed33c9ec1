import numpy as np
import pytest

from supconlab.data import AugmentSpec, assemble_multiview_batch, make_blobs, stream
from supconlab.grads import compare_gradients
from supconlab.losses import LossSpec, compute_loss
from supconlab.model import (
    EncoderModel,
    Layer,
    LinearProbe,
    TrainConfig,
    backward,
    ce_loss_and_grad,
    contrastive_objective,
    encode,
    evaluate,
    expected_calibration_error,
    forward,
    inference_parameter_count,
    load_checkpoint,
    reinit_head_retrain,
    save_checkpoint,
    sgd_momentum_step,
    top1_accuracy,
    train_contrastive,
    train_linear_probe,
    train_xent_baseline,
)


@pytest.fixture(scope="module")
def blobs():
    return make_blobs(4, 60, 6, 4.0, 1.0, seed=0)


def small_config(**kw):
    base = dict(epochs=5, batch_n=16, probe_epochs=20, hidden=(16,), rep_dim=8, proj_dim=4)
    base.update(kw)
    return TrainConfig(**base)


def param_fd(f, params, h=1e-6):
    """Central differences of ``f(params)`` over every entry, in long double."""
    params = [p.astype(np.longdouble) for p in params]
    out = []
    for p in params:
        g = np.zeros(p.shape)
        flat, gf = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            x0 = flat[j]
            flat[j] = x0 + h
            fp = f(params)
            flat[j] = x0 - h
            fm = f(params)
            flat[j] = x0
            gf[j] = float((fp - fm) / (2 * h))
        out.append(g)
    return out


class TestForward:
    def test_identity_encoder(self):
        m = EncoderModel.init(3, hidden=None, proj_dim=2, seed=0)
        X = np.array([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0]])
        np.testing.assert_array_equal(forward(m, X).r, X)
        assert m.rep_dim == 3

    def test_unit_rows_and_determinism(self):
        m = EncoderModel.init(5, seed=1)
        X = np.random.default_rng(0).normal(size=(7, 5))
        a, b = forward(m, X), forward(EncoderModel.init(5, seed=1), X)
        np.testing.assert_array_equal(a.z, b.z)
        np.testing.assert_allclose(np.linalg.norm(a.r, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(a.z, axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(encode(m, X), a.r)

    def test_wrong_width(self):
        with pytest.raises(ValueError):
            forward(EncoderModel.init(5, seed=0), np.zeros((2, 4)))

    def test_default_shapes(self):
        m = EncoderModel.init(10)
        assert [l.W.shape for l in m.encoder] == [(64, 10), (32, 64)]
        assert [l.W.shape for l in m.projection] == [(16, 32)]
        assert m.encoder[-1].activation == "identity" and m.encoder[0].activation == "swish"


class TestBackward:
    @pytest.mark.parametrize("activation", ["swish", "tanh"])
    def test_parameter_fd(self, activation):
        m = EncoderModel.init(4, hidden=(5,), rep_dim=4, proj_dim=3, activation=activation, seed=2)
        ds = make_blobs(2, 8, 4, 2.0, 1.0, 0)
        X, y = ds.train()
        inputs = assemble_multiview_batch(X, y, np.arange(4), AugmentSpec(0.2), stream(0))
        spec = LossSpec("SupOut", 0.3)
        _, _, grads = contrastive_objective(m, inputs, spec)

        def f(params):
            fwd = forward(m.with_parameters(params), inputs.X.astype(np.longdouble))
            return compute_loss(inputs.to_batch(fwd.z), spec).total / inputs.X.shape[0]

        for a, n in zip(grads, param_fd(f, m.parameters())):
            assert compare_gradients(a, n, 1e-6).max_rel_err <= 1e-5

    def test_zero_upstream(self):
        m = EncoderModel.init(4, hidden=(5,), rep_dim=4, proj_dim=3, seed=3)
        fwd = forward(m, np.random.default_rng(1).normal(size=(6, 4)))
        for g in backward(m, fwd, grad_w=np.zeros_like(fwd.w)):
            np.testing.assert_array_equal(g, 0.0)

    def test_dead_relu_bias(self):
        m = EncoderModel.init(3, hidden=(4,), rep_dim=3, proj_dim=2, activation="relu", seed=4)
        m.encoder[0].b[:] = -100.0  # every hidden unit off
        m.encoder[1].b[:] = [1.0, 2.0, 3.0]  # keep r_raw away from zero
        X = np.random.default_rng(2).normal(size=(5, 3))
        fwd = forward(m, X)
        g = backward(m, fwd, grad_w=np.ones_like(fwd.w))
        np.testing.assert_array_equal(g[1], 0.0)
        np.testing.assert_array_equal(g[0], 0.0)

    def test_saturated_swish_bias_small(self):
        m = EncoderModel.init(3, hidden=(4,), rep_dim=3, proj_dim=2, seed=5)
        m.encoder[0].b[:] = -60.0
        m.encoder[1].b[:] = [1.0, 2.0, 3.0]
        fwd = forward(m, np.random.default_rng(3).normal(size=(5, 3)))
        assert np.abs(backward(m, fwd, grad_w=np.ones_like(fwd.w))[1]).max() < 1e-20

    def test_grad_r_only(self):
        m = EncoderModel.init(3, hidden=(4,), rep_dim=3, proj_dim=2, seed=6)
        fwd = forward(m, np.random.default_rng(4).normal(size=(5, 3)))
        g = backward(m, fwd, grad_r=np.ones_like(fwd.r))
        np.testing.assert_array_equal(g[-1], 0.0)
        assert np.abs(g[0]).max() > 0


class TestSgd:
    def test_plain_step(self):
        p, _ = sgd_momentum_step([np.array([1.0, 2.0])], [np.array([0.5, -1.0])], 0.1, 0.0)
        np.testing.assert_allclose(p[0], [0.95, 2.1], rtol=1e-15)

    def test_two_step_closed_form(self):
        g, lr, m = np.array([0.3, -2.0]), 0.05, 0.9
        p, v = sgd_momentum_step([np.zeros(2)], [g], lr, m)
        p, v = sgd_momentum_step(p, [g], lr, m, v)
        np.testing.assert_allclose(p[0], -lr * g * (2 + m), rtol=1e-14)

    def test_quadratic_convergence(self):
        A = np.diag([1.0, 10.0])
        x, v = [np.array([3.0, -2.0])], None
        for _ in range(500):
            x, v = sgd_momentum_step(x, [A @ x[0]], 0.05, 0.5, v)
        assert np.linalg.norm(x[0]) <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_momentum_step([np.zeros(2)], [np.zeros(3)], 0.1, 0.0)


class TestTraining:
    def test_zero_epochs_unchanged(self, blobs):
        cfg = small_config(epochs=0)
        m, traj = train_contrastive(cfg, blobs)
        assert traj == []
        for a, b in zip(m.parameters(), cfg.init_model(blobs.dim).parameters()):
            np.testing.assert_array_equal(a, b)

    def test_loss_decreases_and_is_deterministic(self, blobs):
        cfg = small_config(epochs=15)
        _, t1 = train_contrastive(cfg, blobs)
        _, t2 = train_contrastive(cfg, blobs)
        assert t1 == t2
        assert t1[-1] < t1[0]

    def test_probe_freezes_encoder(self, blobs):
        cfg = small_config()
        m, _ = train_contrastive(cfg, blobs)
        before = [p.copy() for p in m.parameters()]
        probe, top1 = train_linear_probe(m, blobs, cfg)
        for a, b in zip(m.parameters(), before):
            np.testing.assert_array_equal(a, b)
        assert 0.0 <= top1 <= 1.0
        assert probe.W.shape == (4, m.rep_dim)

    def test_triplet_not_trainable(self, blobs):
        with pytest.raises(ValueError):
            train_contrastive(small_config(loss_spec=LossSpec("Triplet")), blobs)

    def test_self_supervised_runs(self, blobs):
        _, traj = train_contrastive(small_config(loss_spec=LossSpec("SelfSup"), epochs=2), blobs)
        assert len(traj) == 2 and np.all(np.isfinite(traj))

    def test_xent_baseline(self, blobs):
        cfg = small_config(epochs=15)
        xm, top1, traj = train_xent_baseline(cfg, blobs)
        assert traj[-1] < traj[0]
        assert top1 >= 0.9
        _, top1_again, traj_again = train_xent_baseline(cfg, blobs)
        assert (top1, traj) == (top1_again, traj_again)

    def test_xent_zero_epochs(self, blobs):
        xm, _, traj = train_xent_baseline(small_config(epochs=0), blobs)
        assert traj == []
        for a, b in zip(xm.model.parameters(), small_config().init_model(blobs.dim).parameters()):
            np.testing.assert_array_equal(a, b)

    def test_reinit_head(self, blobs):
        cfg = small_config(epochs=15)
        xm, e2e, _ = train_xent_baseline(cfg, blobs)
        before = [p.copy() for p in xm.model.parameters()]
        # an untrained head maps clusters to classes at random, so average
        # over head initializations to see chance level
        untrained = [reinit_head_retrain(xm, blobs, cfg.replace(probe_epochs=0, seed=s))[1]
                     for s in range(20)]
        _, retrained = reinit_head_retrain(xm, blobs, cfg)
        assert abs(np.mean(untrained) - 0.25) <= 0.1
        assert retrained <= e2e + 0.05
        for a, b in zip(xm.model.parameters(), before):
            np.testing.assert_array_equal(a, b)

    def test_config_validation(self):
        for kw in (dict(epochs=-1), dict(batch_n=0), dict(learning_rate=0.0),
                   dict(momentum=1.0), dict(activation="gelu")):
            with pytest.raises(ValueError):
                TrainConfig(**kw)

    def test_inference_parameter_parity(self, blobs):
        counts = set()
        for variant in ("SupOut", "SupIn", "SelfSup"):
            cfg = small_config(loss_spec=LossSpec(variant), epochs=1)
            m, _ = train_contrastive(cfg, blobs)
            probe, _ = train_linear_probe(m, blobs, cfg)
            counts.add(inference_parameter_count(m, probe))
        xm, _, _ = train_xent_baseline(small_config(epochs=1), blobs)
        counts.add(inference_parameter_count(xm.model, xm.head))
        assert counts == {6 * 16 + 16 + 16 * 8 + 8 + 8 * 4 + 4}


class TestMetrics:
    def test_ce_loss_and_grad(self):
        logits = np.array([[2.0, 0.0], [0.0, 0.0]])
        loss, g = ce_loss_and_grad(logits, [0, 1])
        p = np.exp(2) / (np.exp(2) + 1)
        assert loss == pytest.approx((-np.log(p) + np.log(2)) / 2, rel=1e-14)
        np.testing.assert_allclose(g, [[(p - 1) / 2, (1 - p) / 2], [0.25, -0.25]], rtol=1e-14)

    def test_top1_ties_lowest_index(self):
        assert top1_accuracy(np.array([[1.0, 1.0], [0.0, 0.0]]), [0, 0]) == 1.0

    def test_perfect_classifier(self):
        probs = np.eye(4)[[0, 1, 2, 3, 1]]
        assert top1_accuracy(probs, [0, 1, 2, 3, 1]) == 1.0
        assert expected_calibration_error(probs, [0, 1, 2, 3, 1]) == 0.0

    def test_uniform_random_near_chance(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(20_000, 4))
        assert abs(top1_accuracy(logits, rng.integers(0, 4, 20_000)) - 0.25) <= 0.03

    def test_ten_sample_hand_case(self):
        # confidences chosen to land in three bins
        conf = np.array([0.95, 0.95, 0.95, 0.95, 0.5, 0.5, 0.5, 0.3, 0.3, 0.3])
        # rows 7-9 put their max 0.6 on class 1
        probs3 = np.zeros((10, 3))
        probs3[:7, 0], probs3[:7, 1] = conf[:7], 1 - conf[:7]
        probs3[7:] = [[0.3, 0.6, 0.1]] * 3
        labels3 = np.array([0, 0, 0, 1, 0, 1, 1, 1, 0, 0])
        # bins: conf 0.95 -> (14/15, 1]: 4 samples, acc 3/4
        #       conf 0.6  -> (8/15, 9/15]: 3 samples, acc 1/3
        #       conf 0.5  -> (7/15, 8/15]: 3 samples, acc 1/3
        expected = 0.4 * abs(0.75 - 0.95) + 0.3 * abs(1 / 3 - 0.6) + 0.3 * abs(1 / 3 - 0.5)
        assert expected_calibration_error(probs3, labels3) == pytest.approx(expected, abs=1e-15)

    def test_bin_edges_right_closed(self):
        # confidence exactly 1/3 sits in bin (4/15, 5/15], not the next one
        probs = np.full((1, 3), 1 / 3)
        assert expected_calibration_error(probs, [0]) == pytest.approx(2 / 3, abs=1e-15)

    def test_evaluate_returns_pair(self, blobs):
        m = EncoderModel.init(blobs.dim, hidden=(8,), rep_dim=4, seed=0)
        probe = LinearProbe.init(4, 4, stream(0))
        top1, ece = evaluate(m, probe, *blobs.heldout())
        assert 0 <= top1 <= 1 and 0 <= ece <= 1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = EncoderModel.init(5, hidden=(6, 4), rep_dim=3, proj_hidden=(4,), proj_dim=2,
                              activation="tanh", seed=7)
        save_checkpoint(m, tmp_path / "m.ck")
        back = load_checkpoint(tmp_path / "m.ck")
        assert back.input_dim == 5
        assert [l.activation for l in back.layers()] == [l.activation for l in m.layers()]
        for a, b in zip(back.parameters(), m.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_header_layout(self, tmp_path):
        m = EncoderModel(encoder=[Layer(np.ones((2, 3)), np.zeros(2), "relu")],
                         projection=[Layer(np.full((1, 2), 0.5), np.array([-1.0]))], input_dim=3)
        save_checkpoint(m, tmp_path / "m.ck")
        data = (tmp_path / "m.ck").read_bytes()
        assert data[:8] == b"SUPCONCK"
        assert np.frombuffer(data[8:24], "<u4").tolist() == [1, 3, 1, 1]
        assert np.frombuffer(data[24:48], "<u4").tolist() == [2, 3, 1, 1, 2, 0]
        assert np.frombuffer(data[48:], "<f8").tolist() == [1.0] * 6 + [0.0] * 2 + [0.5, 0.5, -1.0]

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "x.ck").write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.ck")
