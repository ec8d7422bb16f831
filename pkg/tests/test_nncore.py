"""Tests for ecrl.nncore."""

import json

import numpy as np
import pytest

from ecrl.errors import CheckpointError, ConfigError
from ecrl.nncore import (
    CHECKPOINT_FORMAT_VERSION,
    Adam,
    DenseSkipNet,
    GaussianHead,
    GradTape,
    Tensor,
    backward,
    clip,
    clip_grad_norm,
    concat,
    elu,
    entropy,
    global_grad_norm,
    load_checkpoint,
    load_parameters,
    logprob,
    named_parameters,
    opt_step,
    parameter_count,
    sample_and_logprob,
    save_checkpoint,
    scaled_widths,
    stack,
    tanh,
    where,
)
from tests.conftest import numeric_grad, relative_error


def _param_gradient_check(net, x, weights, eps=1e-6):
    """Compare tape gradients of sum(net(x) * weights) with finite differences, per parameter."""
    for p in net.parameters():
        p.zero_grad()
    with GradTape() as tape:
        out = (net(x) * weights).sum()
    tape.backward(out)
    errors = []
    for p in net.parameters():
        original = p.data.copy()

        def f(value, p=p):
            p.data = value
            return float((net(x).data * weights).sum())

        numeric = numeric_grad(f, original, eps)
        p.data = original
        errors.append(relative_error(p.grad, numeric))
    return max(errors)


class TestTensorOps:
    """Gradient checks for individual operations."""

    @pytest.mark.parametrize(
        "op",
        [
            lambda a, b: a + b,
            lambda a, b: a - b,
            lambda a, b: a * b,
            lambda a, b: a / (b * b + 1.0),
            lambda a, b: (a * a + 1.0) ** 0.5,
            lambda a, b: elu(a) * b,
            lambda a, b: tanh(a - b),
            lambda a, b: concat([a, b], axis=-1) * 2.0,
            lambda a, b: stack([a, b], axis=0).sum(axis=0),
            lambda a, b: where(a.data > b.data, a, b),
            lambda a, b: a[:, 1:] * b[:, :-1],
        ],
    )
    def test_binary_gradients(self, rng, op):
        """Test each op's gradient against central differences."""
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
        with GradTape() as tape:
            out = op(a, b).sum()
        tape.backward(out)

        numeric_a = numeric_grad(lambda x: float(op(Tensor(x), Tensor(b0)).data.sum()), a0)
        numeric_b = numeric_grad(lambda x: float(op(Tensor(a0), Tensor(x)).data.sum()), b0)
        assert relative_error(a.grad, numeric_a) < 1e-6
        assert relative_error(b.grad, numeric_b) < 1e-6

    def test_backward_returns_parameter_grads(self, rng):
        """Test backward() returns each parameter's gradient, zeros for unused ones."""
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        unused = Tensor(rng.normal(size=2), requires_grad=True)
        with GradTape() as tape:
            out = (a * a).sum()
        grads = backward(tape, out, [a, unused])
        np.testing.assert_array_equal(grads[0], a.grad)
        np.testing.assert_allclose(grads[0], 2.0 * a.data)
        np.testing.assert_array_equal(grads[1], np.zeros(2))

    def test_tape_replay(self, rng):
        """Test a second backward over one tape adds the same leaf gradient again."""
        a = Tensor(rng.normal(size=3), requires_grad=True)
        with GradTape() as tape:
            out = (tanh(a) * 3.0).sum()
        tape.backward(out)
        first = a.grad.copy()
        a.zero_grad()
        tape.backward(out)
        np.testing.assert_allclose(a.grad, first)

    def test_broadcast_reduces_gradient(self):
        """Test a broadcast operand receives the summed gradient."""
        a = Tensor(np.ones((5, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        with GradTape() as tape:
            out = (a * b).sum()
        tape.backward(out)
        np.testing.assert_allclose(b.grad, [5.0, 5.0, 5.0])

    def test_reused_node_accumulates(self):
        """Test a value used twice receives both contributions."""
        a = Tensor(np.array(3.0), requires_grad=True)
        with GradTape() as tape:
            out = a * a + a
        tape.backward(out)
        assert float(a.grad) == pytest.approx(7.0)

    def test_no_tape_records_nothing(self):
        """Test operations outside a tape produce plain values."""
        a = Tensor(np.ones(3), requires_grad=True)
        out = a * 2.0
        assert not out.requires_grad
        assert out._backward is None

    def test_clip_zero_gradient_outside(self):
        """Test clip passes no gradient where it is active."""
        a = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
        with GradTape() as tape:
            out = clip(a, -1.0, 1.0).sum()
        tape.backward(out)
        np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])

    def test_ndarray_on_the_left(self):
        """Test ndarray (op) Tensor dispatches to the Tensor."""
        a = Tensor(np.ones(3), requires_grad=True)
        with GradTape() as tape:
            out = (np.full(3, 2.0) * a - np.ones(3)).sum()
        assert isinstance(out, Tensor)
        tape.backward(out)
        np.testing.assert_allclose(a.grad, 2.0)


class TestDenseSkipNet:
    """Tests for the dense-skip MLP."""

    @pytest.mark.parametrize("activation", ["elu", "tanh"])
    def test_parameter_gradients(self, rng, activation):
        """Test backprop through an 8-wide two-layer net matches finite differences."""
        net = DenseSkipNet(5, [8, 8], 3, rng, activation=activation)
        x = rng.normal(size=(4, 5))
        weights = rng.normal(size=(4, 3))
        assert _param_gradient_check(net, x, weights) < 1e-5

    def test_input_gradient(self, rng):
        """Test the gradient with respect to the input."""
        net = DenseSkipNet(4, [8], 2, rng)
        x0 = rng.normal(size=(3, 4))
        x = Tensor(x0, requires_grad=True)
        with GradTape() as tape:
            out = net(x).sum()
        tape.backward(out)
        numeric = numeric_grad(lambda v: float(net(v).data.sum()), x0)
        assert relative_error(x.grad, numeric) < 1e-6

    def test_skip_wiring(self, rng):
        """Test the second hidden layer sees the raw input."""
        net = DenseSkipNet(3, [4, 5], 2, rng)
        assert net.hidden_layers[0].weight.shape == (3, 4)
        assert net.hidden_layers[1].weight.shape == (4 + 3, 5)
        assert net.output_layer.weight.shape == (5, 2)
        x = rng.normal(size=(2, 3))
        pre = net.preactivations(x)
        h0 = elu(pre[0]).data
        expected = np.concatenate([h0, x], axis=-1) @ net.hidden_layers[1].weight.data
        np.testing.assert_allclose(pre[1], expected + net.hidden_layers[1].bias.data, atol=1e-12)

    def test_no_hidden_layers_is_affine(self, rng):
        """Test an empty hidden list gives a single linear map."""
        net = DenseSkipNet(3, [], 2, rng)
        x = rng.normal(size=(4, 3))
        expected = x @ net.output_layer.weight.data + net.output_layer.bias.data
        np.testing.assert_allclose(net(x).data, expected)

    def test_parameter_count(self, rng):
        """Test the closed-form count matches the allocated parameters."""
        net = DenseSkipNet(6, [8, 4], 3, rng)
        assert net.num_parameters() == sum(p.data.size for p in net.parameters())
        assert parameter_count(6, [8, 4], 3) == 6 * 8 + 8 + 14 * 4 + 4 + 4 * 3 + 3

    def test_dimension_mismatch(self, rng):
        """Test a wrong input width raises ConfigError."""
        net = DenseSkipNet(3, [4], 2, rng)
        with pytest.raises(ConfigError, match="dimension mismatch"):
            net(np.zeros((1, 5)))

    def test_unknown_activation(self, rng):
        """Test an unknown activation is rejected."""
        with pytest.raises(ConfigError):
            DenseSkipNet(3, [4], 2, rng, activation="relu6")

    def test_same_seed_same_weights(self):
        """Test construction is reproducible from the generator."""
        a = DenseSkipNet(3, [4], 2, np.random.default_rng(7))
        b = DenseSkipNet(3, [4], 2, np.random.default_rng(7))
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_orthogonal_hidden_init(self, rng):
        """Test hidden weights are scaled orthogonal matrices."""
        net = DenseSkipNet(8, [8], 2, rng)
        w = net.hidden_layers[0].weight.data
        np.testing.assert_allclose(w.T @ w, 2.0 * np.eye(8), atol=1e-10)

    def test_scaled_widths(self):
        """Test width scaling rounds and never reaches zero."""
        assert scaled_widths([512, 256, 3], 0.25) == [128, 64, 1]


class TestGaussianHead:
    """Tests for the diagonal Gaussian."""

    def test_logprob_matches_closed_form(self, rng):
        """Test logprob against the textbook density."""
        head = GaussianHead(3, init_std=0.5)
        mean, action = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        expected = np.sum(
            -0.5 * ((action - mean) / 0.5) ** 2 - np.log(0.5) - 0.5 * np.log(2 * np.pi), axis=-1
        )
        np.testing.assert_allclose(logprob(head, mean, action).data, expected)

    def test_entropy(self):
        """Test entropy of a unit Gaussian per dimension."""
        head = GaussianHead(2, init_std=1.0)
        assert float(entropy(head).data) == pytest.approx(2 * 0.5 * (1.0 + np.log(2 * np.pi)))

    def test_sample_logprob_consistent(self, rng):
        """Test sampled logprobs equal logprob of the sample."""
        head = GaussianHead(3)
        mean = rng.normal(size=(5, 3))
        action, lp = sample_and_logprob(head, mean, rng)
        np.testing.assert_allclose(lp, logprob(head, mean, action).data)

    def test_project_clamps(self):
        """Test project keeps log_std within bounds."""
        head = GaussianHead(2, log_std_bounds=(-1.0, 0.0))
        head.log_std.data[:] = [-3.0, 2.0]
        head.project()
        np.testing.assert_array_equal(head.log_std.data, [-1.0, 0.0])


class TestAdam:
    """Tests for the optimizer and gradient utilities."""

    def test_minimizes_quadratic(self):
        """Test Adam drives a quadratic to its minimum."""
        x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam([x], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            with GradTape() as tape:
                loss = ((x - np.array([1.0, 1.0])) ** 2).sum()
            tape.backward(loss)
            opt.step()
        np.testing.assert_allclose(x.data, [1.0, 1.0], atol=1e-2)

    def test_first_step_size_is_lr(self):
        """Test the bias-corrected first step moves each coordinate by lr."""
        x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        opt = Adam([x], lr=0.01)
        x.grad = np.array([5.0, -0.1])
        opt.step()
        np.testing.assert_allclose(x.data, [0.99, -0.99], atol=1e-6)

    def test_rejects_non_finite(self):
        """Test a NaN gradient leaves parameters and moments untouched."""
        x = Tensor(np.array([1.0]), requires_grad=True, name="x")
        opt = Adam([x], lr=0.1)
        x.grad = np.array([np.nan])
        assert opt.step() is False
        assert opt.t == 0
        assert opt.rejected_steps == 1
        np.testing.assert_array_equal(x.data, [1.0])

    def test_opt_step_uses_given_grads(self):
        """Test opt_step applies the supplied gradients in parameter order."""
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([x, y], lr=0.01)
        assert opt_step(opt, [np.array([2.0]), np.array([-2.0])]) is True
        np.testing.assert_allclose(x.data, [0.99], atol=1e-6)
        np.testing.assert_allclose(y.data, [1.01], atol=1e-6)

    def test_opt_step_rejects_non_finite(self):
        """Test a non-finite gradient makes opt_step return False without moving anything."""
        x = Tensor(np.array([1.0]), requires_grad=True, name="x")
        opt = Adam([x], lr=0.1)
        assert opt_step(opt, [np.array([np.inf])]) is False
        assert opt.rejected_steps == 1
        np.testing.assert_array_equal(x.data, [1.0])

    def test_opt_step_gradient_count(self):
        """Test opt_step needs one gradient per parameter."""
        opt = Adam([Tensor(np.zeros(1), requires_grad=True)], lr=0.1)
        with pytest.raises(ValueError):
            opt_step(opt, [])

    def test_state_dict_round_trip(self, rng):
        """Test optimizer moments survive a save and load."""
        x = Tensor(rng.normal(size=3), requires_grad=True)
        opt = Adam([x], lr=0.1)
        x.grad = rng.normal(size=3)
        opt.step()
        restored = Adam([x], lr=0.1)
        restored.load_state_dict(opt.state_dict("opt"), "opt")
        assert restored.t == 1
        np.testing.assert_array_equal(restored.m[0], opt.m[0])
        np.testing.assert_array_equal(restored.v[0], opt.v[0])

    def test_clip_grad_norm(self):
        """Test gradients above the cap are rescaled to it."""
        a = Tensor(np.zeros(2), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        norm = clip_grad_norm([a, b], 1.0)
        assert norm == pytest.approx(5.0)
        assert global_grad_norm([a, b]) == pytest.approx(1.0)
        np.testing.assert_allclose(a.grad, [0.6, 0.0])

    def test_clip_grad_norm_below_cap(self):
        """Test gradients below the cap are untouched."""
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([0.3, 0.4])
        clip_grad_norm([a], 1.0)
        np.testing.assert_array_equal(a.grad, [0.3, 0.4])


class TestCheckpoint:
    """Tests for the NPZ checkpoint container."""

    def test_round_trip(self, temp_dir, rng):
        """Test parameters and meta survive save and load."""
        net = DenseSkipNet(3, [4], 2, rng, name="policy")
        path = temp_dir / "ckpt.npz"
        save_checkpoint(path, named_parameters(net.parameters()), {"mode": "naive"})

        arrays, meta = load_checkpoint(path)
        assert meta["mode"] == "naive"
        assert meta["format_version"] == CHECKPOINT_FORMAT_VERSION
        assert meta["shapes"]["policy.hidden0.weight"] == [3, 4]

        other = DenseSkipNet(3, [4], 2, np.random.default_rng(99), name="policy")
        load_parameters(other.parameters(), arrays)
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(other(x).data, net(x).data)

    def test_missing_file(self, temp_dir):
        """Test a missing path raises CheckpointError."""
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(temp_dir / "absent.npz")

    def test_corrupt_file(self, temp_dir):
        """Test garbage bytes raise CheckpointError."""
        path = temp_dir / "bad.npz"
        path.write_bytes(b"not an archive")
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path)

    def test_missing_meta(self, temp_dir):
        """Test an archive without meta is rejected."""
        path = temp_dir / "plain.npz"
        np.savez(path, a=np.zeros(2))
        with pytest.raises(CheckpointError, match="meta"):
            load_checkpoint(path)

    def test_version_mismatch(self, temp_dir):
        """Test an unknown format version is rejected."""
        path = temp_dir / "future.npz"
        np.savez(path, __meta__=np.array(json.dumps({"format_version": 99})))
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(path)

    def test_shape_mismatch(self, temp_dir, rng):
        """Test loading into a differently shaped model fails."""
        small = DenseSkipNet(3, [4], 2, rng, name="policy")
        large = DenseSkipNet(3, [6], 2, rng, name="policy")
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_parameters(large.parameters(), named_parameters(small.parameters()))

    def test_missing_parameter(self, rng):
        """Test a model parameter absent from the checkpoint fails."""
        net = DenseSkipNet(3, [4], 2, rng, name="policy")
        with pytest.raises(CheckpointError, match="lacks parameter"):
            load_parameters(net.parameters(), {})
