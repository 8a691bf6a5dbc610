"""
Tests for losses, ADAM and the training loop, including the mean/median law
checked with the constant-predictor harness.
"""

import gc
import weakref

import numpy as np
import pandas as pd
import pytest

from core import autodiff as ad
from core.exceptions import GradientError, InvalidArgumentError, ShapeMismatchError, TrainingDivergedError
from core.network import DwanModel, DwanSpec, NetworkParameters, build, load_params
from core.phantom import NoiseModel, generate_subject, segment_means
from core.tensor import Tensor, precision
from core.trainer import (
    AdamState,
    ConstantPredictor,
    LossKind,
    TrainConfig,
    Trainer,
    adam_step,
    loss_l1,
    loss_l2,
    train,
    write_loss_trace,
)


def loss_value(loss_fn, pred, target):
    graph = ad.Graph()
    return loss_fn(graph.constant(Tensor(pred)), graph.constant(Tensor(target))).value.item()


def constant_dataset(targets):
    """Pairs whose inputs are ignored by the constant predictor."""
    return [(Tensor(np.zeros_like(t)), Tensor(t)) for t in targets]


# =============================================================================
# Losses
# =============================================================================

class TestLosses:

    def test_l2_examples(self):
        assert loss_value(loss_l2, [1.0, 2.0], [0.0, 0.0]) == pytest.approx(2.5)
        assert loss_value(loss_l2, [3.0, -1.0], [3.0, -1.0]) == 0.0

    def test_l1_examples(self):
        assert loss_value(loss_l1, [1.0, -3.0], [0.0, 0.0]) == pytest.approx(2.0)
        assert loss_value(loss_l1, [3.0, -1.0], [3.0, -1.0]) == 0.0

    @pytest.mark.parametrize("loss_fn", [loss_l1, loss_l2])
    def test_shape_mismatch(self, loss_fn):
        graph = ad.Graph()
        with pytest.raises(ShapeMismatchError):
            loss_fn(graph.constant(Tensor.zeros((2,))), graph.constant(Tensor.zeros((3,))))

    @pytest.mark.parametrize("loss_fn", [loss_l1, loss_l2])
    def test_gradient_matches_finite_differences(self, loss_fn):
        rng = np.random.default_rng(5)
        with precision("float64"):
            pred = rng.uniform(-1, 1, (3, 4))
            target = rng.uniform(-1, 1, (3, 4))
            # keep every residual away from the L1 kink
            pred[np.abs(pred - target) < 1e-3] += 0.01
            graph = ad.Graph()
            node = graph.parameter("pred", Tensor(pred))
            ad.backward(graph, loss_fn(node, graph.constant(Tensor(target))))
            for index in np.ndindex(pred.shape):
                numeric = ad.numerical_gradient(lambda v: loss_value(loss_fn, v, target), pred, index, 1e-5)
                assert ad.gradient_relative_error(node.grad[index], numeric) < 1e-6

    def test_l1_gradient_is_zero_at_zero_residual(self):
        graph = ad.Graph()
        node = graph.parameter("pred", Tensor([1.0, 2.0]))
        ad.backward(graph, loss_l1(node, graph.constant(Tensor([1.0, 0.0]))))
        np.testing.assert_array_equal(node.grad, [0.0, 0.5])


# =============================================================================
# ADAM
# =============================================================================

def scalar_params(value):
    return NetworkParameters([("theta", Tensor(np.atleast_1d(value)))])


class TestAdam:

    def test_first_step_moves_by_lr(self):
        rng = np.random.default_rng(1)
        with precision("float64"):
            start = rng.standard_normal(50)
            grads = rng.choice([-1.0, 1.0], 50) * rng.uniform(0.01, 10.0, 50)
            params = scalar_params(start)
            updated, state = adam_step(params, {"theta": grads}, AdamState.initial(params, lr=0.001))
        delta = np.abs(updated["theta"].numpy() - start)
        assert np.all(delta >= 0.000999)
        assert np.all(delta <= 0.001 + 1e-12)
        assert np.all(np.sign(start - updated["theta"].numpy()) == np.sign(grads))
        assert state.t == 1

    def test_step_bounded_by_lr_for_constant_magnitude(self):
        rng = np.random.default_rng(2)
        with precision("float64"):
            magnitude = rng.uniform(0.1, 5.0, 20)
            params = scalar_params(np.zeros(20))
            state = AdamState.initial(params, lr=0.001)
            for _ in range(200):
                grads = rng.choice([-1.0, 1.0], 20) * magnitude
                updated, state = adam_step(params, {"theta": grads}, state)
                delta = np.abs(updated["theta"].numpy() - params["theta"].numpy())
                assert np.all(delta <= 0.001 * (1 + 1e-9))
                params = updated
        assert state.t == 200

    def test_zero_gradient_never_moves(self):
        params = scalar_params(np.arange(4.0))
        state = AdamState.initial(params)
        for _ in range(100):
            params, state = adam_step(params, {"theta": np.zeros(4)}, state)
        np.testing.assert_array_equal(params["theta"].numpy(), np.arange(4.0))

    def test_quadratic_converges(self):
        with precision("float64"):
            params = scalar_params(0.0)
            state = AdamState.initial(params, lr=0.01)
            for _ in range(3000):
                theta = params["theta"].numpy()
                params, state = adam_step(params, {"theta": 2.0 * (theta - 3.0)}, state)
        assert params["theta"].item() == pytest.approx(3.0, abs=1e-3)

    def test_state_shapes_mirror_parameters(self):
        params = build(DwanSpec(base_channels=2, expansion_channels=4), seed=0)
        state = AdamState.initial(params)
        for name, tensor in params:
            assert state.m[name].shape == tensor.shape
            assert state.v[name].shape == tensor.shape

    def test_missing_gradient(self):
        params = NetworkParameters([("a", Tensor([1.0])), ("b", Tensor([2.0]))])
        with pytest.raises(GradientError):
            adam_step(params, {"a": np.ones(1)}, AdamState.initial(params))


# =============================================================================
# Training loop
# =============================================================================

class TestTrainConfig:

    @pytest.mark.parametrize("kwargs", [
        {"batch_size": 0},
        {"epochs": 0},
        {"learning_rate": 0.0},
        {"checkpoint_every": -1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**kwargs)

    def test_loss_kind_from_string(self):
        assert TrainConfig(loss_kind="l2").loss_kind is LossKind.L2
        with pytest.raises(ValueError):
            TrainConfig(loss_kind="huber")


class TestConstantPredictor:
    """The minimizer of L2 is the per-pixel mean of the references, of L1 the median."""

    @pytest.fixture
    def skewed_targets(self):
        rng = np.random.default_rng(11)
        center = rng.uniform(0.2, 0.8, (4, 4))
        return [center + 0.25 * (rng.exponential(1.0, (4, 4)) - 1.0) for _ in range(15)]

    def fit(self, targets, loss, lr, epochs, batch_size=5):
        harness = ConstantPredictor(targets[0].shape)
        config = TrainConfig(loss_kind=loss, batch_size=batch_size, epochs=epochs, seed=3, learning_rate=lr)
        result = train(harness, harness.initial_params(), constant_dataset(targets), config)
        return result.params[ConstantPredictor.PARAM].numpy()[0, 0]

    def test_l2_converges_to_mean(self, skewed_targets):
        bias = self.fit(skewed_targets, "l2", lr=1e-4, epochs=7000)
        np.testing.assert_allclose(bias, np.mean(skewed_targets, axis=0), atol=1e-2)

    def test_l1_converges_to_median(self, skewed_targets):
        bias = self.fit(skewed_targets, "l1", lr=1e-4, epochs=7000)
        np.testing.assert_allclose(bias, np.median(skewed_targets, axis=0), atol=2e-2)

    def test_l1_resists_outlier_references(self):
        rng = np.random.default_rng(12)
        center = rng.uniform(0.2, 0.8, (4, 4))
        clean = [center + 0.05 * rng.standard_normal((4, 4)) for _ in range(18)]
        targets = clean + [center + 5.0, center + 5.0]

        # full batch: deterministic gradients, so both losses settle on their minimizers
        l1 = self.fit(targets, "l1", lr=3e-3, epochs=3000, batch_size=len(targets))
        l2 = self.fit(targets, "l2", lr=3e-3, epochs=3000, batch_size=len(targets))

        clean_median = np.median(clean, axis=0)
        contaminated_mean = np.mean(targets, axis=0)
        np.testing.assert_allclose(l1, clean_median, atol=2e-2)
        np.testing.assert_allclose(l2, contaminated_mean, atol=5e-2)
        # the contamination bias of the mean is 2 * 5 / 20 = 0.5 per pixel
        assert np.all(np.abs(l2 - clean_median) >= 0.4)


class TestTrainer:

    def small_dataset(self, count=7, seed=0):
        rng = np.random.default_rng(seed)
        return constant_dataset([rng.uniform(0, 1, (3, 3)) for _ in range(count)])

    def test_identical_seeds_give_identical_traces(self):
        harness = ConstantPredictor((3, 3))
        config = TrainConfig(loss_kind="l2", batch_size=2, epochs=5, seed=9, learning_rate=0.01)
        first = train(harness, harness.initial_params(), self.small_dataset(), config)
        second = train(harness, harness.initial_params(), self.small_dataset(), config)
        assert first.loss_trace == second.loss_trace
        assert first.params.equal(second.params)

    def test_last_partial_batch_is_trained(self):
        harness = ConstantPredictor((3, 3))
        config = TrainConfig(loss_kind="l1", batch_size=3, epochs=4, learning_rate=0.01)
        result = train(harness, harness.initial_params(), self.small_dataset(count=7), config)
        assert result.steps == 3 * 4
        assert [epoch for epoch, _ in result.loss_trace] == [1, 2, 3, 4]

    def test_empty_dataset(self):
        harness = ConstantPredictor((3, 3))
        with pytest.raises(InvalidArgumentError):
            train(harness, harness.initial_params(), [], TrainConfig())

    def test_mixed_slice_shapes(self):
        harness = ConstantPredictor((3, 3))
        dataset = self.small_dataset(count=2) + constant_dataset([np.zeros((4, 4))])
        with pytest.raises(ShapeMismatchError):
            train(harness, harness.initial_params(), dataset, TrainConfig(epochs=1))

    def test_non_finite_loss_aborts_with_last_good_parameters(self):
        harness = ConstantPredictor((3, 3))
        start = harness.initial_params()
        dataset = constant_dataset([np.full((3, 3), np.inf)])
        with pytest.raises(TrainingDivergedError) as excinfo:
            train(harness, start, dataset, TrainConfig(loss_kind="l2", epochs=3))
        assert excinfo.value.epoch == 1
        assert excinfo.value.step == 1
        assert excinfo.value.last_good_params.equal(start)

    def test_checkpoints_and_validation_selection(self, tmp_path):
        harness = ConstantPredictor((3, 3))
        scores = iter([1.0, 3.0, 2.0])
        config = TrainConfig(loss_kind="l2", batch_size=3, epochs=6, checkpoint_every=2, learning_rate=0.01)
        result = train(harness, harness.initial_params(), self.small_dataset(count=7), config,
                       checkpoint_dir=tmp_path, validate=lambda params: next(scores))

        assert [p.name for p in result.checkpoints] == [
            "checkpoint_step000006.aslw", "checkpoint_step000012.aslw", "checkpoint_step000018.aslw",
        ]
        assert result.best_epoch == 4
        assert result.best_score == 3.0
        assert result.params.equal(load_params(tmp_path / "checkpoint_step000012.aslw"))

    def test_loss_trace_csv(self, tmp_path):
        path = write_loss_trace([(1, 0.5), (2, 0.25)], tmp_path / "loss_trace.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["epoch", "mean_loss"]
        assert frame["mean_loss"].tolist() == [0.5, 0.25]

    def test_phantom_loss_decreases(self):
        spec = DwanSpec(base_channels=4, expansion_channels=8)
        pairs = []
        for index in range(4):
            subject = generate_subject(index, NoiseModel(60.0, seed=100 + index), (32, 32))
            means = segment_means(subject)
            pairs += [(means.input1, means.ref1), (means.input2, means.ref2)]
        config = TrainConfig(loss_kind="l2", batch_size=4, epochs=50, seed=1, learning_rate=0.001)
        result = train(DwanModel(spec), build(spec, seed=0), pairs, config)
        losses = [loss for _, loss in result.loss_trace]
        assert all(loss > 0 for loss in losses)
        assert losses[-1] < losses[0]

    def test_step_frees_its_graph_without_the_cycle_collector(self, monkeypatch):
        spec = DwanSpec(base_channels=2, expansion_channels=4, blocks_per_pathway=1, global_dilations=(2,))
        params = build(spec, seed=0)
        alive = []

        class TrackedGraph(ad.Graph):
            def __init__(self):
                super().__init__()
                alive.append(weakref.ref(self))

        monkeypatch.setattr(ad, "Graph", TrackedGraph)
        rng = np.random.default_rng(4)
        inputs = rng.uniform(0, 100, (2, 1, 12, 12)).astype(np.float32)
        targets = rng.uniform(0, 100, (2, 1, 12, 12)).astype(np.float32)
        trainer = Trainer(DwanModel(spec), TrainConfig(loss_kind="l1", batch_size=2))
        state = AdamState.initial(params)
        enabled = gc.isenabled()
        gc.disable()
        try:
            for _ in range(3):
                params, state, value, grads = trainer.step(params, state, inputs, targets)
                assert np.isfinite(value)
                assert set(grads) == set(params.names())
            assert len(alive) == 3
            assert all(ref() is None for ref in alive)
        finally:
            if enabled:
                gc.enable()

    def test_batches_follow_parameter_dtype(self):
        trainer = Trainer(ConstantPredictor((3, 3)), TrainConfig())
        with precision("float64"):
            pairs = self.small_dataset(count=2)
        inputs, targets = trainer._stack(pairs, np.float32)
        assert inputs.dtype == np.float32
        assert targets.dtype == np.float32
        assert inputs.shape == (2, 1, 3, 3)

    def test_float64_parameters_train_in_float64(self):
        harness = ConstantPredictor((3, 3))
        with precision("float64"):
            start = harness.initial_params()
        dataset = self.small_dataset(count=4)
        result = train(harness, start, dataset, TrainConfig(loss_kind="l2", batch_size=2, epochs=2))
        assert result.params[ConstantPredictor.PARAM].dtype == np.float64
