"""
Learning-from-Noise Trainer
===========================

Losses, ADAM and the mini-batch training loop. Under L2 the regressor is
driven to the mean of its (noisy) references, under L1 to their median, so a
network trained on pairs of independent noisy segment means learns the same
denoiser as one trained on a clean reference.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import autodiff as ad
from .exceptions import (
    GradientError,
    InvalidArgumentError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .network import NetworkParameters, register_parameters, save_params
from .tensor import Tensor, default_dtype
from .utils import derive_seed

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Pair = Tuple[Tensor, Tensor]


class LossKind(str, Enum):
    L1 = "l1"
    L2 = "l2"


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_loss_shapes(op: str, pred: ad.Node, target: ad.Node) -> None:
    if pred.shape != target.shape:
        raise ShapeMismatchError(op, pred.shape, target.shape)


def loss_l2(pred: ad.Node, target: ad.Node) -> ad.Node:
    """(1/N) sum (pred - target)^2 over every element of the batch."""
    _check_loss_shapes("loss_l2", pred, target)
    diff = pred.value.numpy() - target.value.numpy()
    value = np.asarray(np.mean(diff * diff), dtype=pred.value.dtype)
    return pred.graph.record("loss_l2", (pred, target), value)


@ad.register_backward("loss_l2")
def _loss_l2_backward(node: ad.Node, upstream: np.ndarray):
    pred, target = node.inputs
    diff = pred.value.numpy() - target.value.numpy()
    grad = (2.0 / diff.size) * diff * upstream.reshape(())
    return grad, -grad


def loss_l1(pred: ad.Node, target: ad.Node) -> ad.Node:
    """(1/N) sum |pred - target|; gradient sign(diff)/N with sign(0) = 0."""
    _check_loss_shapes("loss_l1", pred, target)
    diff = pred.value.numpy() - target.value.numpy()
    value = np.asarray(np.mean(np.abs(diff)), dtype=pred.value.dtype)
    return pred.graph.record("loss_l1", (pred, target), value)


@ad.register_backward("loss_l1")
def _loss_l1_backward(node: ad.Node, upstream: np.ndarray):
    pred, target = node.inputs
    diff = pred.value.numpy() - target.value.numpy()
    grad = (np.sign(diff) / diff.size) * upstream.reshape(())
    return grad.astype(diff.dtype), -grad.astype(diff.dtype)


LOSSES: Dict[LossKind, Callable[[ad.Node, ad.Node], ad.Node]] = {
    LossKind.L1: loss_l1,
    LossKind.L2: loss_l2,
}


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initial(cls, params: NetworkParameters, lr: float = 0.001) -> "AdamState":
        state = cls(lr=lr)
        for name, tensor in params:
            state.m[name] = np.zeros(tensor.shape, dtype=tensor.dtype)
            state.v[name] = np.zeros(tensor.shape, dtype=tensor.dtype)
        return state


def adam_step(params: NetworkParameters, grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[NetworkParameters, AdamState]:
    """
    One bias-corrected ADAM update.

    m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2 ; theta <- theta - lr m_hat / (sqrt(v_hat) + eps)
    """
    missing = [name for name in params.names() if name not in grads]
    if missing:
        raise GradientError(f"adam_step: no gradient for {missing}")

    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    updated = {}
    m_next, v_next = {}, {}
    for name, tensor in params:
        g = np.asarray(grads[name], dtype=tensor.dtype)
        if g.shape != tensor.shape:
            raise ShapeMismatchError("adam_step", tensor.shape, g.shape, name)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        updated[name] = Tensor(tensor.numpy() - step, dtype=tensor.dtype)
        m_next[name] = m.astype(tensor.dtype, copy=False)
        v_next[name] = v.astype(tensor.dtype, copy=False)

    new_state = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
                          t=t, m=m_next, v=v_next)
    return params.replace(updated), new_state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    loss_kind: LossKind = LossKind.L1
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    shuffle: bool = True
    checkpoint_every: int = 0
    learning_rate: float = 0.001

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind)
        if self.batch_size < 1:
            raise InvalidArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise InvalidArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.checkpoint_every < 0:
            raise InvalidArgumentError("checkpoint_every must be >= 0")
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be positive")


@dataclass
class TrainResult:
    params: NetworkParameters
    loss_trace: List[Tuple[int, float]]
    steps: int
    best_epoch: int
    best_score: Optional[float] = None
    checkpoints: List[Path] = field(default_factory=list)


class ConstantPredictor:
    """Test harness: the 'network' is one learnable image tiled over the batch."""

    PARAM = "bias.image"

    def __init__(self, shape: Tuple[int, int]):
        self.shape = tuple(shape)

    def initial_params(self) -> NetworkParameters:
        return NetworkParameters([(self.PARAM, Tensor.zeros((1, 1) + self.shape))])

    def graph_forward(self, graph: ad.Graph, pnodes: Dict[str, ad.Node], x: ad.Node) -> ad.Node:
        return ad.tile_batch(pnodes[self.PARAM], x.shape[0])


def _as_batch_item(tensor: Tensor) -> np.ndarray:
    array = np.asarray(tensor.numpy())
    if array.ndim == 2:
        return array[None]
    if array.ndim == 3 and array.shape[0] == 1:
        return array
    raise ShapeMismatchError("train", "[H,W] or [1,H,W] slices", array.shape)


class Trainer:
    """
    Mini-batch ADAM training of a graph model on (input, reference) pairs.
    """

    def __init__(self, model, config: TrainConfig, checkpoint_dir: Optional[PathLike] = None,
                 validate: Optional[Callable[[NetworkParameters], float]] = None,
                 progress: bool = False):
        self.model = model
        self.config = config
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.validate = validate
        self.progress = progress
        self.loss_fn = LOSSES[config.loss_kind]

    def _stack(self, dataset: Sequence[Pair], dtype) -> Tuple[np.ndarray, np.ndarray]:
        """Batches in the parameters' dtype."""
        if not dataset:
            raise InvalidArgumentError("training dataset is empty")
        inputs = [_as_batch_item(pair[0]) for pair in dataset]
        targets = [_as_batch_item(pair[1]) for pair in dataset]
        shapes = {item.shape for item in inputs + targets}
        if len(shapes) != 1:
            raise ShapeMismatchError("train", "one slice shape for every pair", sorted(shapes))
        return np.stack(inputs).astype(dtype), np.stack(targets).astype(dtype)

    def _order(self, epoch: int, count: int) -> np.ndarray:
        if not self.config.shuffle:
            return np.arange(count)
        rng = np.random.default_rng(derive_seed(self.config.seed, f"epoch-{epoch}"))
        return rng.permutation(count)

    def step(self, params: NetworkParameters, state: AdamState,
             inputs: np.ndarray, targets: np.ndarray) -> Tuple[NetworkParameters, AdamState, float, Dict]:
        """forward -> loss -> backward -> adam_step on one batch."""
        graph = ad.Graph()
        pnodes = register_parameters(graph, params)
        x = graph.constant(Tensor(inputs, dtype=inputs.dtype), name="input")
        y = graph.constant(Tensor(targets, dtype=targets.dtype), name="reference")
        loss = self.loss_fn(self.model.graph_forward(graph, pnodes, x), y)
        value = float(loss.value.item())
        if not math.isfinite(value):
            return params, state, value, {}
        ad.backward(graph, loss)
        grads = graph.parameter_grads()
        new_params, new_state = adam_step(params, grads, state)
        return new_params, new_state, value, grads

    def _checkpoint(self, params: NetworkParameters, steps: int) -> Optional[Path]:
        if self.checkpoint_dir is None:
            return None
        path = self.checkpoint_dir / f"checkpoint_step{steps:06d}.aslw"
        save_params(params, path)
        logger.info(f"💾 Saved checkpoint {path.name}")
        return path

    def fit(self, params: NetworkParameters, dataset: Sequence[Pair]) -> TrainResult:
        dtype = next(iter(params))[1].dtype if len(params) else default_dtype()
        inputs, targets = self._stack(dataset, dtype)
        count = len(inputs)
        config = self.config
        state = AdamState.initial(params, lr=config.learning_rate)
        trace: List[Tuple[int, float]] = []
        checkpoints: List[Path] = []
        steps = 0
        best = (None, 0, params)  # (score, epoch, params)

        logger.info(
            f"🎯 Training on {count} pairs: loss={config.loss_kind.value}, batch={config.batch_size}, "
            f"epochs={config.epochs}, lr={config.learning_rate}"
        )
        epochs = range(1, config.epochs + 1)
        for epoch in tqdm(epochs, desc="Training", disable=not self.progress):
            order = self._order(epoch, count)
            total = 0.0
            for start in range(0, count, config.batch_size):
                batch = order[start:start + config.batch_size]
                last_good = params
                params, state, value, grads = self.step(params, state, inputs[batch], targets[batch])
                steps += 1
                bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
                if not math.isfinite(value) or bad:
                    logger.error(f"❌ Non-finite loss/gradient at epoch {epoch}, step {steps}")
                    raise TrainingDivergedError(epoch, steps, value, last_good, bad)
                total += value * len(batch)
            mean_loss = total / count
            trace.append((epoch, mean_loss))
            logger.info(f"Epoch {epoch}/{config.epochs}: mean loss {mean_loss:.6f}")

            is_checkpoint = config.checkpoint_every and epoch % config.checkpoint_every == 0
            if is_checkpoint:
                path = self._checkpoint(params, steps)
                if path:
                    checkpoints.append(path)
            if self.validate is not None and (is_checkpoint or epoch == config.epochs):
                score = float(self.validate(params))
                logger.info(f"Validation score at epoch {epoch}: {score:.4f}")
                if best[0] is None or score > best[0]:
                    best = (score, epoch, params)

        if self.validate is not None:
            score, best_epoch, chosen = best
            logger.info(f"🏆 Selected epoch {best_epoch} (validation {score:.4f})")
        else:
            score, best_epoch, chosen = None, config.epochs, params
        return TrainResult(chosen, trace, steps, best_epoch, score, checkpoints)


def train(model, params: NetworkParameters, dataset: Sequence[Pair], config: TrainConfig,
          checkpoint_dir: Optional[PathLike] = None,
          validate: Optional[Callable[[NetworkParameters], float]] = None,
          progress: bool = False) -> TrainResult:
    """Train ``model`` starting from ``params``; deterministic given config.seed."""
    trainer = Trainer(model, config, checkpoint_dir=checkpoint_dir, validate=validate, progress=progress)
    return trainer.fit(params, dataset)


def write_loss_trace(trace: Sequence[Tuple[int, float]], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(trace), columns=["epoch", "mean_loss"])
    frame.to_csv(path, index=False, float_format="%.8g")
    return path
