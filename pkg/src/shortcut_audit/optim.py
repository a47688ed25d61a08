"""Adam and the fixed-budget training loop."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .cropper import to_probe_input
from .data import LabeledDataset, decode_image
from .errors import ConfigError, DegenerateDataset, LengthMismatch, NonFiniteGradient, NonFiniteLoss
from .metrics import ConfusionMatrix
from .probe import ProbeConfig, ProbeParameters, forward, init_params, loss_and_grad, predict
from .sampling import DatasetSplit, SeededRng, batch_slices, epoch_permutation

# constant inputs (std 0) are left unscaled
STD_FLOOR = 1e-3

Loader = Callable[[LabeledDataset], np.ndarray]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int, dtype=np.float32, **hyper) -> "AdamState":
        return cls(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype), 0, **hyper)


def adam_step(
    params: ProbeParameters, grad: np.ndarray, state: AdamState, lr: float
) -> tuple[ProbeParameters, AdamState]:
    if grad.shape != params.vector.shape or state.m.shape != params.vector.shape:
        raise LengthMismatch(f"gradient length {grad.size} != parameter length {params.vector.size}")
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"{int((~np.isfinite(grad)).sum())} non-finite gradient entries")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    theta = params.vector - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    dtype = params.vector.dtype
    new_state = AdamState(m.astype(dtype, copy=False), v.astype(dtype, copy=False), t, b1, b2, state.epsilon)
    return params.with_vector(theta.astype(dtype, copy=False)), new_state


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    eval_each_epoch: bool = True
    seed: int = 42
    standardize: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float | None = None
    val_loss: float | None = None


@dataclass
class LearningCurve:
    records: list[EpochRecord] = field(default_factory=list)
    steps: int = 0

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.records]


def decode_loader(dataset: LabeledDataset) -> np.ndarray:
    """Decode every image of ``dataset`` into a (N, 3, H, W) float32 array."""
    return np.stack([to_probe_input(decode_image(it.source)).data for it in dataset.items]).astype(np.float32)


def channel_stats(x: np.ndarray, floor: float = STD_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over (N, H, W), std floored."""
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(0, 2, 3))
    std = x64.std(axis=(0, 2, 3))
    return mean, np.maximum(std, floor)


def mean_loss(params: ProbeParameters, x: np.ndarray, y: np.ndarray) -> float:
    logits = forward(params, x).logits.astype(np.float64)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(y)), y]))


def train(
    config: TrainConfig,
    probe_config: ProbeConfig,
    split: DatasetSplit,
    *,
    load: Loader = decode_loader,
    rng: SeededRng | None = None,
    dtype=np.float32,
) -> tuple[ProbeParameters, LearningCurve]:
    """Train a fresh probe on ``split.train`` for exactly ``config.epochs`` epochs.

    Validation is observational; the final-epoch parameters are returned.
    ``rng`` defaults to a stream seeded by ``config.seed``.
    """
    if split.train.is_degenerate:
        raise DegenerateDataset(f"{split.train.name}: training set needs both classes")
    rng = rng or SeededRng(config.seed)
    x_train = load(split.train).astype(dtype, copy=False)
    y_train = split.train.labels
    val = None
    if config.eval_each_epoch and len(split.val):
        val = (load(split.val).astype(dtype, copy=False), split.val.labels)

    params = init_params(probe_config, rng.child("init"), dtype)
    if config.standardize:
        params.input_mean, params.input_std = channel_stats(x_train)
    state = AdamState.zeros(len(params), dtype)
    batch_rng = rng.child("batches")
    curve = LearningCurve()
    n = len(y_train)
    for epoch in range(config.epochs):
        perm = epoch_permutation(n, batch_rng, epoch)
        total = 0.0
        for s in batch_slices(n, config.batch_size):
            idx = perm[s]
            loss, grad = loss_and_grad(params, x_train[idx], y_train[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch}, step {state.t + 1}")
            params, state = adam_step(params, grad, state, config.learning_rate)
            total += loss * len(idx)
        record = EpochRecord(epoch, total / n)
        if val is not None:
            record.val_accuracy = float(np.mean(predict(params, val[0]) == val[1]))
            record.val_loss = mean_loss(params, *val)
        curve.records.append(record)
    curve.steps = state.t
    return params, curve


def evaluate(params: ProbeParameters, dataset: LabeledDataset, *, load: Loader = decode_loader) -> ConfusionMatrix:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(params, load(dataset))
    return ConfusionMatrix.from_predictions(dataset.labels, preds)
