"""Label binarization, stratified splits, class-balanced sampling, Adam + one-cycle, training loop."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore
from .evaluation import balanced_accuracy, confusion_matrix
from .features import assemble
from .graph import Partition, SkeletonGraph
from .ingest import DEFAULT_WINDOW, SEGMENT_LENGTH, IngestError, ManifestRow, load_clean, read_manifest
from .model import ModelConfig, cross_entropy, forward, init_params, one_hot

log = logging.getLogger(__name__)

INDEPENDENT_SCORE = 7


class NumericalError(ArithmeticError):
    pass


class NonFiniteGradient(NumericalError):
    pass


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, last_good: ParameterStore, history: list[dict]):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_lr: float = 0.01
    epochs: int = 100
    seed: int = 0
    warmup_fraction: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LabelSpec:
    fim_item: str
    num_classes: int = 2

    def label(self, fim_score: int) -> int:
        """Score 7 (complete independence) -> class 1, scores 1-6 -> class 0."""
        if not 1 <= fim_score <= 7:
            raise ValueError(f"FIM score {fim_score} outside 1..7")
        return int(fim_score == INDEPENDENT_SCORE)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(labels: Sequence[int], train_fraction: float = 0.8,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per class, hold out round-half-up((1 - train_fraction) * n) samples for testing.

    Returns sorted (train_indices, test_indices).
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.size < 2:
            raise ValueError(f"class {cls} has {members.size} sample(s); need at least 2")
        n_test = _round_half_up((1 - train_fraction) * members.size)
        n_test = min(max(n_test, 1), members.size - 1)
        chosen = rng.choice(members, size=n_test, replace=False)
        test.extend(chosen)
        train.extend(np.setdiff1d(members, chosen))
    if np.unique(labels).size < 2:
        raise ValueError("stratified split needs at least two classes")
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


class WeightedSampler:
    """Draws indices with replacement, each weighted by 1 / (its class frequency)."""

    def __init__(self, labels: Sequence[int], seed: int | np.random.SeedSequence = 0):
        labels = np.asarray(labels)
        classes, counts = np.unique(labels, return_counts=True)
        if classes.size < 2:
            raise ValueError("weighted sampling needs at least two classes in the training set")
        freq = dict(zip(classes, counts))
        w = np.array([1.0 / freq[c] for c in labels])
        self.weights = w / w.sum()
        self.rng = np.random.default_rng(seed)

    def draw(self, count: int) -> np.ndarray:
        return self.rng.choice(self.weights.size, size=count, replace=True, p=self.weights)


def weighted_sampler(labels: Sequence[int], seed: int = 0, num_draws: int | None = None) -> np.ndarray:
    """One epoch of class-balanced indices (``len(labels)`` draws unless given)."""
    sampler = WeightedSampler(labels, seed)
    return sampler.draw(len(labels) if num_draws is None else num_draws)


def one_cycle_lr(step: int, total_steps: int, config: TrainConfig) -> float:
    """Cosine ramp from max_lr/div_factor up to max_lr, then cosine anneal to max_lr/final_div_factor."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    initial = config.max_lr / config.div_factor
    final = config.max_lr / config.final_div_factor
    peak = _round_half_up(config.warmup_fraction * (total_steps - 1))
    if step <= peak:
        if peak == 0:
            return config.max_lr
        pct = step / peak
        return initial + (config.max_lr - initial) * (1 - math.cos(math.pi * pct)) / 2
    pct = (step - peak) / (total_steps - 1 - peak)
    return final + (config.max_lr - final) * (1 + math.cos(math.pi * pct)) / 2


class Adam:
    def __init__(self, params: ParameterStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    @classmethod
    def from_config(cls, params: ParameterStore, config: TrainConfig) -> "Adam":
        return cls(params, config.beta1, config.beta2, config.eps)

    def step(self, params: ParameterStore, lr: float):
        grads = params.grads()
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise NonFiniteGradient(f"gradient of {name} has {bad} non-finite entries")
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


def predict_proba(X: np.ndarray, params: ParameterStore, config: ModelConfig, partition: Partition,
                  batch_size: int = 64) -> np.ndarray:
    out = [forward(X[i:i + batch_size], params, config, partition).probs.value
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, config.num_classes))


def evaluate_balanced_accuracy(X, y, params, config, partition) -> float:
    pred = predict_proba(X, params, config, partition).argmax(axis=1)
    return balanced_accuracy(confusion_matrix(y, pred, config.num_classes))


def train_loop(X_train: np.ndarray, y_train: np.ndarray, model_config: ModelConfig,
               train_config: TrainConfig, partition: Partition,
               X_test: np.ndarray | None = None, y_test: np.ndarray | None = None,
               params: ParameterStore | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> tuple[ParameterStore, list[dict]]:
    """Mini-batch Adam on class-balanced batches with a one-cycle schedule.

    Returns the trained parameters and one history record per epoch.
    """
    init_seed, sampler_seed = np.random.SeedSequence(train_config.seed).spawn(2)
    J = X_train.shape[3]
    if params is None:
        params = init_params(model_config, J, seed=init_seed)
    X_train = np.asarray(X_train, dtype=np.float32)
    y_train = np.asarray(y_train)
    sampler = WeightedSampler(y_train, sampler_seed)
    optimizer = Adam.from_config(params, train_config)
    n = len(y_train)
    steps_per_epoch = -(-n // train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch
    history: list[dict] = []
    step = 0
    for epoch in range(1, train_config.epochs + 1):
        last_good = params.copy()
        order = sampler.draw(n)
        losses = []
        lr = 0.0
        for start in range(0, n, train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            lr = one_cycle_lr(step, total_steps, train_config)
            params.zero_grad()
            with ad.Tape() as tape:
                probs = forward(X_train[idx], params, model_config, partition).probs
                loss = cross_entropy(probs, one_hot(y_train[idx], model_config.num_classes))
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", last_good, history)
            tape.backward(loss)
            try:
                optimizer.step(params, lr)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), last_good, history) from exc
            losses.append(value * len(idx))
            step += 1
        record = {
            "epoch": epoch,
            "mean_loss": float(np.sum(losses) / n),
            "lr_last": lr,
            "test_balanced_accuracy": (
                evaluate_balanced_accuracy(X_test, y_test, params, model_config, partition)
                if X_test is not None and len(X_test) else None
            ),
        }
        history.append(record)
        log.info("epoch %d loss %.4f test BA %s", epoch, record["mean_loss"], record["test_balanced_accuracy"])
        if on_epoch is not None:
            on_epoch(record)
    return params, history


# -- datasets ----------------------------------------------------------------

@dataclass
class Dataset:
    X: np.ndarray  # [N, 9, T, J] float32
    labels: np.ndarray
    rows: list[ManifestRow]


def select_rows(rows: Sequence[ManifestRow], fim_item: str | None = None,
                action: str | None = None) -> list[ManifestRow]:
    out = [r for r in rows if (fim_item is None or r.fim_item == fim_item)
           and (action is None or r.action == action)]
    if not out:
        raise IngestError(f"no manifest rows for fim_item={fim_item!r}, action={action!r}")
    return out


def featurize(path: Path, graph: SkeletonGraph, window: int = DEFAULT_WINDOW,
              length: int = SEGMENT_LENGTH) -> np.ndarray:
    return assemble(load_clean(path, window, length), graph).astype(np.float32)


def load_dataset(manifest: str | Path, graph: SkeletonGraph, fim_item: str | None = None,
                 action: str | None = None, threads: int = 1, window: int = DEFAULT_WINDOW,
                 length: int = SEGMENT_LENGTH) -> Dataset:
    rows = select_rows(read_manifest(manifest), fim_item, action)
    spec = LabelSpec(fim_item or "")
    labels = np.array([spec.label(r.fim_score) for r in rows])
    work = lambda r: featurize(r.sequence_path, graph, window, length)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            X = list(pool.map(work, rows))
    else:
        X = [work(r) for r in rows]
    return Dataset(np.stack(X), labels, rows)
