"""Training loop, optimizers and the finite-difference gradient checker.

Each utterance contributes one random chunk per epoch; chunks are forwarded
one at a time (the network pools over a single utterance) and their
gradients are averaged before the optimizer step.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, make_batches
from .errors import ConfigError, DataError, TrainingError
from .model import Model, save_model
from .nn import cross_entropy, cross_entropy_backward

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd_momentum")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 5.0  # global grad norm cap, 0 disables
    batch_size: int = 32
    chunk_len: int = 150
    epochs: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer: must be one of {OPTIMIZERS}, got '{self.optimizer}'")
        if self.lr < 0:
            raise ConfigError(f"lr: must be >= 0, got {self.lr}")
        for name in ("beta1", "beta2", "momentum"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name}: must be in [0, 1), got {v}")
        if self.adam_eps <= 0:
            raise ConfigError(f"adam_eps: must be > 0, got {self.adam_eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay: must be >= 0, got {self.weight_decay}")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm: must be >= 0, got {self.clip_norm}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.chunk_len < 1:
            raise ConfigError(f"chunk_len: must be >= 1, got {self.chunk_len}")
        if self.epochs < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"train config: unknown key '{sorted(unknown)[0]}'")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


class Optimizer:
    """Adam or SGD-with-momentum over a fixed parameter list, with optional
    global gradient-norm clipping and decoupled-from-nothing plain L2 decay
    folded into the gradient."""

    def __init__(self, params, cfg: TrainConfig):
        cfg.validate()
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def global_grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            total += float(np.sum(p.grad * p.grad))
        return float(np.sqrt(total))

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        cfg = self.cfg
        if cfg.weight_decay > 0:
            for p in self.params:
                p.grad += cfg.weight_decay * p.value
        norm = self.global_grad_norm()
        if cfg.clip_norm > 0 and norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
            for p in self.params:
                p.grad *= scale
        self.t += 1
        if cfg.optimizer == "adam":
            bc1 = 1.0 - cfg.beta1**self.t
            bc2 = 1.0 - cfg.beta2**self.t
            for p, m, v in zip(self.params, self._m, self._v):
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * p.grad
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * p.grad * p.grad
                p.value -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        else:
            for p, m in zip(self.params, self._m):
                m *= cfg.momentum
                m += p.grad
                p.value -= cfg.lr * m
        return norm


def train_step(model: Model, optimizer: Optimizer, features: np.ndarray,
               labels: np.ndarray, step: int) -> float:
    """One batched forward/backward (batch norm statistics span the whole
    batch, losses and pooling stay per chunk) and one optimizer update.
    Returns the mean cross entropy over the chunks."""
    model.zero_grad()
    labels = np.asarray(labels)
    posteriors, cache = model.forward_batch(features, train=True)
    loss = float(cross_entropy(posteriors, labels))
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {step}")
    model.backward_batch(cross_entropy_backward(posteriors, labels), cache)
    for group, params in model.parameter_groups().items():
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in group '{group}' ({p.name}) at step {step}")
    optimizer.step()
    return loss


@dataclass
class TrainReport:
    step_losses: list = field(default_factory=list)
    epoch_accuracies: list = field(default_factory=list)
    checkpoint_paths: list = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.step_losses[-1] if self.step_losses else float("nan")


def classification_accuracy(model: Model, dataset: Dataset) -> float:
    """Fraction of utterances whose full-length posterior argmax matches the
    speaker label; inference mode, no chunking."""
    correct = 0
    for utt in dataset.utterances:
        trace = model.forward(utt.features, train=False)
        if int(np.argmax(trace.posteriors[0])) == dataset.label(utt):
            correct += 1
    return correct / len(dataset.utterances)


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          checkpoint_dir=None, log_path=None) -> TrainReport:
    """Run the full loop: per-epoch reshuffled chunk batches, a JSONL loss
    log, one checkpoint per epoch and a final accuracy sweep per epoch."""
    cfg.validate()
    if dataset.num_speakers != model.config.num_speakers:
        raise DataError(
            f"dataset has {dataset.num_speakers} speakers but the model "
            f"classifies {model.config.num_speakers}")
    t0 = time.perf_counter()
    report = TrainReport()
    optimizer = Optimizer(model.parameters(), cfg)
    log_file = open(log_path, "w") if log_path is not None else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            for feats, labels in make_batches(dataset, cfg.chunk_len, cfg.batch_size,
                                              seed=[cfg.seed, epoch]):
                step += 1
                loss = train_step(model, optimizer, feats, labels, step)
                report.step_losses.append(loss)
                if log_file is not None:
                    log_file.write(json.dumps(
                        {"step": step, "loss": loss, "lr": cfg.lr, "epoch": epoch}) + "\n")
            acc = classification_accuracy(model, dataset)
            report.epoch_accuracies.append(acc)
            log.info("epoch %d: loss %.4f, train accuracy %.4f",
                     epoch, report.step_losses[-1], acc)
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"epoch-{epoch + 1:03d}.xvm"
                save_model(model, path)
                report.checkpoint_paths.append(str(path))
    finally:
        if log_file is not None:
            log_file.close()
    report.wall_time_s = time.perf_counter() - t0
    return report


# -- gradient checking --------------------------------------------------------

GRADCHECK_EPS = 1e-5
GRADCHECK_THRESHOLD = 1e-4
# Central differences carry rounding noise of ulp(loss)/2eps ~ 5e-12, so for
# gradients below ~5e-8 (including the exactly-zero ones softmax shift
# invariance produces) the relative test compares noise against noise.
# Absolute disagreements under this floor, 100x the noise, count as agreement.
GRADCHECK_ATOL = 1e-9


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list
    threshold: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    @property
    def worst(self) -> str:
        if not self.entries:
            return ""
        return max(self.entries, key=lambda e: e.max_rel_err).name


def check_model_gradients(model: Model, features: np.ndarray, label: int,
                          eps: float = GRADCHECK_EPS,
                          threshold: float = GRADCHECK_THRESHOLD) -> GradCheckReport:
    """Compare the analytic gradient of the cross entropy against central
    differences for every scalar parameter. Batch-norm running statistics
    are snapshotted and restored so the check leaves the model untouched.
    """
    labels = np.array([label])
    snapshot = [array.copy() for _, array in model.state_arrays()]

    def loss() -> float:
        trace = model.forward(features, train=True)
        return cross_entropy(trace.posteriors, labels)

    model.zero_grad()
    trace = model.forward(features, train=True)
    base = cross_entropy(trace.posteriors, labels)
    if not np.isfinite(base):
        raise TrainingError("non-finite loss in gradient check")
    model.backward(cross_entropy_backward(trace.posteriors, labels))
    analytic = {p.name: p.grad.copy() for p in model.parameters()}

    entries = []
    for p in model.parameters():
        flat = p.value.reshape(-1)
        a_flat = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lo_hi = loss()
            flat[i] = orig - eps
            lo_lo = loss()
            flat[i] = orig
            numeric = (lo_hi - lo_lo) / (2.0 * eps)
            a_i = float(a_flat[i])
            if abs(a_i - numeric) < GRADCHECK_ATOL:
                continue
            worst = max(worst, relative_error(a_i, numeric))
        entries.append(GradCheckEntry(p.name, worst, flat.size))

    for (_, array), saved in zip(model.state_arrays(), snapshot):
        array[...] = saved
    return GradCheckReport(entries, threshold)
