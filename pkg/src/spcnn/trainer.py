"""Mini-batch SGD with momentum and weight decay."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nnkernels as nn
from . import spnet
from .data import DatasetManifest, load_image
from .errors import ConfigurationError, DataError, NumericError
from .pyramid import preprocess

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 256
    iterations: int = 32000
    seed: int = 0
    snapshot_interval: int = 0
    lr_schedule: str = "fixed"
    gamma: float = 0.1
    step_size: int = 10000
    decay_biases: bool = True
    eval_interval: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be >= 0, got {self.iterations}")
        if self.lr_schedule not in ("fixed", "step"):
            raise ConfigurationError(f"lr_schedule must be 'fixed' or 'step', got {self.lr_schedule!r}")
        if self.lr_schedule == "step" and self.step_size < 1:
            raise ConfigurationError("step schedule needs step_size >= 1")

    def learning_rate(self, iteration: int) -> float:
        if self.lr_schedule == "step":
            return self.alpha * self.gamma ** (iteration // self.step_size)
        return self.alpha


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    iteration: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()})


def sgd_step(params: dict, grads: dict, opt: OptimizerState, cfg: TrainConfig,
             lr: Optional[float] = None) -> None:
    """In-place update ``v <- m*v - lr*(g + wd*w); w <- w + v``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")
    lr = cfg.learning_rate(opt.iteration) if lr is None else lr
    for name, w in params.items():
        g = grads[name]
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(w)
        if v.shape != w.shape or g.shape != w.shape:
            raise ConfigurationError(
                f"{name}: param {w.shape}, grad {g.shape}, velocity {v.shape} disagree")
        dt = w.dtype.type
        wd = cfg.weight_decay if (cfg.decay_biases or not name.endswith(".b")) else 0.0
        v *= dt(cfg.momentum)
        v -= dt(lr) * (g + dt(wd) * w)
        w += v
    opt.iteration += 1


def make_batches(n_entries: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Sample indices for ``iteration`` (0-based).

    Each epoch is a fresh permutation seeded by ``(seed, epoch)``; batches
    are consecutive slices and the last one of an epoch may be short.
    """
    if n_entries < 1:
        raise ConfigurationError("cannot batch an empty training set")
    per_epoch = math.ceil(n_entries / batch_size)
    epoch, pos = divmod(iteration, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n_entries)
    return perm[pos * batch_size:(pos + 1) * batch_size]


class PreparedSplit:
    """Entries of one manifest role, preprocessed lazily into stream tensors."""

    def __init__(self, manifest: DatasetManifest, role: str, spec: spnet.NetworkSpec,
                 mean_image: np.ndarray, loader=load_image, images_only: bool = False):
        self.entries = manifest.select(role)
        if images_only:
            videos = [e.path for e in self.entries if e.kind != "image"]
            if videos:
                raise DataError(f"{role} split contains video entries: {videos[0]}")
        self.manifest = manifest
        self.spec = spec
        self.mean_image = mean_image
        self.loader = loader
        self._cache = {}
        self.labels = np.array([e.label for e in self.entries], dtype=np.int64)

    def __len__(self):
        return len(self.entries)

    def regions(self, i: int) -> list[np.ndarray]:
        if i not in self._cache:
            img = self.loader(self.manifest.resolve(self.entries[i]))
            self._cache[i] = preprocess(img, self.mean_image, self.spec.pyramid_levels,
                                        self.spec.input_scale)
        return self._cache[i]

    def batch(self, indices) -> tuple[list[np.ndarray], np.ndarray]:
        per_sample = [self.regions(int(i)) for i in indices]
        streams = [np.stack(parts) for parts in zip(*per_sample)]
        return streams, self.labels[np.asarray(indices, dtype=np.int64)]


def batch_accuracy(state, spec, split: PreparedSplit, chunk: int = 64) -> float:
    correct = 0
    for start in range(0, len(split), chunk):
        idx = np.arange(start, min(start + chunk, len(split)))
        x, y = split.batch(idx)
        logits, _ = spnet.forward(state, spec, x, training=False)
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / len(split)


@dataclass
class TrainResult:
    checkpoint: spnet.Checkpoint
    losses: list
    accuracies: list  # (iteration, train accuracy)


def train(spec: spnet.NetworkSpec, state: spnet.NetworkState, split: PreparedSplit,
          cfg: TrainConfig, callbacks: Optional[list[Callable]] = None,
          out_dir=None, class_names: tuple = (),
          opt: Optional[OptimizerState] = None) -> TrainResult:
    """Run ``cfg.iterations`` SGD steps on ``split``.

    ``state`` is updated in place. With ``out_dir`` set, writes
    ``metrics.log`` (``iter <n> loss <f> lr <f>``), ``accuracy.log`` and
    snapshots every ``cfg.snapshot_interval`` iterations. Callbacks receive
    ``(iteration, loss, lr)`` after each step.
    """
    if any(e.kind != "image" for e in split.entries):
        raise DataError("training split must contain images only")
    if cfg.iterations and not len(split):
        raise ConfigurationError("training split is empty")
    opt = opt or OptimizerState.zeros_like(state.params)
    callbacks = callbacks or []

    def snapshot():
        return spnet.Checkpoint(
            spec, state.copy(), {k: v.copy() for k, v in opt.velocity.items()},
            opt.iteration, split.mean_image, tuple(class_names))

    metrics = accs = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics = open(os.path.join(out_dir, "metrics.log"), "w")
        accs = open(os.path.join(out_dir, "accuracy.log"), "w")
    losses, accuracies = [], []
    last_good = snapshot()
    try:
        for _ in range(cfg.iterations):
            it = opt.iteration
            lr = cfg.learning_rate(it)
            x, y = split.batch(make_batches(len(split), cfg.batch_size, cfg.seed, it))
            rng = np.random.default_rng([cfg.seed, it, 1])
            logits, cache = spnet.forward(state, spec, x, training=True, rng=rng)
            loss, grad = nn.softmax_xent(logits, y)
            if not math.isfinite(loss):
                if out_dir is not None:
                    spnet.save_checkpoint(os.path.join(out_dir, "last_good.spcn"), last_good)
                raise NumericError(
                    f"non-finite loss at iteration {it + 1}", last_good=last_good)
            grads = spnet.backward(state, spec, cache, grad)
            try:
                sgd_step(state.params, grads, opt, cfg, lr)
            except NumericError as exc:
                raise NumericError(f"iteration {it + 1}: {exc}", last_good=last_good) from None
            state.version += 1
            losses.append(loss)
            n = opt.iteration
            if metrics:
                metrics.write(f"iter {n} loss {loss:.6f} lr {lr:.6g}\n")
            for cb in callbacks:
                cb(n, loss, lr)
            if cfg.eval_interval and (n % cfg.eval_interval == 0 or n == cfg.iterations):
                acc = batch_accuracy(state, spec, split)
                accuracies.append((n, acc))
                log.info("iter %d train accuracy %.4f", n, acc)
                if accs:
                    accs.write(f"iter {n} train_accuracy {acc:.6f}\n")
            if cfg.snapshot_interval and n % cfg.snapshot_interval == 0:
                last_good = snapshot()
                if out_dir is not None:
                    spnet.save_checkpoint(
                        os.path.join(out_dir, f"snapshot_iter{n}.spcn"), last_good)
    finally:
        if metrics:
            metrics.close()
            accs.close()
    return TrainResult(snapshot(), losses, accuracies)
