"""Stage-1 training: compressor + BSQ + decompressor reconstruct encoder features."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import bsq
from . import numerics as nx
from .codec import compress, decompress, encode
from .errors import ConfigError, ShapeError, TrainingDivergedError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.8
    beta2: float = 0.99
    weight_decay: float = 0.01
    eps: float = 1e-8
    grad_clip_l2: float = 5.0
    lr_decay_factor: float = 0.9
    plateau_margin: float = 0.0025
    plateau_patience: int = 3
    recon_weight: float = 1.0
    entropy_weight: float = 0.1
    batch: int = 4
    steps: int = 200
    eval_every: int = None  # default: one pass over the training set
    early_stop_patience: int = None
    seed: int = 0

    def __post_init__(self):
        positive = ("lr", "beta1", "beta2", "eps", "grad_clip_l2", "lr_decay_factor",
                    "batch", "steps", "plateau_patience")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.entropy_weight < 0 or self.recon_weight < 0:
            raise ConfigError("loss weights and weight decay must be >= 0")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ConfigError("betas must be < 1")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SyntheticFeatureSpec:
    n_utterances: int = 16
    frames: int = 40
    n_clusters: int = 8
    noise_std: float = 0.5
    dim: int = 1024
    mean_dwell: float = 4.0
    seed: int = 0


def generate_synthetic_features(spec):
    """Utterances that walk between ``n_clusters`` random centres in ``R^dim``.

    Each utterance is a run of segments; a segment picks a centre uniformly and
    stays on it for a geometric number of frames (mean ``mean_dwell``).
    """
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(size=(spec.n_clusters, spec.dim))
    data = []
    for _ in range(spec.n_utterances):
        labels = []
        while len(labels) < spec.frames:
            labels.extend([rng.integers(spec.n_clusters)] * int(rng.geometric(1.0 / spec.mean_dwell)))
        labels = np.asarray(labels[:spec.frames])
        frames = centers[labels] + spec.noise_std * rng.normal(size=(spec.frames, spec.dim))
        data.append(frames.astype(np.float32))
    return data


def stage1_loss(features, model, config=None):
    """``(total, recon, entropy)`` for one utterance; all three are scalar Tensors.

    ``recon`` is the mean squared error between decompressed and input
    features (padding frames excluded), ``entropy`` the BSQ entropy penalty on
    the pre-quantisation latents.
    """
    config = config or TrainConfig()
    x = nx.tensor(features)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"stage1_loss needs [T >= 1, D] features, got {x.shape}", dim="T",
                         actual=x.shape[0] if x.ndim else None)
    latents = compress(model, x)
    u = bsq.project_to_sphere(latents, eps=bsq.TRAIN_NORM_EPS)
    entropy = bsq.entropy_loss(u, temperature=model.config.temperature)
    recon_full = decompress(model, bsq.binarize_ste(u))
    diff = recon_full[:x.shape[0]] - x
    recon = nx.mean(diff * diff)
    total = recon * config.recon_weight + entropy * config.entropy_weight
    return total, recon, entropy


class AdamW:
    """Adam with decoupled weight decay, operating in place on Tensor ``.data``."""

    def __init__(self, params, lr, betas, eps, weight_decay):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            theta = p.data.astype(np.float64)
            g = np.zeros_like(theta) if p.grad is None else p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            theta = theta - self.lr * self.weight_decay * theta - self.lr * update
            p.data = theta.astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def global_grad_norm(params):
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                         for p in params if p.grad is not None))


def clip_grad_norm(params, max_norm):
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad.astype(np.float64) * scale).astype(p.dtype)
    return norm


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` evaluations without
    a relative improvement larger than ``margin``."""

    def __init__(self, optimizer, factor, margin, patience):
        self.optimizer = optimizer
        self.factor = factor
        self.margin = margin
        self.patience = patience
        self.best = math.inf
        self.bad_evals = 0
        self.since_best = 0

    def step(self, val_loss):
        if val_loss < self.best - self.margin * abs(self.best) or self.best == math.inf:
            self.best = val_loss
            self.bad_evals = 0
            self.since_best = 0
            return
        self.bad_evals += 1
        self.since_best += 1
        if self.bad_evals >= self.patience:
            self.optimizer.lr *= self.factor
            self.bad_evals = 0


def evaluate(dataset, model, config):
    with nx.no_grad():
        totals = [stage1_loss(x, model, config)[0].item() for x in dataset]
    return float(np.mean(totals))


def train_stage1(dataset, model, config=None, validation=None, callback=None):
    """Jointly train compressor and decompressor on feature utterances.

    Each step averages the loss of ``config.batch`` whole utterances drawn
    without replacement from a seeded shuffle.  Returns ``(model, history)``;
    ``history`` holds one dict per step.
    """
    config = config or TrainConfig()
    dataset = [np.asarray(x, dtype=np.float32) for x in dataset]
    if not dataset:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = AdamW(params, config.lr, (config.beta1, config.beta2), config.eps, config.weight_decay)
    sched = PlateauScheduler(opt, config.lr_decay_factor, config.plateau_margin,
                             config.plateau_patience)
    batch = min(config.batch, len(dataset))
    eval_every = config.eval_every or max(1, len(dataset) // batch)
    val_set = validation if validation is not None else dataset

    history = []
    order = []
    for step in range(1, config.steps + 1):
        if len(order) < batch:
            order.extend(rng.permutation(len(dataset)).tolist())
        picked, order = order[:batch], order[batch:]

        opt.zero_grad()
        total = recon = ent = None
        for i in picked:
            t, r, e = stage1_loss(dataset[i], model, config)
            total = t if total is None else total + t
            recon = r.item() if recon is None else recon + r.item()
            ent = e.item() if ent is None else ent + e.item()
        total = total * (1.0 / batch)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"loss became non-finite at step {step} (recon={recon / batch}, "
                f"entropy={ent / batch}, lr={opt.lr})")
        nx.backward(total)
        grad_norm = clip_grad_norm(params, config.grad_clip_l2)
        opt.step()
        record = {"step": step, "total": value, "recon": recon / batch,
                  "entropy": ent / batch, "lr": opt.lr, "grad_norm": grad_norm}

        if step % eval_every == 0:
            val = evaluate(val_set, model, config)
            sched.step(val)
            record["val"] = val
            log.debug("step %d val %.5f lr %.3g", step, val, opt.lr)
            if config.early_stop_patience is not None and \
                    sched.since_best >= config.early_stop_patience:
                history.append(record)
                break
        history.append(record)
        if callback is not None:
            callback(record)
    return model, history


def encode_dataset(dataset, model):
    """Token indices of every utterance, concatenated."""
    return np.concatenate([encode(x, model) for x in dataset])

