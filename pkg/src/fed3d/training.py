"""Mini-batch training loop, optimizers and evaluation shared by every mode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fed3d import tensor as tn
from fed3d.correction import StatsAccumulator, grad_measure, sample_weights, weighted_loss
from fed3d.detector import ModelSplit, detector_forward, point_features
from fed3d.tensor import Parameter


class SGD:
    """Plain gradient step per parameter group."""

    def __init__(self, groups: list[tuple[list[Parameter], float]]):
        self.groups = [(list(ps), lr) for ps, lr in groups]

    def step(self) -> None:
        for params, lr in self.groups:
            for p in params:
                if p.trainable:
                    p.data -= lr * p.grad


class AdamW:
    """Adam with decoupled weight decay; state lives for one local session."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.groups = [(list(ps), lr) for ps, lr in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for params, lr in self.groups:
            for p in params:
                if not p.trainable:
                    continue
                m = self.m.setdefault(id(p), np.zeros_like(p.data))
                v = self.v.setdefault(id(p), np.zeros_like(p.data))
                m *= self.b1
                m += (1 - self.b1) * p.grad
                v *= self.b2
                v += (1 - self.b2) * p.grad * p.grad
                p.data -= lr * (self.wd * p.data + (m / c1) / (np.sqrt(v / c2) + self.eps))


def param_groups(split: ModelSplit, lr_encoder: float, lr_head: float):
    """Encoder-side parameters (prompts, unfrozen backbone) and everything else."""
    encoder_side = split.prompt_params() + [p for p in split.backbone_params() if p.trainable]
    return [(encoder_side, lr_encoder), (split.head_params(), lr_head)]


def make_optimizer(name: str, split: ModelSplit, lr_encoder: float, lr_head: float, weight_decay: float = 0.01):
    groups = param_groups(split, lr_encoder, lr_head)
    if name == "sgd":
        return SGD(groups)
    if name == "adamw":
        return AdamW(groups, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class ClientData:
    """Points and labels of one party, with cached point features when valid."""

    points: np.ndarray
    labels: np.ndarray
    features: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx):
        f = None if self.features is None else self.features[idx]
        return self.points[idx], self.labels[idx], f


def cache_features(split: ModelSplit, points: np.ndarray, chunk: int = 256) -> np.ndarray | None:
    """Pooled point features; only meaningful while the point map is frozen."""
    if split.embedder.point_w.trainable:
        return None
    out = [point_features(split.embedder, points[i:i + chunk]).data for i in range(0, len(points), chunk)]
    return np.concatenate(out) if out else None


def train_epochs(split: ModelSplit, data: ClientData, epochs: int, batch_size: int, optimizer,
                 rng: np.random.Generator, correction: str = "off", global_coeffs=None,
                 stats: StatsAccumulator | None = None) -> int:
    """Run ``epochs`` passes of shuffled mini-batches; returns the number of steps.

    During the final epoch the per-sample gradient measures are fed into
    ``stats`` before each update.
    """
    n = len(data)
    if global_coeffs is None:
        global_coeffs = np.ones(split.dims.n_classes)
    steps = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        last = epoch == epochs - 1
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if idx.size == 0:
                continue
            pts, labels, feats = data.batch(idx)
            split.zero_grad()
            logits = detector_forward(split, pts, feats)
            losses, p_true = tn.per_sample_cross_entropy(logits, labels)
            if last and stats is not None:
                stats.update(grad_measure(np.clip(p_true, 0.0, 1.0)), labels)
            w = sample_weights(correction, p_true, labels, global_coeffs)
            tn.backward(weighted_loss(losses, w))
            optimizer.step()
            steps += 1
    return steps


@dataclass
class Evaluation:
    accuracy: float
    macro_recall: float
    per_class_recall: np.ndarray  # nan for classes absent from the evaluation set


def predict(split: ModelSplit, points: np.ndarray, features: np.ndarray | None = None, chunk: int = 512) -> np.ndarray:
    out = []
    for i in range(0, len(points), chunk):
        f = None if features is None else features[i:i + chunk]
        out.append(np.argmax(detector_forward(split, points[i:i + chunk], f).data, axis=1))
    return np.concatenate(out)


def evaluate(split: ModelSplit, data: ClientData) -> Evaluation:
    pred = predict(split, data.points, data.features)
    return score(pred, data.labels, split.dims.n_classes)


def score(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> Evaluation:
    hits = np.bincount(labels[pred == labels], minlength=n_classes)
    counts = np.bincount(labels, minlength=n_classes)
    recall = np.full(n_classes, np.nan)
    recall[counts > 0] = hits[counts > 0] / counts[counts > 0]
    return Evaluation(float(np.mean(pred == labels)), float(np.nanmean(recall)), recall)
