"""Desk-scale point-set classifier built around the prompt encoder.

Parameters fall into three groups:

* backbone -- per-point affine map of the embedder and every encoder layer;
  frozen during prompt tuning and never communicated in that mode.
* prompts -- the :class:`~fed3d.encoder.PromptPool`.
* head -- everything else: the embedder's output projection, the positional
  table and the affine classifier.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from fed3d import tensor as tn
from fed3d.encoder import (
    ConfigurationError,
    EncoderLayer,
    PromptPool,
    encoder_forward,
    init_encoder_layer,
    init_prompt_pool,
)
from fed3d.tensor import Parameter, Tensor


@dataclass(frozen=True)
class ModelDims:
    n_layers: int = 2
    n_heads: int = 2
    prompt_len: int = 8
    d_model: int = 16
    d_head: int = 8
    n_tokens: int = 8
    n_points: int = 64
    n_classes: int = 10
    point_width: int = 32

    def validate(self) -> None:
        for name, v in asdict(self).items():
            if v < (0 if name == "prompt_len" else 1):
                raise ConfigurationError(f"{name} must be positive, got {v}")
        if self.n_points % self.n_tokens:
            raise ConfigurationError(
                f"n_points={self.n_points} is not divisible by n_tokens={self.n_tokens}")
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")


@dataclass
class PointSample:
    points: np.ndarray  # (n_points, 3)
    label: int


@dataclass
class PointEmbedder:
    point_w: Parameter  # (3, point_width)    backbone
    point_b: Parameter  # (point_width,)      backbone
    proj_w: Parameter  # (point_width, d_model)
    proj_b: Parameter  # (d_model,)
    pos: Parameter  # (n_tokens, d_model)

    @property
    def n_tokens(self) -> int:
        return self.pos.shape[0]


@dataclass
class ModelSplit:
    dims: ModelDims
    embedder: PointEmbedder
    layers: list[EncoderLayer]
    prompts: PromptPool | None
    head_w: Parameter  # (d_model, n_classes)
    head_b: Parameter

    @property
    def backbone_frozen(self) -> bool:
        return all(layer.frozen for layer in self.layers) and not self.embedder.point_w.trainable

    def backbone_params(self) -> list[Parameter]:
        out = [self.embedder.point_w, self.embedder.point_b]
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def head_params(self) -> list[Parameter]:
        e = self.embedder
        return [e.proj_w, e.proj_b, e.pos, self.head_w, self.head_b]

    def prompt_params(self) -> list[Parameter]:
        return [] if self.prompts is None else list(self.prompts.tensors())

    def all_params(self) -> list[Parameter]:
        return self.backbone_params() + self.prompt_params() + self.head_params()

    def trainable_params(self) -> list[Parameter]:
        return [p for p in self.all_params() if p.trainable]

    def communicated_params(self) -> tuple[list[Parameter], list[Parameter]]:
        """``(prompt tensors, other tensors)`` in wire order.

        With a frozen backbone the second list is the head; otherwise the
        whole model rides in it, backbone first.
        """
        rest = self.head_params() if self.backbone_frozen else self.backbone_params() + self.head_params()
        return self.prompt_params(), rest

    def freeze_backbone(self, flag: bool = True) -> None:
        self.embedder.point_w.trainable = not flag
        self.embedder.point_b.trainable = not flag
        for layer in self.layers:
            layer.freeze(flag)

    def zero_grad(self) -> None:
        for p in self.all_params():
            p.zero_grad()


def build_model(dims: ModelDims, seed: int, prompts: bool = True) -> ModelSplit:
    dims.validate()
    rng = np.random.default_rng([seed, 17])
    D, E = dims.d_model, dims.point_width

    embedder = PointEmbedder(
        point_w=Parameter(rng.normal(0.0, 1.0, (3, E)), name="embed.point_w"),
        point_b=Parameter(rng.normal(0.0, 0.1, E), name="embed.point_b"),
        proj_w=Parameter(rng.normal(0.0, 1.0 / math.sqrt(E), (E, D)), name="embed.proj_w"),
        proj_b=Parameter(np.zeros(D), name="embed.proj_b"),
        pos=Parameter(rng.normal(0.0, 0.02, (dims.n_tokens, D)), name="embed.pos"),
    )
    layers = [init_encoder_layer(D, dims.n_heads, dims.d_head, rng, index=i) for i in range(dims.n_layers)]
    pool = None
    if prompts:
        pool = init_prompt_pool(dims.n_layers, dims.n_heads, dims.prompt_len, dims.d_head,
                                seed=int(rng.integers(2**31)))
    head_w = Parameter(rng.normal(0.0, 1.0 / math.sqrt(D), (D, dims.n_classes)), name="head.w")
    head_b = Parameter(np.zeros(dims.n_classes), name="head.b")
    return ModelSplit(dims, embedder, layers, pool, head_w, head_b)


def group_points(points: np.ndarray, n_tokens: int) -> np.ndarray:
    """Contiguous index groups: ``(..., N, 3) -> (..., T, N/T, 3)``."""
    n = points.shape[-2]
    if n % n_tokens:
        raise ConfigurationError(f"{n} points cannot be split into {n_tokens} tokens")
    return points.reshape(points.shape[:-2] + (n_tokens, n // n_tokens, 3))


def point_features(embedder: PointEmbedder, points) -> Tensor:
    """Per-token max-pooled point features, before the output projection."""
    pts = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
    grouped = group_points(pts, embedder.n_tokens)
    if isinstance(points, Tensor) and points.requires_grad:
        x = tn.reshape(points, grouped.shape)
    else:
        x = Tensor(grouped)
    lifted = tn.gelu(tn.linear(x, embedder.point_w, embedder.point_b))
    return tn.max_pool(lifted, axis=-2)


def embed_points(embedder: PointEmbedder, points, features: np.ndarray | None = None) -> Tensor:
    """Group, lift every point, max-pool each group, project and add positions.

    ``points`` is ``(N, 3)`` or ``(B, N, 3)``; the result is ``(T, D)`` or
    ``(B, T, D)``. ``features`` may carry precomputed :func:`point_features`,
    which is only valid while the point map is frozen.
    """
    pooled = point_features(embedder, points) if features is None else Tensor(features)
    tokens = tn.linear(pooled, embedder.proj_w, embedder.proj_b)
    return tn.add(tokens, embedder.pos)


def pooled_features(split: ModelSplit, points, features: np.ndarray | None = None) -> Tensor:
    f = encoder_forward(split.layers, split.prompts, embed_points(split.embedder, points, features))
    return tn.mean(f, axis=-2)


def detector_forward(split: ModelSplit, points, features: np.ndarray | None = None) -> Tensor:
    """Class logits, ``(O,)`` for one cloud or ``(B, O)`` for a batch."""
    pooled = pooled_features(split, points, features)
    if pooled.data.ndim == 1:
        logits = tn.linear(tn.reshape(pooled, (1, -1)), split.head_w, split.head_b)
        return tn.reshape(logits, (split.dims.n_classes,))
    return tn.linear(pooled, split.head_w, split.head_b)


@dataclass(frozen=True)
class Census:
    total: int
    frozen: int
    communicated: int
    prompts: int
    head: int
    backbone: int


def parameter_census(split: ModelSplit) -> Census:
    backbone = sum(p.data.size for p in split.backbone_params())
    prompts = sum(p.data.size for p in split.prompt_params())
    head = sum(p.data.size for p in split.head_params())
    total = backbone + prompts + head
    pr, rest = split.communicated_params()
    communicated = sum(p.data.size for p in pr + rest)
    return Census(total=total, frozen=total - communicated, communicated=communicated,
                  prompts=prompts, head=head, backbone=backbone)


def prompt_count(L: int, H: int, p: int, d_head: int) -> int:
    return L * H * 2 * p * d_head


def census_formula(dims: ModelDims, prompts: bool = True) -> Census:
    """Closed-form parameter counts for a :class:`ModelDims`."""
    D, E, H, dh = dims.d_model, dims.point_width, dims.n_heads, dims.d_head
    per_layer = 3 * H * D * dh + H * dh * D + (D * 2 * D + 2 * D) + (2 * D * D + D)
    backbone = 3 * E + E + dims.n_layers * per_layer
    head = E * D + D + dims.n_tokens * D + D * dims.n_classes + dims.n_classes
    pr = prompt_count(dims.n_layers, H, dims.prompt_len, dh) if prompts else 0
    total = backbone + head + pr
    return Census(total=total, frozen=backbone, communicated=head + pr, prompts=pr, head=head,
                  backbone=backbone)
