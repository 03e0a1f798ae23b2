"""Transformer encoder blocks with prefix key/value prompts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from fed3d import tensor as tn
from fed3d.tensor import Parameter, Tensor


class ConfigurationError(ValueError):
    pass


PROMPT_INIT_SCALE = 0.02


@dataclass
class PromptPool:
    """Prefix prompts for every encoder layer.

    ``layers[l][h]`` is the ``(key, value)`` pair of head ``h`` in layer ``l``;
    each is a ``(p, d_head)`` parameter.
    """

    layers: list[list[tuple[Parameter, Parameter]]]
    prompt_len: int
    d_head: int

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def n_heads(self) -> int:
        return len(self.layers[0]) if self.layers else 0

    def tensors(self) -> Iterator[Parameter]:
        """Layer-major, head-major, key before value."""
        for heads in self.layers:
            for pk, pv in heads:
                yield pk
                yield pv

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors():
            t.trainable = flag

    def stacked(self, layer: int) -> tuple[Tensor, Tensor]:
        heads = self.layers[layer]
        return tn.stack([k for k, _ in heads]), tn.stack([v for _, v in heads])


def parameter_count(pool: PromptPool) -> int:
    return pool.parameter_count()


def init_prompt_pool(L: int, H: int, p: int, d_head: int, seed: int) -> PromptPool:
    """Seeded zero-mean normal prompts with standard deviation 0.02."""
    if L < 1 or H < 1 or d_head < 1 or p < 0:
        raise ConfigurationError(f"bad prompt pool extents L={L} H={H} p={p} d_head={d_head}")
    rng = np.random.default_rng(seed)
    layers = []
    for l in range(L):
        heads = []
        for h in range(H):
            pk = Parameter(rng.normal(0.0, PROMPT_INIT_SCALE, (p, d_head)), name=f"prompt.{l}.{h}.k")
            pv = Parameter(rng.normal(0.0, PROMPT_INIT_SCALE, (p, d_head)), name=f"prompt.{l}.{h}.v")
            heads.append((pk, pv))
        layers.append(heads)
    return PromptPool(layers, p, d_head)


@dataclass
class EncoderLayer:
    """One attention block. Per-head projections are stacked on the first axis."""

    w_q: Parameter  # (H, d_model, d_head)
    w_k: Parameter
    w_v: Parameter
    w_o: Parameter  # (H * d_head, d_model)
    mlp_w1: Parameter  # (d_model, hidden)
    mlp_b1: Parameter
    mlp_w2: Parameter  # (hidden, d_model)
    mlp_b2: Parameter
    frozen: bool = field(default=False)

    def __post_init__(self):
        h, d_model, d_head = self.w_q.shape
        for w in (self.w_k, self.w_v):
            if w.shape != (h, d_model, d_head):
                raise ConfigurationError(f"projection shape {w.shape} != {(h, d_model, d_head)}")
        if self.w_o.shape != (h * d_head, d_model):
            raise ConfigurationError(f"output projection shape {self.w_o.shape}")
        if self.mlp_w1.shape[0] != d_model or self.mlp_w2.shape[1] != d_model:
            raise ConfigurationError("MLP widths inconsistent with d_model")
        self.freeze(self.frozen)

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[2]

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]

    def freeze(self, flag: bool = True) -> None:
        self.frozen = flag
        for p in self.parameters():
            p.trainable = not flag


def init_encoder_layer(d_model: int, n_heads: int, d_head: int, rng: np.random.Generator,
                       index: int = 0, hidden: int | None = None) -> EncoderLayer:
    hidden = 2 * d_model if hidden is None else hidden
    s_in = 1.0 / math.sqrt(d_model)

    def p(shape, std, name):
        return Parameter(rng.normal(0.0, std, shape), name=f"layer{index}.{name}")

    return EncoderLayer(
        w_q=p((n_heads, d_model, d_head), s_in, "w_q"),
        w_k=p((n_heads, d_model, d_head), s_in, "w_k"),
        w_v=p((n_heads, d_model, d_head), s_in, "w_v"),
        w_o=p((n_heads * d_head, d_model), 1.0 / math.sqrt(n_heads * d_head), "w_o"),
        mlp_w1=p((d_model, hidden), s_in, "mlp_w1"),
        mlp_b1=Parameter(np.zeros(hidden), name=f"layer{index}.mlp_b1"),
        mlp_w2=p((hidden, d_model), 1.0 / math.sqrt(hidden), "mlp_w2"),
        mlp_b2=Parameter(np.zeros(d_model), name=f"layer{index}.mlp_b2"),
    )


def _as_batch(f: Tensor) -> tuple[Tensor, bool]:
    if f.data.ndim == 2:
        return tn.reshape(f, (1,) + f.shape), True
    if f.data.ndim != 3:
        raise tn.ShapeError(f"expected (T, d_model) or (B, T, d_model), got {f.shape}")
    return f, False


def prefix_mhsa_forward(layer: EncoderLayer, prompts, f_prev: Tensor) -> Tensor:
    """Attention block whose keys and values are extended by prompt rows.

    ``prompts`` is ``None`` or a ``(P_K, P_V)`` pair of ``(H, p, d_head)``
    tensors (or a sequence of per-head pairs). Queries are left alone, so the
    output keeps the input's token count. The residual structure is
    ``O = f + concat(heads) W_O`` and ``f' = f + MLP(O)``.
    """
    x, squeeze = _as_batch(tn._wrap(f_prev))
    bsz, T, d_model = x.shape
    if d_model != layer.d_model:
        raise tn.ShapeError(f"input width {d_model} != layer d_model {layer.d_model}")
    H, dh = layer.n_heads, layer.d_head

    xe = tn.reshape(x, (bsz, 1, T, d_model))
    q = tn.matmul(xe, layer.w_q)  # (B, H, T, dh)
    k = tn.matmul(xe, layer.w_k)
    v = tn.matmul(xe, layer.w_v)

    pk, pv = _prompt_pair(prompts, H, dh)
    if pk is not None and pk.shape[1] > 0:
        p = pk.shape[1]
        k = tn.concat([k, tn.broadcast_to(pk, (bsz, H, p, dh))], axis=2)
        v = tn.concat([v, tn.broadcast_to(pv, (bsz, H, p, dh))], axis=2)

    scores = tn.scale(tn.matmul(q, tn.swap_last(k)), 1.0 / math.sqrt(dh))
    attn = tn.softmax_rows(scores)  # (B, H, T, T + p)
    heads = tn.matmul(attn, v)  # (B, H, T, dh)
    merged = tn.reshape(tn.transpose(heads, (0, 2, 1, 3)), (bsz, T, H * dh))
    o = tn.add(x, tn.matmul(merged, layer.w_o))
    hidden = tn.gelu(tn.linear(o, layer.mlp_w1, layer.mlp_b1))
    out = tn.add(x, tn.linear(hidden, layer.mlp_w2, layer.mlp_b2))
    if squeeze:
        out = tn.reshape(out, (T, d_model))
    return out


def mhsa_forward(layer: EncoderLayer, f_prev: Tensor) -> Tensor:
    return prefix_mhsa_forward(layer, None, f_prev)


def _prompt_pair(prompts, H: int, dh: int):
    if prompts is None:
        return None, None
    if isinstance(prompts, tuple) and len(prompts) == 2 and isinstance(prompts[0], Tensor):
        pk, pv = prompts
    else:
        pairs = list(prompts)
        if len(pairs) != H:
            raise ConfigurationError(f"prompt head count {len(pairs)} != {H}")
        pk = tn.stack([a for a, _ in pairs])
        pv = tn.stack([b for _, b in pairs])
    if pk.shape[0] != H or pv.shape[0] != H:
        raise ConfigurationError(f"prompt head count {pk.shape[0]} != {H}")
    if pk.shape[2] != dh or pv.shape != pk.shape:
        raise ConfigurationError(f"prompt shapes {pk.shape}/{pv.shape} incompatible with d_head={dh}")
    return pk, pv


def attention_weights(layer: EncoderLayer, prompts, f_prev: np.ndarray) -> np.ndarray:
    """Attention matrix over the extended key axis, shape ``(H, T, T + p)``."""
    x = np.asarray(f_prev, dtype=np.float64)
    q = np.einsum("td,hde->hte", x, layer.w_q.data)
    k = np.einsum("td,hde->hte", x, layer.w_k.data)
    if prompts is not None:
        pk, _ = _prompt_pair(prompts, layer.n_heads, layer.d_head)
        k = np.concatenate([k, pk.data], axis=1)
    return tn.softmax_array(q @ np.swapaxes(k, -1, -2) / math.sqrt(layer.d_head))


def encoder_forward(layers: list[EncoderLayer], pool: PromptPool | None, f0: Tensor) -> Tensor:
    if pool is not None and pool.depth != len(layers):
        raise ConfigurationError(f"prompt pool depth {pool.depth} != encoder depth {len(layers)}")
    f = f0
    for i, layer in enumerate(layers):
        prompts = pool.stacked(i) if pool is not None and pool.prompt_len > 0 else None
        f = prefix_mhsa_forward(layer, prompts, f)
    return f
