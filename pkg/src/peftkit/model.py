"""Decoder-only causal transformer with grouped-query attention and rotary positions.

Weights are stored fan_in x fan_out so every projection is ``x @ W``. Parameter
names are dot-paths (``layers.3.attn.q``) shared with the checkpoint format.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .tensor import (
    ConfigError, Parameter, Tensor, broadcast_to, concat, embedding, matmul,
    rms_norm, rope_apply, silu, softmax, transpose,
)


class ContextLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 16
    d_ff: int = 256
    vocab: int = 259
    max_positions: int = 512
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    tie_embeddings: bool = True

    def __post_init__(self):
        for f in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_head", "d_ff", "vocab",
                  "max_positions"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive, got {getattr(self, f)}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model={self.d_model} != n_heads*d_head={self.n_heads * self.d_head}")

    @property
    def kv_width(self) -> int:
        return self.n_kv_heads * self.d_head

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# Llama-3.2-1B geometry; vocab size and embedding tying are not pinned down, so both totals are reported.
PAPER_1B = ModelConfig(n_layers=16, d_model=2048, n_heads=32, n_kv_heads=8, d_head=64,
                       d_ff=8192, vocab=128_256, max_positions=131_072, rope_theta=500_000.0,
                       tie_embeddings=False)
DESK = ModelConfig()

PRESETS = {"paper-1b": PAPER_1B, "desk": DESK}


def resolve_model_config(spec) -> ModelConfig:
    """Accept a preset name, a dict (optionally with a ``preset`` base), or a config."""
    if isinstance(spec, ModelConfig):
        return spec
    if isinstance(spec, str):
        try:
            return PRESETS[spec]
        except KeyError:
            raise ConfigError(f"unknown model preset {spec!r}; known: {sorted(PRESETS)}") from None
    d = dict(spec)
    base = PRESETS[d.pop("preset")].to_dict() if "preset" in d else {}
    base.update(d)
    return ModelConfig.from_dict(base)


def base_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every base weight tensor in allocation order."""
    c = config
    shapes = {"embed": (c.vocab, c.d_model)}
    for i in range(c.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn_norm"] = (c.d_model,)
        shapes[f"{p}.attn.q"] = (c.d_model, c.d_model)
        shapes[f"{p}.attn.k"] = (c.d_model, c.kv_width)
        shapes[f"{p}.attn.v"] = (c.d_model, c.kv_width)
        shapes[f"{p}.attn.o"] = (c.d_model, c.d_model)
        shapes[f"{p}.ff_norm"] = (c.d_model,)
        shapes[f"{p}.ff.gate"] = (c.d_model, c.d_ff)
        shapes[f"{p}.ff.up"] = (c.d_model, c.d_ff)
        shapes[f"{p}.ff.down"] = (c.d_ff, c.d_model)
    shapes["final_norm"] = (c.d_model,)
    if not c.tie_embeddings:
        shapes["lm_head"] = (c.d_model, c.vocab)
    return shapes


def count_base_params(config: ModelConfig) -> dict[str, int]:
    """Closed-form base parameter counts per weight family."""
    c = config
    embed = c.vocab * c.d_model
    attn = 2 * c.d_model * c.d_model + 2 * c.d_model * c.kv_width
    ff = 3 * c.d_model * c.d_ff
    norms = c.n_layers * 2 * c.d_model + c.d_model
    core = embed + c.n_layers * (attn + ff) + norms
    return {
        "embedding": embed,
        "attention_per_layer": attn,
        "feed_forward_per_layer": ff,
        "attention": c.n_layers * attn,
        "feed_forward": c.n_layers * ff,
        "norms": norms,
        "lm_head": 0 if c.tie_embeddings else embed,
        "total_tied": core,
        "total_untied": core + embed,
        "total": core if c.tie_embeddings else core + embed,
    }


class AdapterHooks:
    """No-op insertion points consulted by the forward pass.

    Adapter implementations override the hooks they need.
    """

    prefix_len = 0

    def project(self, layer: int, name: str, x: Tensor, w: Tensor) -> Tensor:
        return matmul(x, w)

    def scale(self, layer: int, site: str, h: Tensor) -> Tensor:
        return h

    def post_sublayer(self, layer: int, site: str, h: Tensor) -> Tensor:
        return h

    def prefix_kv(self, layer: int):
        return None

    def parameters(self) -> dict[str, Parameter]:
        return {}


_NO_ADAPTER = AdapterHooks()


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params
        self.adapter = None
        self.merged = False

    @property
    def dtype(self):
        return self.params["embed"].dtype

    @property
    def hooks(self) -> AdapterHooks:
        return self.adapter if self.adapter is not None else _NO_ADAPTER

    def named_parameters(self) -> dict[str, Parameter]:
        out = dict(self.params)
        out.update(self.hooks.parameters())
        return out

    def trainable_parameters(self) -> dict[str, Parameter]:
        return {k: p for k, p in self.named_parameters().items() if p.trainable}

    def num_trainable(self) -> int:
        return sum(p.size for p in self.trainable_parameters().values())

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def state(self, include_adapter: bool = True) -> dict[str, np.ndarray]:
        src = self.named_parameters() if include_adapter else self.params
        return {k: p.data.copy() for k, p in src.items()}

    def copy(self) -> Model:
        return copy.deepcopy(self)

    def __call__(self, tokens, cache: KVCache | None = None) -> Tensor:
        return forward_logits(self, tokens, cache)


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Weights ~ normal(0, 0.02), norm scales = 1, fully determined by ``seed``."""
    if not isinstance(config, ModelConfig):
        config = resolve_model_config(config)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in base_param_shapes(config).items():
        if len(shape) == 1:
            data = np.ones(shape, dtype=dtype)
        else:
            data = rng.normal(0.0, 0.02, size=shape).astype(dtype)
        params[name] = Parameter(data)
    return Model(config, params)


@dataclass
class KVCache:
    """Post-rotary keys/values per layer, shaped (batch, n_kv_heads, length, d_head)."""

    max_positions: int
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    length: int = 0

    @classmethod
    def for_model(cls, model: Model) -> KVCache:
        n = model.config.n_layers
        return cls(model.config.max_positions, [None] * n, [None] * n, 0)


def attention_forward(model: Model, layer: int, x: Tensor, positions: np.ndarray,
                      cache: KVCache | None = None, weights_out: list | None = None) -> Tensor:
    """Grouped-query causal self-attention sublayer output (before the residual add)."""
    c = model.config
    hooks = model.hooks
    B, T, _ = x.shape
    H, Hkv, D, G = c.n_heads, c.n_kv_heads, c.d_head, c.group_size
    pre = f"layers.{layer}"

    q = hooks.project(layer, "attn.q", x, model.params[f"{pre}.attn.q"])
    k = hooks.project(layer, "attn.k", x, model.params[f"{pre}.attn.k"])
    v = hooks.project(layer, "attn.v", x, model.params[f"{pre}.attn.v"])
    k = hooks.scale(layer, "k", k)
    v = hooks.scale(layer, "v", v)

    q = rope_apply(q.reshape(B, T, H, D), positions, c.rope_theta)
    k = rope_apply(k.reshape(B, T, Hkv, D), positions, c.rope_theta)
    q = transpose(q, (0, 2, 1, 3)).reshape(B, Hkv, G, T, D)
    k = transpose(k, (0, 2, 1, 3))
    v = transpose(v.reshape(B, T, Hkv, D), (0, 2, 1, 3))

    past = 0
    if cache is not None:
        if cache.keys[layer] is not None:
            past = cache.keys[layer].shape[2]
            k = concat([Tensor(cache.keys[layer]), k], axis=2)
            v = concat([Tensor(cache.values[layer]), v], axis=2)
        cache.keys[layer] = k.data
        cache.values[layer] = v.data

    n_prefix = 0
    pkv = hooks.prefix_kv(layer)
    if pkv is not None:
        pk, pv = pkv
        n_prefix = pk.shape[0]
        pk = broadcast_to(transpose(pk.reshape(n_prefix, Hkv, D), (1, 0, 2)), (B, Hkv, n_prefix, D))
        pv = broadcast_to(transpose(pv.reshape(n_prefix, Hkv, D), (1, 0, 2)), (B, Hkv, n_prefix, D))
        k = concat([pk, k], axis=2)
        v = concat([pv, v], axis=2)

    S = k.shape[2]
    scores = matmul(q, transpose(k.reshape(B, Hkv, 1, S, D))) * (1.0 / math.sqrt(D))
    qpos = past + np.arange(T)[:, None]
    kpos = np.arange(S)[None, :] - n_prefix
    mask = np.where(kpos <= qpos, 0.0, -np.inf).astype(x.dtype)
    w = softmax(scores + mask, axis=-1)
    if weights_out is not None:
        weights_out.append(w.data)
    out = matmul(w, v.reshape(B, Hkv, 1, S, D))
    out = transpose(out.reshape(B, H, T, D), (0, 2, 1, 3)).reshape(B, T, c.d_model)
    out = hooks.project(layer, "attn.o", out, model.params[f"{pre}.attn.o"])
    return hooks.post_sublayer(layer, "attn", out)


def ff_forward(model: Model, layer: int, x: Tensor) -> Tensor:
    """Gated feed-forward sublayer output ``down(silu(gate(x)) * up(x))``."""
    hooks = model.hooks
    pre = f"layers.{layer}.ff"
    g = hooks.project(layer, "ff.gate", x, model.params[f"{pre}.gate"])
    u = hooks.project(layer, "ff.up", x, model.params[f"{pre}.up"])
    h = hooks.project(layer, "ff.down", silu(g) * u, model.params[f"{pre}.down"])
    h = hooks.scale(layer, "ff", h)
    return hooks.post_sublayer(layer, "ff", h)


def check_context(model: Model, n_tokens: int, cache: KVCache | None = None) -> None:
    past = cache.length if cache is not None else 0
    p = model.hooks.prefix_len
    need = p + past + n_tokens
    if need > model.config.max_positions:
        detail = f" (prefix {p} + cached {past} + new {n_tokens})" if p or past else ""
        raise ContextLengthError(
            f"context length {need} exceeds max_positions {model.config.max_positions}{detail}")


def forward_logits(model: Model, tokens, cache: KVCache | None = None,
                   weights_out: list | None = None) -> Tensor:
    """Logits for ``tokens`` of shape (seq,) or (batch, seq)."""
    c = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    B, T = ids.shape
    check_context(model, T, cache)
    past = cache.length if cache is not None else 0
    positions = np.arange(past, past + T)

    x = embedding(model.params["embed"], ids)
    for i in range(c.n_layers):
        h = rms_norm(x, model.params[f"layers.{i}.attn_norm"], c.norm_eps)
        x = x + attention_forward(model, i, h, positions, cache, weights_out)
        h = rms_norm(x, model.params[f"layers.{i}.ff_norm"], c.norm_eps)
        x = x + ff_forward(model, i, h)
    x = rms_norm(x, model.params["final_norm"], c.norm_eps)
    head = transpose(model.params["embed"]) if c.tie_embeddings else model.params["lm_head"]
    logits = matmul(x, head)
    if cache is not None:
        cache.length += T
    return logits.reshape(T, c.vocab) if squeeze else logits
