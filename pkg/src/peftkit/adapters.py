"""LoRA, IA3, bottleneck adapters and prefix tuning.

Attaching an adapter freezes every base weight and installs an
:class:`~peftkit.model.AdapterHooks` subclass on the model; the forward pass
consults the hooks at each projection, activation and sublayer output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .model import AdapterHooks, Model, ModelConfig
from .tensor import (
    ConfigError, Parameter, ShapeError, Tensor, matmul, silu, tanh, transpose,
)


class AdapterError(RuntimeError):
    pass


class MergeError(AdapterError):
    pass


LAYER_MASK_MODES = ("all", "all_but_last_k", "only_last_k")


@dataclass(frozen=True)
class LayerMask:
    mode: str = "all"
    k: int = 0

    def __post_init__(self):
        if self.mode not in LAYER_MASK_MODES:
            raise ConfigError(f"unknown layer mask mode {self.mode!r}")
        if self.k < 0:
            raise ConfigError(f"layer mask k must be non-negative, got {self.k}")

    def resolve(self, n_layers: int) -> list[int]:
        return resolve_layer_mask(self, n_layers)


def resolve_layer_mask(mask: LayerMask, n_layers: int) -> list[int]:
    if mask.k > n_layers:
        raise ConfigError(f"layer mask k={mask.k} exceeds n_layers={n_layers}")
    if mask.mode == "all":
        return list(range(n_layers))
    if mask.mode == "all_but_last_k":
        return list(range(n_layers - mask.k))
    return list(range(n_layers - mask.k, n_layers))


LORA_TARGETS = {
    "attn_qv": ("attn.q", "attn.v"),
    "ff_all": ("ff.gate", "ff.up", "ff.down"),
    "ff_plus_qv": ("attn.q", "attn.v", "ff.gate", "ff.up", "ff.down"),
}


@dataclass(frozen=True)
class LoraConfig:
    rank: int
    alpha: float | None = None
    targets: str = "attn_qv"
    layer_mask: LayerMask = field(default_factory=LayerMask)
    init_seed: int = 0

    def __post_init__(self):
        if self.rank <= 0:
            raise ConfigError(f"LoRA rank must be positive, got {self.rank}")
        if self.targets not in LORA_TARGETS:
            raise ConfigError(f"unknown LoRA targets {self.targets!r}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", 2.0 * self.rank)
        if self.alpha <= 0:
            raise ConfigError(f"LoRA alpha must be positive, got {self.alpha}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def target_names(self) -> tuple[str, ...]:
        return LORA_TARGETS[self.targets]


@dataclass(frozen=True)
class Ia3Config:
    layer_mask: LayerMask = field(default_factory=LayerMask)
    init_seed: int = 0


@dataclass(frozen=True)
class BottleneckConfig:
    reduction_factor: int
    layer_mask: LayerMask = field(default_factory=LayerMask)
    init_seed: int = 0

    def __post_init__(self):
        if self.reduction_factor <= 0:
            raise ConfigError(f"reduction factor must be positive, got {self.reduction_factor}")

    def width(self, d_model: int) -> int:
        if d_model % self.reduction_factor:
            raise ConfigError(
                f"reduction factor {self.reduction_factor} does not divide d_model={d_model}")
        return d_model // self.reduction_factor


@dataclass(frozen=True)
class PrefixConfig:
    prefix_len: int = 30
    bottleneck_width: int = 512
    layer_mask: LayerMask = field(default_factory=LayerMask)
    init_seed: int = 0

    def __post_init__(self):
        if self.prefix_len <= 0 or self.bottleneck_width <= 0:
            raise ConfigError("prefix_len and bottleneck_width must be positive")


AdapterConfig = Union[LoraConfig, Ia3Config, BottleneckConfig, PrefixConfig]

_METHODS = {LoraConfig: "lora", Ia3Config: "ia3", BottleneckConfig: "bottleneck",
            PrefixConfig: "prefix"}


def adapter_config_to_json(cfg: AdapterConfig) -> dict:
    d = {"method": _METHODS[type(cfg)]}
    if isinstance(cfg, LoraConfig):
        d.update(rank=cfg.rank, alpha=float(cfg.alpha), targets=cfg.targets)
    elif isinstance(cfg, BottleneckConfig):
        d["reduction_factor"] = cfg.reduction_factor
    elif isinstance(cfg, PrefixConfig):
        d.update(prefix_len=cfg.prefix_len, bottleneck_width=cfg.bottleneck_width)
    d["layer_mask"] = {"mode": cfg.layer_mask.mode, "k": cfg.layer_mask.k}
    d["seed"] = cfg.init_seed
    return d


_ALLOWED_KEYS = {
    "lora": {"rank", "alpha", "targets"},
    "ia3": set(),
    "bottleneck": {"reduction_factor"},
    "prefix": {"prefix_len", "bottleneck_width"},
}


def adapter_config_from_json(d: dict) -> AdapterConfig:
    method = d.get("method")
    if method not in _ALLOWED_KEYS:
        raise ConfigError(f"unknown adapter method {method!r}")
    extra = set(d) - _ALLOWED_KEYS[method] - {"method", "layer_mask", "seed"}
    if extra:
        raise ConfigError(f"keys {sorted(extra)} not valid for method {method!r}")
    lm = d.get("layer_mask") or {"mode": "all", "k": 0}
    mask = LayerMask(lm.get("mode", "all"), int(lm.get("k", 0)))
    seed = int(d.get("seed", 0))
    if method == "lora":
        if "rank" not in d:
            raise ConfigError("lora config needs 'rank'")
        alpha = d.get("alpha")
        return LoraConfig(int(d["rank"]), None if alpha is None else float(alpha),
                          d.get("targets", "attn_qv"), mask, seed)
    if method == "ia3":
        return Ia3Config(mask, seed)
    if method == "bottleneck":
        if "reduction_factor" not in d:
            raise ConfigError("bottleneck config needs 'reduction_factor'")
        return BottleneckConfig(int(d["reduction_factor"]), mask, seed)
    return PrefixConfig(int(d.get("prefix_len", 30)), int(d.get("bottleneck_width", 512)), mask, seed)


def _fans(mc: ModelConfig, name: str) -> tuple[int, int]:
    return {
        "attn.q": (mc.d_model, mc.d_model),
        "attn.k": (mc.d_model, mc.kv_width),
        "attn.v": (mc.d_model, mc.kv_width),
        "attn.o": (mc.d_model, mc.d_model),
        "ff.gate": (mc.d_model, mc.d_ff),
        "ff.up": (mc.d_model, mc.d_ff),
        "ff.down": (mc.d_ff, mc.d_model),
    }[name]


def _short(name: str) -> str:
    return name.split(".")[1]


# forward primitives ----------------------------------------------------------


def lora_forward(x: Tensor, w: Tensor, a: Tensor, b: Tensor, alpha: float, r: int) -> Tensor:
    """``x @ W + (alpha / r) * (x @ A^T) @ B^T`` without forming the dense delta."""
    fan_in, fan_out = w.shape
    if a.shape != (r, fan_in) or b.shape != (fan_out, r):
        raise ShapeError(f"LoRA shapes A{a.shape} B{b.shape} incompatible with W{w.shape}, r={r}")
    low = matmul(matmul(x, transpose(a)), transpose(b))
    return matmul(x, w) + low * (alpha / r)


def ia3_apply(h: Tensor, scale: Tensor) -> Tensor:
    if h.shape[-1] != scale.shape[-1]:
        raise ShapeError(f"IA3 vector width {scale.shape[-1]} != activation width {h.shape[-1]}")
    return h * scale


def bottleneck_forward(x: Tensor, down: Tensor, up: Tensor, down_bias: Tensor | None = None,
                       up_bias: Tensor | None = None) -> Tensor:
    """``x + up(silu(down(x)))`` with optional biases."""
    h = matmul(x, down)
    if down_bias is not None:
        h = h + down_bias
    h = matmul(silu(h), up)
    if up_bias is not None:
        h = h + up_bias
    return x + h


# adapter implementations -------------------------------------------------------


class LoraAdapter(AdapterHooks):
    method = "lora"

    def __init__(self, cfg: LoraConfig, mc: ModelConfig, layers: list[int], dtype):
        self.cfg = cfg
        self.layers = layers
        rng = np.random.default_rng(cfg.init_seed)
        r = cfg.rank
        self.params: dict[str, Parameter] = {}
        for i in layers:
            for name in cfg.target_names:
                fan_in, fan_out = _fans(mc, name)
                base = f"layers.{i}.adapter.{_short(name)}"
                a = rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, fan_in)).astype(dtype)
                self.params[f"{base}.lora_a"] = Parameter(a)
                self.params[f"{base}.lora_b"] = Parameter(np.zeros((fan_out, r), dtype=dtype))

    def parameters(self):
        return self.params

    def factors(self, layer: int, name: str):
        base = f"layers.{layer}.adapter.{_short(name)}"
        a = self.params.get(f"{base}.lora_a")
        return (a, self.params[f"{base}.lora_b"]) if a is not None else None

    def project(self, layer, name, x, w):
        ab = self.factors(layer, name)
        if ab is None:
            return matmul(x, w)
        return lora_forward(x, w, ab[0], ab[1], self.cfg.alpha, self.cfg.rank)


class Ia3Adapter(AdapterHooks):
    method = "ia3"

    def __init__(self, cfg: Ia3Config, mc: ModelConfig, layers: list[int], dtype):
        self.cfg = cfg
        self.layers = layers
        self.params = {}
        for i in layers:
            self.params[f"layers.{i}.adapter.ia3_k"] = Parameter(np.ones(mc.kv_width, dtype=dtype))
            self.params[f"layers.{i}.adapter.ia3_v"] = Parameter(np.ones(mc.kv_width, dtype=dtype))
            self.params[f"layers.{i}.adapter.ia3_ff"] = Parameter(np.ones(mc.d_model, dtype=dtype))

    def parameters(self):
        return self.params

    def scale(self, layer, site, h):
        s = self.params.get(f"layers.{layer}.adapter.ia3_{site}")
        return h if s is None else ia3_apply(h, s)


class BottleneckAdapter(AdapterHooks):
    method = "bottleneck"

    def __init__(self, cfg: BottleneckConfig, mc: ModelConfig, layers: list[int], dtype):
        self.cfg = cfg
        self.layers = layers
        w = cfg.width(mc.d_model)
        rng = np.random.default_rng(cfg.init_seed)
        self.params = {}
        for i in layers:
            for site in ("attn", "ff"):
                base = f"layers.{i}.adapter.{site}"
                down = rng.normal(0.0, 0.02, size=(mc.d_model, w)).astype(dtype)
                self.params[f"{base}.down"] = Parameter(down)
                self.params[f"{base}.down_bias"] = Parameter(np.zeros(w, dtype=dtype))
                self.params[f"{base}.up"] = Parameter(np.zeros((w, mc.d_model), dtype=dtype))
                self.params[f"{base}.up_bias"] = Parameter(np.zeros(mc.d_model, dtype=dtype))

    def parameters(self):
        return self.params

    def post_sublayer(self, layer, site, h):
        base = f"layers.{layer}.adapter.{site}"
        if f"{base}.down" not in self.params:
            return h
        p = self.params
        return bottleneck_forward(h, p[f"{base}.down"], p[f"{base}.up"], p[f"{base}.down_bias"],
                                  p[f"{base}.up_bias"])


class PrefixAdapter(AdapterHooks):
    """Per-layer key/value prefixes from ``tanh(E @ W1) @ W2``.

    W2 has one (key, value) pair of d_model-wide column blocks per masked
    layer. Under grouped-query attention each prefix vector keeps only its
    first ``n_kv_heads * d_head`` components.
    """

    method = "prefix"

    def __init__(self, cfg: PrefixConfig, mc: ModelConfig, layers: list[int], dtype):
        self.cfg = cfg
        self.mc = mc
        self.layers = layers
        self.slot = {layer: j for j, layer in enumerate(layers)}
        self.prefix_len = cfg.prefix_len if layers else 0
        self.baked: dict[int, tuple[np.ndarray, np.ndarray]] | None = None
        rng = np.random.default_rng(cfg.init_seed)
        d, b, p = mc.d_model, cfg.bottleneck_width, cfg.prefix_len
        self.params = {}
        if layers:
            self.params["prefix.embedding"] = Parameter(rng.normal(0.0, 1.0, size=(p, d)).astype(dtype))
            self.params["prefix.w1"] = Parameter(
                rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, b)).astype(dtype))
            self.params["prefix.w2"] = Parameter(
                rng.normal(0.0, 0.02, size=(b, len(layers) * 2 * d)).astype(dtype))

    def parameters(self):
        return self.params

    def prefix_kv(self, layer):
        if layer not in self.slot:
            return None
        if self.baked is not None:
            k, v = self.baked[layer]
            return Tensor(k), Tensor(v)
        d, kvw = self.mc.d_model, self.mc.kv_width
        j = self.slot[layer]
        hidden = tanh(matmul(self.params["prefix.embedding"], self.params["prefix.w1"]))
        w2 = self.params["prefix.w2"]
        k = matmul(hidden, w2[:, 2 * j * d: 2 * j * d + kvw])
        v = matmul(hidden, w2[:, (2 * j + 1) * d: (2 * j + 1) * d + kvw])
        return k, v


_ADAPTERS = {LoraConfig: LoraAdapter, Ia3Config: Ia3Adapter, BottleneckConfig: BottleneckAdapter,
             PrefixConfig: PrefixAdapter}


def attach_adapter(model: Model, cfg: AdapterConfig) -> Model:
    """Freeze the base weights and install the adapter described by ``cfg`` (in place)."""
    if model.adapter is not None:
        raise AdapterError("an adapter is already attached to this model")
    mc = model.config
    layers = cfg.layer_mask.resolve(mc.n_layers)
    if isinstance(cfg, LoraConfig):
        for name in cfg.target_names:
            fan_in, fan_out = _fans(mc, name)
            if cfg.rank > min(fan_in, fan_out):
                raise ConfigError(
                    f"LoRA rank {cfg.rank} exceeds min(fan_in, fan_out)={min(fan_in, fan_out)} "
                    f"for {name}")
    adapter = _ADAPTERS[type(cfg)](cfg, mc, layers, model.dtype)
    for p in model.params.values():
        p.trainable = False
    model.adapter = adapter
    return model


def detach_adapter(model: Model) -> AdapterHooks | None:
    adapter, model.adapter = model.adapter, None
    return adapter


def merge_lora(model: Model) -> Model:
    """Return a plain model whose targeted weights absorb ``(alpha / r) * (B @ A)^T``."""
    if model.merged:
        raise MergeError("model is already merged")
    if not isinstance(model.adapter, LoraAdapter):
        what = getattr(model.adapter, "method", None)
        if what is None:
            raise MergeError("no LoRA adapter attached; nothing to merge")
        raise MergeError(f"merging is unsupported for {what} adapters")
    lora = model.adapter
    params = {k: Parameter(p.data.copy(), trainable=False) for k, p in model.params.items()}
    s = lora.cfg.scaling
    for i in lora.layers:
        for name in lora.cfg.target_names:
            a, b = lora.factors(i, name)
            w = params[f"layers.{i}.{name}"]
            w.data = w.data + (s * (a.data.T @ b.data.T)).astype(w.dtype)
    merged = Model(model.config, params)
    merged.merged = True
    return merged


def bake_prefix(model: Model) -> dict[str, np.ndarray]:
    """Materialize prefixes into per-layer tensors and drop the reparameterization."""
    ad = model.adapter
    if not isinstance(ad, PrefixAdapter):
        raise AdapterError("bake_prefix needs a prefix adapter")
    tensors = {}
    baked = {}
    for layer in ad.layers:
        k, v = ad.prefix_kv(layer)
        baked[layer] = (k.data.copy(), v.data.copy())
        tensors[f"layers.{layer}.adapter.prefix_k"] = baked[layer][0]
        tensors[f"layers.{layer}.adapter.prefix_v"] = baked[layer][1]
    ad.baked = baked
    ad.params = {}
    return tensors


def prefix_materialize(cfg: PrefixConfig, mc: ModelConfig, params: dict[str, Tensor]):
    """Per-layer (K_prefix, V_prefix), each ``prefix_len x kv_width``, from raw tensors."""
    layers = cfg.layer_mask.resolve(mc.n_layers)
    d, kvw = mc.d_model, mc.kv_width
    e, w1, w2 = (np.asarray(getattr(params[k], "data", params[k]))
                 for k in ("prefix.embedding", "prefix.w1", "prefix.w2"))
    raw = (np.tanh(e @ w1) @ w2).reshape(cfg.prefix_len, len(layers), 2, d)
    return {layer: (raw[:, j, 0, :kvw], raw[:, j, 1, :kvw]) for j, layer in enumerate(layers)}


def adapter_state(model: Model) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.hooks.parameters().items()}


def load_adapter_state(model: Model, tensors: dict[str, np.ndarray]) -> None:
    ad = model.adapter
    if ad is None:
        raise AdapterError("attach an adapter before loading adapter tensors")
    if isinstance(ad, PrefixAdapter) and any(k.endswith("prefix_k") for k in tensors):
        ad.baked = {layer: (tensors[f"layers.{layer}.adapter.prefix_k"].astype(model.dtype),
                            tensors[f"layers.{layer}.adapter.prefix_v"].astype(model.dtype))
                    for layer in ad.layers}
        ad.params = {}
        return
    params = ad.parameters()
    missing = set(params) - set(tensors)
    unexpected = set(tensors) - set(params)
    if missing or unexpected:
        raise AdapterError(f"adapter tensor mismatch: missing {sorted(missing)}, "
                           f"unexpected {sorted(unexpected)}")
    for k, p in params.items():
        if tensors[k].shape != p.shape:
            raise ShapeError(f"{k}: checkpoint shape {tensors[k].shape} != {p.shape}")
        p.data = np.ascontiguousarray(tensors[k], dtype=p.dtype)


# analytic counting ----------------------------------------------------------------


def count_trainable(cfg: AdapterConfig, mc: ModelConfig) -> dict[str, int]:
    """Closed-form trainable parameter count with a per-family breakdown.

    Counting does not enforce the attach-time LoRA rank bound, so budgets for
    ranks above a projection's width can still be reported.
    """
    layers = cfg.layer_mask.resolve(mc.n_layers)
    n = len(layers)
    out: dict[str, int] = {}
    if isinstance(cfg, LoraConfig):
        for name in cfg.target_names:
            fan_in, fan_out = _fans(mc, name)
            out[f"lora.{_short(name)}"] = n * cfg.rank * (fan_in + fan_out)
    elif isinstance(cfg, Ia3Config):
        out["ia3.k"] = n * mc.kv_width
        out["ia3.v"] = n * mc.kv_width
        out["ia3.ff"] = n * mc.d_model
    elif isinstance(cfg, BottleneckConfig):
        w = cfg.width(mc.d_model)
        per_block = (mc.d_model * w + w) + (w * mc.d_model + mc.d_model)
        out["bottleneck.attn"] = n * per_block
        out["bottleneck.ff"] = n * per_block
    elif isinstance(cfg, PrefixConfig):
        if n:
            d, b = mc.d_model, cfg.bottleneck_width
            out["prefix.embedding"] = cfg.prefix_len * d
            out["prefix.w1"] = d * b
            out["prefix.w2"] = b * n * 2 * d
    else:
        raise ConfigError(f"not an adapter config: {cfg!r}")
    out["total"] = sum(out.values())
    if isinstance(cfg, PrefixConfig):
        out["single_projection_total"] = out["total"] - out.get("prefix.w1", 0)
    return out
