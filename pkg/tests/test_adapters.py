import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peftkit.adapters import (
    AdapterError, BottleneckConfig, Ia3Config, LayerMask, LoraConfig, MergeError, PrefixConfig,
    adapter_config_from_json, adapter_config_to_json, attach_adapter, bake_prefix,
    bottleneck_forward, count_trainable, ia3_apply, lora_forward, merge_lora, prefix_materialize,
    resolve_layer_mask,
)
from peftkit.model import PAPER_1B, ContextLengthError, ModelConfig, forward_logits, init_model
from peftkit.tensor import ConfigError, ShapeError, Tensor
from toys import identity_configs, random_toy, toy_config

SIXTEEN = ModelConfig(n_layers=16, d_model=16, n_heads=4, n_kv_heads=2, d_head=4, d_ff=24, vocab=11)


def _tokens(model, n=12, seed=0):
    return np.random.default_rng(seed).integers(0, model.config.vocab, size=n)


# identity at init -----------------------------------------------------------------


@pytest.mark.parametrize("cfg", identity_configs(), ids=lambda c: type(c).__name__ + getattr(c, "targets", ""))
def test_identity_at_init(cfg):
    model = init_model(toy_config(), seed=1)
    s = _tokens(model)
    base = forward_logits(model, s).data
    attach_adapter(model, cfg)
    np.testing.assert_array_equal(forward_logits(model, s).data, base)


def test_prefix_has_no_identity_at_init():
    model = init_model(toy_config(), seed=1)
    s = _tokens(model)
    base = forward_logits(model, s).data
    attach_adapter(model, PrefixConfig(prefix_len=3, bottleneck_width=8))
    assert not np.allclose(forward_logits(model, s).data, base)


def test_attach_freezes_base_and_marks_adapter_trainable():
    model = init_model(toy_config(), seed=0)
    attach_adapter(model, LoraConfig(2))
    assert all(not p.trainable for p in model.params.values())
    assert set(model.trainable_parameters()) == set(model.adapter.parameters())
    assert all(".adapter." in k for k in model.trainable_parameters())


def test_attach_errors():
    model = init_model(toy_config(), seed=0)
    with pytest.raises(ConfigError):
        attach_adapter(model, BottleneckConfig(3))
    with pytest.raises(ConfigError, match="exceeds"):
        attach_adapter(model, LoraConfig(9))  # v projection is 8 wide
    attach_adapter(model, Ia3Config())
    with pytest.raises(AdapterError, match="already"):
        attach_adapter(model, Ia3Config())


def test_config_validation():
    with pytest.raises(ConfigError):
        LoraConfig(0)
    with pytest.raises(ConfigError):
        LoraConfig(2, targets="everything")
    with pytest.raises(ConfigError):
        LoraConfig(2, alpha=-1.0)
    with pytest.raises(ConfigError):
        PrefixConfig(prefix_len=0)
    with pytest.raises(ConfigError):
        LayerMask("some")
    assert LoraConfig(8).alpha == 16.0 and LoraConfig(8).scaling == 2.0


# LoRA ---------------------------------------------------------------------------------


def test_lora_scalar_closed_form():
    one = lambda v: Tensor(np.array([[v]], dtype=np.float64))
    y = lora_forward(one(1.0), one(2.0), one(3.0), one(4.0), alpha=2.0, r=1)
    assert y.item() == 26.0


def test_lora_zero_b_is_base():
    rng = np.random.default_rng(0)
    x, w, a = rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=(2, 5))
    y = lora_forward(Tensor(x), Tensor(w), Tensor(a), Tensor(np.zeros((4, 2))), 4.0, 2)
    np.testing.assert_array_equal(y.data, x @ w)


@pytest.mark.parametrize("seed", range(10))
def test_lora_dense_delta_oracle(seed):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(1, 9))
    alpha = float(rng.uniform(0.5, 20))
    x, w = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    a, b = rng.normal(size=(r, 8)), rng.normal(size=(8, r))
    dense = x @ (w + (alpha / r) * (b @ a).T)
    got = lora_forward(Tensor(x), Tensor(w), Tensor(a), Tensor(b), alpha, r).data
    np.testing.assert_allclose(got, dense, atol=1e-5)


def test_lora_shape_error():
    with pytest.raises(ShapeError):
        lora_forward(Tensor(np.ones((1, 3))), Tensor(np.ones((3, 2))), Tensor(np.ones((2, 3))),
                     Tensor(np.ones((3, 2))), 1.0, 2)


def test_lora_init_statistics():
    mc = ModelConfig(n_layers=1, d_model=256, n_heads=4, n_kv_heads=4, d_head=64, d_ff=256, vocab=5)
    model = attach_adapter(init_model(mc), LoraConfig(16))
    a, b = model.adapter.factors(0, "attn.q")
    assert a.shape == (16, 256) and b.shape == (256, 16)
    assert abs(a.data.std() - 1 / math.sqrt(16)) < 0.01
    np.testing.assert_array_equal(b.data, 0)


def _randomize_adapter(model, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in model.adapter.parameters().values():
        p.data = (p.data + rng.normal(0, scale, size=p.shape)).astype(p.dtype)


@pytest.mark.parametrize("targets", ["attn_qv", "ff_all", "ff_plus_qv"])
def test_merge_equivalence(targets):
    model = attach_adapter(init_model(toy_config(), seed=2), LoraConfig(3, targets=targets))
    _randomize_adapter(model, 5)
    merged = merge_lora(model)
    assert merged.adapter is None and merged.merged
    assert merged.num_trainable() == 0
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = rng.integers(0, 31, size=int(rng.integers(1, 20)))
        np.testing.assert_allclose(forward_logits(merged, s).data, forward_logits(model, s).data,
                                   atol=1e-4)


def test_merge_with_zero_b_is_bit_identical():
    model = init_model(toy_config(), seed=3)
    before = {k: p.data.copy() for k, p in model.params.items()}
    merged = merge_lora(attach_adapter(model, LoraConfig(2, targets="ff_plus_qv")))
    for k, v in before.items():
        assert merged.params[k].data.tobytes() == v.tobytes()


def test_merge_errors():
    for cfg in (BottleneckConfig(2), Ia3Config(), PrefixConfig(2, 4)):
        model = attach_adapter(init_model(toy_config()), cfg)
        with pytest.raises(MergeError, match="unsupported"):
            merge_lora(model)
    with pytest.raises(MergeError, match="no LoRA"):
        merge_lora(init_model(toy_config()))
    merged = merge_lora(attach_adapter(init_model(toy_config()), LoraConfig(2)))
    with pytest.raises(MergeError, match="already merged"):
        merge_lora(merged)


# IA3 and bottleneck ---------------------------------------------------------------------


def test_ia3_examples():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(ia3_apply(Tensor(h), Tensor(np.ones(3))).data, h)
    s = rng.normal(size=3)
    got = ia3_apply(Tensor(h), Tensor(s)).data
    for t in range(2):
        for j in range(3):
            assert got[t, j] == h[t, j] * s[j]
    with pytest.raises(ShapeError):
        ia3_apply(Tensor(h), Tensor(np.ones(4)))


def test_ia3_zero_ff_scale_removes_ff_block():
    model = init_model(toy_config(n_layers=1), seed=4, dtype=np.float64)
    x = np.random.default_rng(2).normal(size=(1, 4, 16))
    attach_adapter(model, Ia3Config())
    model.adapter.params["layers.0.adapter.ia3_ff"].data[:] = 0
    from peftkit.model import ff_forward
    np.testing.assert_array_equal(ff_forward(model, 0, Tensor(x)).data, 0)


def test_bottleneck_scalar_closed_form():
    one = lambda v: Tensor(np.array([[v]], dtype=np.float64))
    y = bottleneck_forward(one(1.0), one(2.0), one(3.0)).item()
    silu2 = 2 / (1 + math.exp(-2))
    assert y == pytest.approx(1 + 3 * silu2, abs=1e-12)
    assert y == pytest.approx(6.28478, abs=1e-5)


def test_bottleneck_zero_up_is_identity():
    x = np.random.default_rng(3).normal(size=(4, 8))
    y = bottleneck_forward(Tensor(x), Tensor(np.ones((8, 2))), Tensor(np.zeros((2, 8))))
    np.testing.assert_array_equal(y.data, x)


@pytest.mark.parametrize("f", [2, 4, 8])
def test_bottleneck_residual_rank(f):
    rng = np.random.default_rng(f)
    d, w = 16, 16 // f
    x = rng.normal(size=(64, d))
    down, up = rng.normal(size=(d, w)), rng.normal(size=(w, d))
    delta = bottleneck_forward(Tensor(x), Tensor(down), Tensor(up)).data - x
    sv = np.linalg.svd(delta, compute_uv=False)
    assert int((sv > 1e-9 * sv[0]).sum()) <= w
    # every residual row lies in the row space of up
    coef, *_ = np.linalg.lstsq(up.T, delta.T, rcond=None)
    np.testing.assert_allclose(up.T @ coef, delta.T, atol=1e-9)


# prefix -------------------------------------------------------------------------------


def test_prefix_materialize_shapes_and_truncation():
    mc = toy_config()
    model = attach_adapter(init_model(mc), PrefixConfig(prefix_len=5, bottleneck_width=6))
    pre = prefix_materialize(model.adapter.cfg, mc, model.adapter.parameters())
    assert set(pre) == {0, 1}
    p = model.adapter.parameters()
    raw = np.tanh(p["prefix.embedding"].data @ p["prefix.w1"].data) @ p["prefix.w2"].data
    for layer, (k, v) in pre.items():
        assert k.shape == v.shape == (5, mc.kv_width)
        np.testing.assert_allclose(k, raw[:, 2 * layer * 16: 2 * layer * 16 + mc.kv_width], rtol=1e-6)
        hk, hv = model.adapter.prefix_kv(layer)
        np.testing.assert_allclose(hk.data, k, rtol=1e-6)
        np.testing.assert_allclose(hv.data, v, rtol=1e-6)


def test_prefix_zero_embedding_gives_zero_prefixes():
    mc = toy_config()
    model = attach_adapter(init_model(mc), PrefixConfig(prefix_len=4, bottleneck_width=6))
    model.adapter.params["prefix.embedding"].data[:] = 0
    for k, v in prefix_materialize(model.adapter.cfg, mc, model.adapter.parameters()).values():
        np.testing.assert_array_equal(k, 0)
        np.testing.assert_array_equal(v, 0)
    s = _tokens(model)
    base = init_model(mc)
    assert not np.allclose(forward_logits(model, s).data, forward_logits(base, s).data)


def test_prefix_attention_row_width():
    model = attach_adapter(init_model(toy_config()), PrefixConfig(prefix_len=7, bottleneck_width=4))
    weights = []
    forward_logits(model, _tokens(model, n=5), weights_out=weights)
    assert len(weights) == 2
    for w in weights:
        assert w.shape[-2:] == (5, 7 + 5)
        np.testing.assert_allclose(w.sum(-1), 1.0, rtol=1e-5)
        assert (w[..., :7] > 0).all()  # every real position sees every prefix slot


def test_prefix_single_token_hand_attention():
    mc = ModelConfig(n_layers=1, d_model=2, n_heads=1, n_kv_heads=1, d_head=2, d_ff=2, vocab=3)
    model = init_model(mc, dtype=np.float64)
    attach_adapter(model, PrefixConfig(prefix_len=2, bottleneck_width=2))
    pk = np.array([[0.5, -1.0], [2.0, 0.25]])
    bake_prefix(model)
    model.adapter.baked = {0: (pk, np.zeros((2, 2)))}
    rng = np.random.default_rng(0)
    P = {n: rng.normal(size=(2, 2)) for n in "qkvo"}
    for n, w in P.items():
        model.params[f"layers.0.attn.{n}"].data = w
    x = np.array([0.3, -0.7])
    q, k, v = x @ P["q"], x @ P["k"], x @ P["v"]  # position 0: rope is the identity
    scores = np.array([q @ pk[0], q @ pk[1], q @ k]) / math.sqrt(2)
    w = np.exp(scores) / np.exp(scores).sum()
    expected = (w[2] * v) @ P["o"]  # prefix slots carry zero values
    from peftkit.model import attention_forward
    got = attention_forward(model, 0, Tensor(x[None, None]), np.array([0])).data[0, 0]
    np.testing.assert_allclose(got, expected, atol=1e-12)
    assert w[2] < 1


def test_prefix_reduces_usable_context():
    model = attach_adapter(init_model(toy_config(max_positions=40)), PrefixConfig(30, 4))
    forward_logits(model, np.zeros(10, dtype=int))
    with pytest.raises(ContextLengthError):
        forward_logits(model, np.zeros(11, dtype=int))


def test_bake_prefix_preserves_logits():
    model = attach_adapter(init_model(toy_config()), PrefixConfig(4, 6))
    s = _tokens(model)
    before = forward_logits(model, s).data
    tensors = bake_prefix(model)
    assert set(tensors) == {"layers.0.adapter.prefix_k", "layers.0.adapter.prefix_v",
                            "layers.1.adapter.prefix_k", "layers.1.adapter.prefix_v"}
    np.testing.assert_allclose(forward_logits(model, s).data, before, rtol=1e-6)


# layer masks -------------------------------------------------------------------------------


def test_layer_mask_examples():
    assert resolve_layer_mask(LayerMask("only_last_k", 2), 16) == [14, 15]
    assert resolve_layer_mask(LayerMask("all_but_last_k", 4), 16) == list(range(12))
    assert resolve_layer_mask(LayerMask("only_last_k", 0), 16) == []
    assert resolve_layer_mask(LayerMask("all"), 3) == [0, 1, 2]
    with pytest.raises(ConfigError):
        resolve_layer_mask(LayerMask("only_last_k", 17), 16)


@given(st.integers(1, 20), st.data())
def test_layer_mask_partition(n, data):
    k = data.draw(st.integers(0, n))
    a = resolve_layer_mask(LayerMask("all_but_last_k", k), n)
    b = resolve_layer_mask(LayerMask("only_last_k", k), n)
    assert sorted(a + b) == list(range(n)) and not set(a) & set(b)


def test_only_last_two_names():
    for cfg in (LoraConfig(2, layer_mask=LayerMask("only_last_k", 2)),
                Ia3Config(LayerMask("only_last_k", 2)),
                BottleneckConfig(4, LayerMask("only_last_k", 2))):
        model = attach_adapter(init_model(SIXTEEN), cfg)
        names = list(model.trainable_parameters())
        assert names and all(n.startswith(("layers.14.", "layers.15.")) for n in names)


def test_empty_mask_leaves_model_unchanged():
    for cfg in (LoraConfig(2, layer_mask=LayerMask("only_last_k", 0)),
                PrefixConfig(3, 4, LayerMask("only_last_k", 0))):
        model = init_model(toy_config(), seed=1)
        s = _tokens(model)
        base = forward_logits(model, s).data
        attach_adapter(model, cfg)
        assert model.num_trainable() == 0
        np.testing.assert_array_equal(forward_logits(model, s).data, base)


# counting ------------------------------------------------------------------------------------


def test_paper_counts():
    assert count_trainable(Ia3Config(), PAPER_1B)["total"] == 16 * (512 + 512 + 2048) == 49_152
    pre = count_trainable(PrefixConfig(30, 512), PAPER_1B)
    assert pre["total"] == 30 * 2048 + 2048 * 512 + 512 * (16 * 2 * 2048) == 34_664_448
    assert pre["single_projection_total"] == 33_615_872
    assert abs(pre["total"] - 34e6) / 34e6 < 0.05
    assert count_trainable(LoraConfig(8), PAPER_1B)["total"] == 851_968
    assert count_trainable(LoraConfig(8, targets="ff_all"), PAPER_1B)["total"] == 3_932_160
    assert count_trainable(BottleneckConfig(64), PAPER_1B)["total"] == 4_260_864


def _all_configs(mask=LayerMask()):
    return [LoraConfig(3, targets=t, layer_mask=mask) for t in ("attn_qv", "ff_all", "ff_plus_qv")] + [
        Ia3Config(mask), BottleneckConfig(4, mask), PrefixConfig(3, 5, mask)]


@pytest.mark.parametrize("seed", range(6))
def test_count_matches_enumeration(seed):
    model0 = random_toy(seed)
    mc = model0.config
    for mask in (LayerMask(), LayerMask("only_last_k", 1), LayerMask("all_but_last_k", 1)):
        for cfg in _all_configs(mask):
            if isinstance(cfg, LoraConfig) and cfg.rank > min(mc.kv_width, mc.d_ff):
                continue
            if isinstance(cfg, BottleneckConfig) and mc.d_model % 4:
                continue
            model = attach_adapter(init_model(mc), cfg)
            assert count_trainable(cfg, mc)["total"] == model.num_trainable()


@pytest.mark.parametrize("k", [0, 1, 2, 4])
def test_mask_partition_counts(k):
    total = lambda cfg: count_trainable(cfg, SIXTEEN)["total"]
    for make in (lambda m: LoraConfig(2, targets="ff_plus_qv", layer_mask=m), lambda m: Ia3Config(m),
                 lambda m: BottleneckConfig(4, m)):
        assert total(make(LayerMask("all_but_last_k", k))) + total(make(LayerMask("only_last_k", k))) \
            == total(make(LayerMask()))
    # prefix shares E and W1, counted once; W2 columns partition
    pre = lambda m: count_trainable(PrefixConfig(3, 5, m), SIXTEEN)
    a, b, full = pre(LayerMask("all_but_last_k", k)), pre(LayerMask("only_last_k", k)), pre(LayerMask())
    assert a.get("prefix.w2", 0) + b.get("prefix.w2", 0) == full["prefix.w2"]


def test_count_monotonicity():
    for targets in ("attn_qv", "ff_all", "ff_plus_qv"):
        counts = [count_trainable(LoraConfig(r, targets=targets), PAPER_1B)["total"]
                  for r in (1, 8, 32, 128, 256, 1024)]
        assert all(x < y for x, y in zip(counts, counts[1:]))
    counts = [count_trainable(BottleneckConfig(f), PAPER_1B)["total"] for f in (4, 16, 64)]
    assert all(x > y for x, y in zip(counts, counts[1:]))


# JSON ----------------------------------------------------------------------------------------


@pytest.mark.parametrize("cfg", _all_configs(LayerMask("only_last_k", 2)) + [LoraConfig(4, alpha=3.5)])
def test_json_round_trip(cfg):
    d = adapter_config_to_json(cfg)
    assert set(d) <= {"method", "rank", "alpha", "targets", "reduction_factor", "prefix_len",
                      "bottleneck_width", "layer_mask", "seed"}
    assert adapter_config_from_json(d) == cfg


def test_json_errors():
    with pytest.raises(ConfigError):
        adapter_config_from_json({"method": "dora"})
    with pytest.raises(ConfigError):
        adapter_config_from_json({"method": "ia3", "rank": 4})
    with pytest.raises(ConfigError):
        adapter_config_from_json({"method": "lora"})
    assert adapter_config_from_json({"method": "lora", "rank": 4}).alpha == 8.0


# freezing under training --------------------------------------------------------------------


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 4), st.integers(1, 4))
def test_freeze_property(which, steps):
    from peftkit.train import TrainConfig, fit
    cfg = _all_configs()[which] if which < 4 else BottleneckConfig(4)
    model = init_model(toy_config(), seed=which)
    before = {k: p.data.copy() for k, p in model.params.items()}
    attach_adapter(model, cfg)
    ad_before = {k: p.data.copy() for k, p in model.adapter.parameters().items()}
    data = [list(_tokens(model, n=10, seed=i)) for i in range(4)]
    fit(model, data, TrainConfig(total_steps=steps, base_lr=1e-2, batch_size=2, max_seq=16))
    for k, v in before.items():
        assert model.params[k].data.tobytes() == v.tobytes()
    assert any(not np.array_equal(p.data, ad_before[k]) for k, p in model.adapter.parameters().items())
