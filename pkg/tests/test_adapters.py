"""Adapter mechanisms: identity at init, merging, pruning, parameter budgets."""

import numpy as np
import pytest

from peftlab import adapters as A
from peftlab import model as M
from peftlab.adapters import AdapterConfig, ConfigError
from peftlab.tensor import Tensor, UsageError


def _cfg(**kw):
    base = dict(vocab_size=17, d_model=8, n_heads=2, n_enc_layers=2,
                n_dec_layers=2, d_ff=16, max_seq_len=32)
    base.update(kw)
    return M.ModelConfig(**base)


def _randomize(adapters, seed=7):
    rng = np.random.default_rng(seed)
    for t in adapters.trainable_tensors():
        t.data[:] = rng.normal(0.0, 0.3, size=t.data.shape)
    return adapters


# --- configuration ----------------------------------------------------------

def test_unknown_method_rejected():
    with pytest.raises(ConfigError):
        AdapterConfig("prefix_tuning")


def test_budget_validation_and_clamp():
    with pytest.raises(ConfigError):
        AdapterConfig("adalora", budget=0.0)
    with pytest.raises(ConfigError):
        AdapterConfig("adalora", budget=-0.5)
    assert AdapterConfig("adalora", budget=1.5).budget == 1.0


def test_site_kind_must_match_method():
    with pytest.raises(ConfigError):
        AdapterConfig("lora", target_sites=("act_k",)).sites_for(_cfg())
    with pytest.raises(ConfigError):
        AdapterConfig("ia3", target_sites=("q",)).sites_for(_cfg())


def test_layer_scope_validation():
    with pytest.raises(ConfigError):
        AdapterConfig("ia3", layer_scope=3).sites_for(_cfg())
    with pytest.raises(ConfigError):
        AdapterConfig("ia3", layer_scope=0).sites_for(_cfg())


def test_layer_scope_last_n_selects_late_decoder_sites():
    sites = AdapterConfig("ia3", layer_scope=1).sites_for(_cfg())
    assert sites and all(s.stack in ("decoder", "cross") and s.layer == 1 for s in sites)
    all_sites = AdapterConfig("ia3").sites_for(_cfg())
    assert set(sites) < set(all_sites)


def test_default_targets():
    cfg = _cfg()
    lora_sites = AdapterConfig("lora").sites_for(cfg)
    assert {s.kind for s in lora_sites} == {"q", "v"}
    assert {s.stack for s in lora_sites} == {"encoder", "decoder", "cross"}
    ia3_sites = AdapterConfig("ia3").sites_for(cfg)
    assert {s.kind for s in ia3_sites} == {"act_k", "act_v", "act_ffn"}


# --- parameter counts -------------------------------------------------------

def test_lora_parameter_count_hand_oracle():
    # Default config: d=64, 2 enc + 2 dec layers, q and v in every attention
    # block including cross-attention -> 12 sites, each (64*r + r*64) scalars.
    model_cfg = M.ModelConfig(vocab_size=50)
    adapters = A.init_adapters(AdapterConfig("lora", rank=4), model_cfg)
    assert adapters.trainable_scalar_count() == 12 * (64 * 4 + 4 * 64)  # 6144
    assert len(adapters.sites) == 12


def test_parameter_count_ordering():
    model_cfg = M.ModelConfig(vocab_size=50)
    counts = {r: A.init_adapters(AdapterConfig("lora", rank=r), model_cfg).trainable_scalar_count()
              for r in (4, 8, 16)}
    assert counts[4] < counts[8] < counts[16]
    ia3_all = A.init_adapters(AdapterConfig("ia3"), model_cfg).trainable_scalar_count()
    ia3_last = A.init_adapters(AdapterConfig("ia3", layer_scope=1), model_cfg).trainable_scalar_count()
    assert ia3_all < counts[4]
    assert ia3_last < ia3_all


def test_trainable_fraction_uses_base_size():
    model_cfg = _cfg()
    params = M.init_params(model_cfg)
    adapters = A.init_adapters(AdapterConfig("ia3"), model_cfg)
    frac = A.trainable_fraction(adapters, params)
    assert frac == adapters.trainable_scalar_count() / params.scalar_count()
    assert 0 < frac < 1


# --- identity at init and merge equivalence ---------------------------------

@pytest.mark.parametrize("method,kw", [("lora", {"rank": 3}),
                                       ("adalora", {"rank": 3, "budget": 0.5}),
                                       ("ia3", {})])
def test_fresh_adapters_are_exact_identity(method, kw):
    model_cfg = _cfg()
    params = M.init_params(model_cfg, seed=1)
    adapters = A.init_adapters(AdapterConfig(method, **kw), model_cfg, seed=2)
    ids, tgt = [4, 5, 6], [7, 8]
    base = M.forward_logits(params, None, ids, tgt).data
    adapted = M.forward_logits(params, adapters, ids, tgt).data
    np.testing.assert_array_equal(adapted, base)  # bit-identical


@pytest.mark.parametrize("method,kw", [("lora", {"rank": 3}),
                                       ("adalora", {"rank": 3}),
                                       ("ia3", {})])
def test_merge_equivalence(method, kw):
    model_cfg = _cfg()
    params = M.init_params(model_cfg, seed=1)
    adapters = _randomize(A.init_adapters(AdapterConfig(method, **kw), model_cfg, seed=2))
    merged = A.merge(adapters, params)
    for ids, tgt in [([4, 5, 6], [7, 8]), ([9, 10], [11, 12, 13])]:
        live = M.forward_logits(params, adapters, ids, tgt).data
        folded = M.forward_logits(merged, None, ids, tgt).data
        np.testing.assert_allclose(folded, live, atol=1e-9)


def test_merge_is_pure():
    model_cfg = _cfg()
    params = M.init_params(model_cfg, seed=1)
    before = {name: t.data.copy() for name, t in params.named_tensors()}
    adapters = _randomize(A.init_adapters(AdapterConfig("ia3"), model_cfg, seed=2))
    merged = A.merge(adapters, params)
    for name, t in params.named_tensors():
        np.testing.assert_array_equal(t.data, before[name])
    assert merged is not params


def test_rank_one_reconstruction():
    model_cfg = _cfg()
    params = M.init_params(model_cfg, seed=0)
    adapters = A.init_adapters(AdapterConfig("lora", rank=1), model_cfg)
    site = next(iter(adapters.sites))
    st = adapters.sites[site]
    u = np.arange(1.0, st.A.data.shape[0] + 1)
    w = np.arange(1.0, st.B.data.shape[1] + 1) * 0.1
    st.A.data[:, 0] = u
    st.B.data[0, :] = w
    eff = A.effective_weight(params.weights[site], st)
    np.testing.assert_allclose(eff.data, params.weights[site].data + np.outer(u, w), atol=1e-12)


def test_effective_weight_rejects_activation_scaling():
    adapters = A.init_adapters(AdapterConfig("ia3"), _cfg())
    st = next(iter(adapters.sites.values()))
    with pytest.raises(UsageError):
        A.effective_weight(Tensor(np.zeros((8, 8))), st)


# --- regularization and pruning ---------------------------------------------

def test_regularizer_is_l1_of_scalings():
    model_cfg = _cfg()
    ada = _randomize(A.init_adapters(AdapterConfig("adalora", rank=2), model_cfg))
    expected = sum(np.abs(st.alpha.data).sum() for st in ada.sites.values())
    assert abs(A.regularizer(ada).item() - expected) < 1e-12
    assert A.regularizer(A.init_adapters(AdapterConfig("lora"), model_cfg)).item() == 0.0


def test_prune_hand_oracle():
    model_cfg = _cfg(n_enc_layers=1, n_dec_layers=1)
    ada = A.init_adapters(AdapterConfig("adalora", rank=2, budget=0.5,
                                        target_sites=("q",), layer_scope=1), model_cfg)
    # One decoder site and one cross site, rank 2 each: r_total = 4, keep 2.
    states = list(ada.sites.values())
    assert len(states) == 2
    states[0].alpha.data[:] = [0.9, -0.1]
    states[1].alpha.data[:] = [-1.5, 0.2]
    A.prune_ranks(ada)
    np.testing.assert_array_equal(states[0].alpha.data, [0.9, 0.0])
    np.testing.assert_array_equal(states[1].alpha.data, [-1.5, 0.0])
    np.testing.assert_array_equal(states[0].pruned_mask, [False, True])
    np.testing.assert_array_equal(states[1].pruned_mask, [False, True])


def test_prune_keeps_exact_ceiling_count():
    import math
    for budget in (0.3, 0.5, 1.0):
        model_cfg = _cfg()
        ada = _randomize(A.init_adapters(AdapterConfig("adalora", rank=3, budget=budget), model_cfg))
        r_total = sum(st.alpha.data.size for st in ada.sites.values())
        A.prune_ranks(ada)
        surviving = sum(int((~st.pruned_mask).sum()) for st in ada.sites.values())
        assert surviving == math.ceil(budget * r_total)


def test_prune_is_idempotent_and_equivalent_to_masking():
    model_cfg = _cfg()
    ada = _randomize(A.init_adapters(AdapterConfig("adalora", rank=3, budget=0.5), model_cfg))
    params = M.init_params(model_cfg, seed=1)
    # Reference: manually zero the alphas that pruning should remove.
    ref = _randomize(A.init_adapters(AdapterConfig("adalora", rank=3, budget=0.5), model_cfg))
    A.prune_ranks(ada)
    for st, rt in zip(ada.sites.values(), ref.sites.values()):
        rt.alpha.data[st.pruned_mask] = 0.0
        rt.pruned_mask[:] = False
    ids, tgt = [4, 5, 6], [7, 8]
    pruned_out = M.forward_logits(params, ada, ids, tgt).data
    masked_out = M.forward_logits(params, ref, ids, tgt).data
    np.testing.assert_allclose(pruned_out, masked_out, atol=1e-9)
    masks = [st.pruned_mask.copy() for st in ada.sites.values()]
    A.prune_ranks(ada)
    for st, m in zip(ada.sites.values(), masks):
        np.testing.assert_array_equal(st.pruned_mask, m)


def test_pruned_components_resist_gradient_updates():
    model_cfg = _cfg()
    ada = _randomize(A.init_adapters(AdapterConfig("adalora", rank=2, budget=0.5), model_cfg))
    A.prune_ranks(ada)
    for st in ada.sites.values():
        st.alpha.grad = np.ones_like(st.alpha.data)
    ada.mask_pruned_grads()
    for st in ada.sites.values():
        assert not st.alpha.grad[st.pruned_mask].any()
    for st in ada.sites.values():
        st.alpha.data[st.pruned_mask] = 0.123  # simulate optimizer drift
    ada.clamp_pruned()
    for st in ada.sites.values():
        assert not st.alpha.data[st.pruned_mask].any()


def test_prune_requires_adalora():
    with pytest.raises(UsageError):
        A.prune_ranks(A.init_adapters(AdapterConfig("lora"), _cfg()))


def test_pruned_count_excluded_from_trainable_scalars():
    model_cfg = _cfg()
    ada = _randomize(A.init_adapters(AdapterConfig("adalora", rank=2, budget=0.5), model_cfg))
    before = ada.trainable_scalar_count()
    A.prune_ranks(ada)
    pruned = sum(int(st.pruned_mask.sum()) for st in ada.sites.values())
    assert pruned > 0
    assert ada.trainable_scalar_count() == before - pruned


def test_dropout_zero_is_deterministic_and_dropout_scales():
    model_cfg = _cfg()
    params = M.init_params(model_cfg, seed=1)
    adapters = _randomize(A.init_adapters(AdapterConfig("lora", rank=2, dropout=0.5), model_cfg))
    ids, tgt = [4, 5, 6], [7, 8]
    # Without an rng the branch input passes through untouched.
    a = M.forward_logits(params, adapters, ids, tgt).data
    b = M.forward_logits(params, adapters, ids, tgt).data
    np.testing.assert_array_equal(a, b)
    # With an rng, masks differ between calls.
    c = M.forward_logits(params, adapters, ids, tgt, rng=np.random.default_rng(0)).data
    d = M.forward_logits(params, adapters, ids, tgt, rng=np.random.default_rng(1)).data
    assert np.abs(c - d).max() > 0
