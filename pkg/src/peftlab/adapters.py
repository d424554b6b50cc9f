"""Sparse adapter mechanisms: low-rank (LoRA), scaled low-rank with prunable
components (AdaLoRA), and multiplicative activation scaling ((IA)³).

All three share one contract: a freshly initialized adapter set is an exact
no-op on the base model, training touches only adapter tensors, and
weight-space states merge back into a plain parameter set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import (ACT_KINDS, ModelConfig, ModelParams, SiteId, WEIGHT_KINDS,
                    _weight_shape, activation_sites, activation_width, weight_sites)
from .tensor import Tensor, UsageError

METHODS = ("lora", "adalora", "ia3")

DEFAULT_TARGETS = {
    "lora": ("q", "v"),
    "adalora": ("q", "v"),
    "ia3": ("act_k", "act_v", "act_ffn"),
}


class ConfigError(ValueError):
    """Adapter configuration incompatible with the model architecture."""


@dataclass(frozen=True)
class AdapterConfig:
    method: str
    rank: int = 8
    target_sites: tuple[str, ...] | None = None
    # "all", or an int n meaning the last n decoder layers.
    layer_scope: int | str = "all"
    lam: float = 0.0
    budget: float = 1.0
    dropout: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.budget <= 0.0:
            raise ConfigError("budget must be positive")
        if self.budget > 1.0:
            # Budgets above 1 cannot retain more than everything: no pruning.
            object.__setattr__(self, "budget", 1.0)
        if self.target_sites is None:
            object.__setattr__(self, "target_sites", DEFAULT_TARGETS[self.method])

    def sites_for(self, model_config: ModelConfig) -> list[SiteId]:
        pool = weight_sites(model_config) if self.method in ("lora", "adalora") else activation_sites(model_config)
        allowed_kinds = WEIGHT_KINDS if self.method in ("lora", "adalora") else ACT_KINDS
        for kind in self.target_sites:
            if kind not in allowed_kinds:
                raise ConfigError(f"site kind {kind!r} not valid for method {self.method!r}")
        sites = [s for s in pool if s.kind in self.target_sites]
        if self.layer_scope != "all":
            n = int(self.layer_scope)
            if not 1 <= n <= model_config.n_dec_layers:
                raise ConfigError(f"layer scope last_{n} exceeds {model_config.n_dec_layers} decoder layers")
            cut = model_config.n_dec_layers - n
            sites = [s for s in sites if s.stack != "encoder" and s.layer >= cut]
        return sites


@dataclass
class LoraSite:
    A: Tensor
    B: Tensor
    site: SiteId


@dataclass
class AdaLoraSite:
    A: Tensor
    alpha: Tensor
    B: Tensor
    pruned_mask: np.ndarray
    site: SiteId


@dataclass
class Ia3Site:
    gamma: Tensor
    site: SiteId


class AdapterSet:
    """The trainable sparse parameters, keyed by the SiteId they attach to."""

    def __init__(self, config: AdapterConfig, model_config: ModelConfig, sites: dict):
        self.config = config
        self.model_config = model_config
        self.sites = sites

    @property
    def method(self) -> str:
        return self.config.method

    def trainable_tensors(self) -> list[Tensor]:
        out = []
        for st in self.sites.values():
            if isinstance(st, LoraSite):
                out += [st.A, st.B]
            elif isinstance(st, AdaLoraSite):
                out += [st.A, st.alpha, st.B]
            else:
                out.append(st.gamma)
        return out

    def trainable_scalar_count(self) -> int:
        n = sum(t.data.size for t in self.trainable_tensors())
        for st in self.sites.values():
            if isinstance(st, AdaLoraSite):
                n -= int(st.pruned_mask.sum())
        return n

    # --- forward hooks -------------------------------------------------

    def _branch_input(self, x: Tensor, rng) -> Tensor:
        p = self.config.dropout
        if rng is None or p <= 0.0:
            return x
        keep = (rng.random(x.shape) >= p) / (1.0 - p)
        return T.mul(x, Tensor(keep))

    def linear(self, site: SiteId, x: Tensor, w0: Tensor, rng=None) -> Tensor:
        base = T.matmul(x, w0)
        st = self.sites.get(site)
        if st is None or isinstance(st, Ia3Site):
            return base
        xin = self._branch_input(x, rng)
        if isinstance(st, LoraSite):
            branch = T.matmul(T.matmul(xin, st.A), st.B)
        else:
            branch = T.matmul(T.mul(T.matmul(xin, st.A), st.alpha), st.B)
        return T.add(base, branch)

    def scale_site(self, site: SiteId, h: Tensor) -> Tensor:
        st = self.sites.get(site)
        if st is None:
            return h
        return scale_activation(h, st)

    # --- pruning hooks used by the trainer ------------------------------

    def mask_pruned_grads(self) -> None:
        for st in self.sites.values():
            if isinstance(st, AdaLoraSite) and st.alpha.grad is not None:
                st.alpha.grad[st.pruned_mask] = 0.0

    def clamp_pruned(self) -> None:
        for st in self.sites.values():
            if isinstance(st, AdaLoraSite):
                st.alpha.data[st.pruned_mask] = 0.0


def init_adapters(config: AdapterConfig, model_config: ModelConfig, seed: int = 0) -> AdapterSet:
    """A-side Gaussian(0, 0.02), B zero, alpha one, gamma one: exact identity at init."""
    rng = np.random.default_rng(seed)
    sites: dict[SiteId, object] = {}
    for site in config.sites_for(model_config):
        if config.method == "ia3":
            width = activation_width(model_config, site)
            sites[site] = Ia3Site(Tensor(np.ones(width), requires_grad=True), site)
            continue
        d, k = _weight_shape(model_config, site)
        a = Tensor(rng.normal(0.0, 0.02, size=(d, config.rank)), requires_grad=True)
        b = Tensor(np.zeros((config.rank, k)), requires_grad=True)
        if config.method == "lora":
            sites[site] = LoraSite(a, b, site)
        else:
            alpha = Tensor(np.ones(config.rank), requires_grad=True)
            sites[site] = AdaLoraSite(a, alpha, b, np.zeros(config.rank, dtype=bool), site)
    return AdapterSet(config, model_config, sites)


def effective_weight(w0: Tensor, state) -> Tensor:
    """W0 + ΔW for weight-space states; (IA)³ has no weight-space form."""
    if isinstance(state, Ia3Site):
        raise UsageError("effective_weight is undefined for (IA)³ sites")
    if isinstance(state, AdaLoraSite):
        delta = state.A.data @ (state.alpha.data[:, None] * state.B.data)
    else:
        delta = state.A.data @ state.B.data
    if delta.shape != w0.data.shape:
        raise T.DimensionError(f"adapter update {delta.shape} does not match weight {w0.data.shape}")
    return Tensor(w0.data + delta)


def scale_activation(h: Tensor, state: Ia3Site) -> Tensor:
    if not isinstance(state, Ia3Site):
        raise UsageError("scale_activation requires an (IA)³ site")
    if state.gamma.shape[0] != h.shape[-1]:
        raise T.DimensionError(f"gamma width {state.gamma.shape[0]} vs activation {h.shape}")
    return T.mul(h, state.gamma)


def regularizer(adapters: AdapterSet) -> Tensor:
    """L1 over AdaLoRA component scalings; zero for LoRA and (IA)³."""
    if adapters.method != "adalora":
        return Tensor(0.0)
    total = None
    for st in adapters.sites.values():
        term = T.l1_norm(st.alpha)
        total = term if total is None else T.add(total, term)
    return total if total is not None else Tensor(0.0)


def prune_ranks(adapters: AdapterSet) -> AdapterSet:
    """One global magnitude-ranked prune down to ceil(budget * total rank)."""
    if adapters.method != "adalora":
        raise UsageError("prune_ranks applies to AdaLoRA only")
    states = [st for st in adapters.sites.values()]
    r_total = sum(st.alpha.data.size for st in states)
    keep_n = math.ceil(adapters.config.budget * r_total)
    entries = []
    for si, st in enumerate(states):
        for ci in range(st.alpha.data.size):
            entries.append((-abs(st.alpha.data[ci]), si, ci))
    entries.sort()
    kept = set((si, ci) for _, si, ci in entries[:keep_n])
    for si, st in enumerate(states):
        for ci in range(st.alpha.data.size):
            if (si, ci) not in kept:
                st.pruned_mask[ci] = True
                st.alpha.data[ci] = 0.0
    return adapters


def merge(adapters: AdapterSet, params: ModelParams) -> ModelParams:
    """Fold adapters into a fresh parameter set; pure in (adapters, params).

    (IA)³ k/v scalings fold into the matching projection columns; the FFN
    scaling acts after the nonlinearity and is retained as an explicit
    per-site scaling carried by the returned parameters.
    """
    weights = {s: Tensor(w.data.copy()) for s, w in params.weights.items()}
    norms = {k: Tensor(v.data.copy()) for k, v in params.norms.items()}
    scalings = {s: g.copy() for s, g in params.ffn_scalings.items()}
    for site, st in adapters.sites.items():
        if isinstance(st, Ia3Site):
            if site.kind == "act_ffn":
                scalings[site] = st.gamma.data.copy()
            else:
                proj = SiteId(site.stack, site.layer, site.kind.removeprefix("act_"))
                weights[proj] = Tensor(weights[proj].data * st.gamma.data[None, :])
        else:
            weights[site] = effective_weight(params.weights[site], st)
    return ModelParams(params.config, Tensor(params.embedding.data.copy()),
                       Tensor(params.positions.data.copy()), weights, norms, scalings)


def trainable_fraction(adapters: AdapterSet, params: ModelParams) -> float:
    return adapters.trainable_scalar_count() / params.scalar_count()
