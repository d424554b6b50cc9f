"""Versioned JSON checkpoints for the base model and adapter states.

Serialization is deterministic (sorted keys, repr-exact floats), so saving
the same values twice yields byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .adapters import (AdaLoraSite, AdapterConfig, AdapterSet, Ia3Site,
                       LoraSite, init_adapters)
from .model import ModelConfig, ModelParams, SiteId, weight_sites, _norm_keys
from .tensor import Tensor

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _arr(t: Tensor) -> dict:
    return {"shape": list(t.data.shape), "values": t.data.reshape(-1).tolist()}


def _un_arr(d: dict) -> np.ndarray:
    return np.asarray(d["values"], dtype=np.float64).reshape(d["shape"])


def _dump(payload: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))


def _load(path, kind: str) -> dict:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    if payload.get("kind") != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, got {payload.get('kind')}")
    return payload


def model_payload(params: ModelParams) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": "model",
        "config": asdict(params.config),
        "tensors": {name: _arr(t) for name, t in params.named_tensors()},
        "ffn_scalings": {str(s): g.tolist() for s, g in params.ffn_scalings.items()},
    }


def serialize_model(params: ModelParams) -> str:
    return json.dumps(model_payload(params), sort_keys=True, separators=(",", ":"))


def save_model(params: ModelParams, path) -> None:
    _dump(model_payload(params), path)


def load_model(path) -> ModelParams:
    payload = _load(path, "model")
    config = ModelConfig(**payload["config"])
    tensors = {name: Tensor(_un_arr(d)) for name, d in payload["tensors"].items()}
    weights = {s: tensors[str(s)] for s in weight_sites(config)}
    norms = {k: tensors[k] for k in _norm_keys(config)}
    scalings = {SiteId.parse(s): np.asarray(g, dtype=np.float64)
                for s, g in payload["ffn_scalings"].items()}
    return ModelParams(config, tensors["embedding"], tensors["positions"],
                       weights, norms, scalings)


def save_adapters(adapter_set: AdapterSet, path) -> None:
    sites = {}
    for site, st in adapter_set.sites.items():
        if isinstance(st, LoraSite):
            sites[str(site)] = {"A": _arr(st.A), "B": _arr(st.B)}
        elif isinstance(st, AdaLoraSite):
            sites[str(site)] = {"A": _arr(st.A), "B": _arr(st.B),
                                "alpha": _arr(st.alpha),
                                "pruned_mask": st.pruned_mask.tolist()}
        else:
            sites[str(site)] = {"gamma": _arr(st.gamma)}
    cfg = asdict(adapter_set.config)
    cfg["target_sites"] = list(adapter_set.config.target_sites)
    payload = {"version": FORMAT_VERSION, "kind": "adapters", "config": cfg,
               "model_config": asdict(adapter_set.model_config), "sites": sites}
    _dump(payload, path)


def load_adapters(path) -> AdapterSet:
    payload = _load(path, "adapters")
    cfg_d = dict(payload["config"])
    cfg_d["target_sites"] = tuple(cfg_d["target_sites"])
    config = AdapterConfig(**cfg_d)
    model_config = ModelConfig(**payload["model_config"])
    adapter_set = init_adapters(config, model_config, seed=0)
    for site, st in adapter_set.sites.items():
        d = payload["sites"][str(site)]
        if isinstance(st, LoraSite):
            st.A.data[...] = _un_arr(d["A"])
            st.B.data[...] = _un_arr(d["B"])
        elif isinstance(st, AdaLoraSite):
            st.A.data[...] = _un_arr(d["A"])
            st.B.data[...] = _un_arr(d["B"])
            st.alpha.data[...] = _un_arr(d["alpha"])
            st.pruned_mask[...] = np.asarray(d["pruned_mask"], dtype=bool)
        else:
            st.gamma.data[...] = _un_arr(d["gamma"])
    return adapter_set
