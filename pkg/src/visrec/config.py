"""Layered configuration: defaults < JSON file < environment < CLI flags.

Environment keys are ``VISREC_<SECTION>_<KEY>``, e.g. ``VISREC_RECO_K_FINAL=10``.
"""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Mapping

DEFAULTS: dict[str, dict] = {
    "service": {
        "listen_addr": "127.0.0.1:8080",
        "index_path": "index.vrix",
        "pca_path": "pca.vrpc",
        "catalog_path": "catalog.jsonl",
        "request_timeout_ms": 1000,
        "max_concurrent_requests": 64,
        "queue_capacity": 10000,
        "spool_path": None,
        "request_log": None,
    },
    "reco": {
        "k_final": 24,
        "k_retrieve": 200,
        "price_ratio": 3.0,
        "include_query_category_tiers": True,
    },
    "ann": {"M": 16, "ef_construction": 200, "ef_search": 100, "seed": 0},
    "pca": {"dim": 128},
    "encoder": {
        "mode": "synthetic",
        "remote_endpoint": None,
        "output_dim": 768,
        "timeout_ms": 2000,
        "synthetic_seed": 0,
        "synthetic_noise": 0.35,
    },
    "ingest": {"lanes": 4, "dead_letter_path": None, "retry_attempts": 3, "backoff_ms": 200},
}


def _coerce(raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Mapping] | None = None,
) -> dict[str, dict]:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        for section, values in data.items():
            if section not in cfg:
                raise ValueError(f"unknown config section {section!r}")
            for key, value in values.items():
                if key not in cfg[section]:
                    raise ValueError(f"unknown config key {section}.{key}")
                cfg[section][key] = value
    env = os.environ if env is None else env
    for section, values in cfg.items():
        for key, default in DEFAULTS[section].items():
            name = f"VISREC_{section}_{key}".upper()
            if name in env:
                values[key] = _coerce(env[name], default)
    for section, values in (overrides or {}).items():
        for key, value in values.items():
            if value is not None:
                cfg[section][key] = value
    return cfg
