"""YAML run configuration: schema, defaults, builders, and hashing.

A config file may set any subset of the keys below; everything else
falls back to the defaults, and unknown or mistyped keys fail loudly
with their dotted path. The resolved dict is what gets hashed into
checkpoints, so two runs agree on provenance iff their resolved
configs are byte-identical as canonical JSON.
"""

from __future__ import annotations

import copy
import hashlib
import json

import yaml

from .baselines import BaselineConfig, LagrangianRewardConfig
from .envkit import (
    grid_reachavoid_make,
    pendulum_make,
    windfield_make,
    wrap_with_control_noise,
)
from .envkit.noise import NoiseWrapperConfig
from .rcppo import Phase1Config, Phase2Config

DEFAULTS: dict = {
    "env": {
        "name": "pendulum",
        "goal_xy": [15.0, 0.0],  # windfield only
        "width": 5,  # grid only
        "height": 5,
        "hazards": [],
        "goal_cell": [0, 0],
        "noise_half_width": 0.0,
        "noise_seed": 0,
    },
    "train": {
        "total_steps": 200_000,
        "n_envs": 16,
        "epochs": 10,
        "minibatch_size": 256,
        "lr": 3e-4,
        "clip_eps": 0.2,
        "entropy_coef": 1e-2,
        "gamma": 0.99,
        "lam": 0.95,
        "gae_mode": "renormalized",
        "z_min": -1.0,
        "z_max": None,
        "big_c": None,
        "hidden": [256, 256],
        "init_log_std": 0.0,
        "seed": 0,
    },
    "phase2": {
        "total_steps": 200_000,
        "n_envs": 16,
        "epochs": 10,
        "minibatch_size": 256,
        "lr": 3e-4,
        "gamma": None,
        "gamma_eps_gap": 1.0,
        "lam": 0.95,
        "gae_mode": "renormalized",
        "seed": 1,
    },
    "baseline": {
        "total_steps": 200_000,
        "n_envs": 16,
        "epochs": 10,
        "minibatch_size": 256,
        "lr": 3e-4,
        "clip_eps": 0.2,
        "entropy_coef": 1e-2,
        "gamma": 0.99,
        "lam": 0.95,
        "hidden": [256, 256],
        "init_log_std": 0.0,
        "seed": 0,
        "reward": {
            "beta": 1.0,
            "c_fail": 20.0,
            "r_goal": 20.0,
            "p_goal": 0.0,
            "shaping_enabled": False,
            "shaping_k": 1.0,
        },
    },
    "grid_search": {
        "r_goal": [20.0],
        "p_goal": [0.0],
        "beta": [0.1, 1.0, 10.0],
        "n_eval_episodes": 50,
        "n_workers": 1,
    },
    "eval": {
        "n_episodes": 100,
        "seed": 0,
        "tol": 1e-2,
    },
}

# dotted paths where None is a legal value, with the type a non-None
# value must have
_NULLABLE: dict[str, type] = {
    "train.z_max": float,
    "train.big_c": float,
    "phase2.gamma": float,
}

# fields whose entries are lists of numbers or pairs
_LIST_FIELDS = {
    "env.goal_xy": float,
    "env.hazards": list,
    "env.goal_cell": int,
    "train.hidden": int,
    "baseline.hidden": int,
    "grid_search.r_goal": float,
    "grid_search.p_goal": float,
    "grid_search.beta": float,
}


def _type_name(value) -> str:
    return type(value).__name__


def _coerce(path: str, value, default):
    if path in _NULLABLE:
        if value is None:
            return None
        want = _NULLABLE[path]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config field {path}: expected number or null, got {_type_name(value)}")
        return want(value)
    if path in _LIST_FIELDS:
        if not isinstance(value, list):
            raise ValueError(f"config field {path}: expected list, got {_type_name(value)}")
        elem = _LIST_FIELDS[path]
        out = []
        for i, v in enumerate(value):
            if elem is list:
                if not isinstance(v, list) or len(v) != 2:
                    raise ValueError(f"config field {path}[{i}]: expected [row, col] pair")
                out.append([int(v[0]), int(v[1])])
            elif elem is int:
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ValueError(f"config field {path}[{i}]: expected int, got {_type_name(v)}")
                out.append(int(v))
            else:
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ValueError(f"config field {path}[{i}]: expected number, got {_type_name(v)}")
                out.append(float(v))
        return out
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"config field {path}: expected bool, got {_type_name(value)}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"config field {path}: expected int, got {_type_name(value)}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config field {path}: expected number, got {_type_name(value)}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"config field {path}: expected string, got {_type_name(value)}")
        return value
    raise ValueError(f"config field {path}: unsupported value {value!r}")


def _merge(defaults: dict, override: dict, prefix: str = "") -> dict:
    out = {}
    for key, dval in defaults.items():
        path = f"{prefix}{key}"
        if key not in override:
            out[key] = copy.deepcopy(dval)
        elif isinstance(dval, dict):
            oval = override[key]
            if not isinstance(oval, dict):
                raise ValueError(f"config field {path}: expected mapping, got {_type_name(oval)}")
            out[key] = _merge(dval, oval, prefix=f"{path}.")
        else:
            out[key] = _coerce(path, override[key], dval)
    for key in override:
        if key not in defaults:
            raise ValueError(f"unknown config key: {prefix}{key}")
    return out


def resolve_config(raw: dict | None) -> dict:
    """Fill defaults and validate; raises ValueError naming bad fields."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ValueError("config root must be a mapping")
    return _merge(DEFAULTS, raw)


def load_config(path: str | None) -> dict:
    """Read a YAML file (or use all defaults when path is None)."""
    if path is None:
        return resolve_config({})
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return resolve_config(raw)


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON form of a resolved config."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def build_problem(cfg: dict):
    """Instantiate the configured environment, wrapping noise if asked."""
    env = cfg["env"]
    name = env["name"]
    if name == "pendulum":
        problem = pendulum_make()
    elif name == "windfield":
        problem = windfield_make(goal_xy=tuple(env["goal_xy"]))
    elif name == "grid":
        problem = grid_reachavoid_make(
            env["width"], env["height"],
            hazards=[tuple(h) for h in env["hazards"]],
            goal_cell=tuple(env["goal_cell"]),
        ).as_problem()
    else:
        raise ValueError(f"config field env.name: unknown environment {name!r}")
    if env["noise_half_width"] > 0.0:
        problem = wrap_with_control_noise(
            problem,
            NoiseWrapperConfig(
                noise_half_width=env["noise_half_width"], seed=env["noise_seed"]
            ),
        )
    return problem


def phase1_from(cfg: dict, seed: int | None = None) -> Phase1Config:
    t = cfg["train"]
    return Phase1Config(
        total_steps=t["total_steps"],
        n_envs=t["n_envs"],
        epochs=t["epochs"],
        minibatch_size=t["minibatch_size"],
        lr=t["lr"],
        clip_eps=t["clip_eps"],
        entropy_coef=t["entropy_coef"],
        gamma=t["gamma"],
        lam=t["lam"],
        gae_mode=t["gae_mode"],
        z_min=t["z_min"],
        z_max=t["z_max"],
        big_c=t["big_c"],
        hidden=tuple(t["hidden"]),
        init_log_std=t["init_log_std"],
        seed=t["seed"] if seed is None else seed,
    )


def phase2_from(cfg: dict, seed: int | None = None) -> Phase2Config:
    p = cfg["phase2"]
    return Phase2Config(
        total_steps=p["total_steps"],
        n_envs=p["n_envs"],
        epochs=p["epochs"],
        minibatch_size=p["minibatch_size"],
        lr=p["lr"],
        gamma=p["gamma"],
        gamma_eps_gap=p["gamma_eps_gap"],
        lam=p["lam"],
        gae_mode=p["gae_mode"],
        seed=p["seed"] if seed is None else seed,
    )


def baseline_from(cfg: dict, seed: int | None = None) -> BaselineConfig:
    b = cfg["baseline"]
    r = b["reward"]
    return BaselineConfig(
        reward=LagrangianRewardConfig(
            beta=r["beta"],
            c_fail=r["c_fail"],
            r_goal=r["r_goal"],
            p_goal=r["p_goal"],
            shaping_enabled=r["shaping_enabled"],
            shaping_k=r["shaping_k"],
            gamma=b["gamma"],
        ),
        total_steps=b["total_steps"],
        n_envs=b["n_envs"],
        epochs=b["epochs"],
        minibatch_size=b["minibatch_size"],
        lr=b["lr"],
        clip_eps=b["clip_eps"],
        entropy_coef=b["entropy_coef"],
        gamma=b["gamma"],
        lam=b["lam"],
        hidden=tuple(b["hidden"]),
        init_log_std=b["init_log_std"],
        seed=b["seed"] if seed is None else seed,
    )
