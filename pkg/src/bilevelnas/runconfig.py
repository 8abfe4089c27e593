"""INI run configuration for the ``search`` command.

Sections and keys (all optional; omitted keys take the library defaults)::

    [search]
    estimator = amended          ; first-order | second-order | amended | exact | brute-force
    eta = 0.1                    ; amended only
    xi =                         ; second-order only; empty means "use omega_lr"
    epochs = 50
    inner_steps = 1
    alpha_lr = 0.0003
    alpha_optimizer = adam       ; adam | sgd
    adam_beta1 = 0.5
    adam_beta2 = 0.999
    alpha_weight_decay = 0.001
    seed = 0
    dataset = two_gaussians      ; two_gaussians | concentric_rings | signal_noise_blocks
    dataset_size = 200           ; multiple of 4
    operators = none, skip_connect, linear, nonlinear
    share_cell_params = true
    input_nodes = 2
    split_input = false
    consistency = false
    two_stage = false
    edge_epochs =                ; empty means "same as epochs"
    log_every = 1

    [training]                   ; network shape and omega training, used by search
    num_cells = 2
    nodes_per_cell = 2
    feature_dim = 4
    omega_lr = 0.1
    retrain_steps = 300
    prune_edges = true

    [retrain]                    ; same keys as [training]; ignored when consistency = true

Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Any, Mapping

from .datasets import generate_dataset
from .estimators import Amended, SecondOrderDarts, parse_estimator
from .search import SearchConfig, TrainingConfig
from .supernet import OperatorKind

__all__ = ["CONFIG_DIR", "ConfigError", "packaged_config", "load_config", "parse_config", "config_to_ini", "apply_overrides"]


CONFIG_DIR = Path(__file__).with_name("configs")


class ConfigError(ValueError):
    pass


def packaged_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``"degeneration"``."""
    path = CONFIG_DIR / (name if name.endswith(".ini") else f"{name}.ini")
    if not path.is_file():
        raise ConfigError(f"no packaged config named {name!r}")
    return path


_TRAINING_KEYS = {f.name: f.type for f in dataclasses.fields(TrainingConfig)}
_SEARCH_SCALARS = {
    "epochs": int,
    "inner_steps": int,
    "alpha_lr": float,
    "alpha_optimizer": str,
    "alpha_weight_decay": float,
    "seed": int,
    "dataset": str,
    "dataset_size": int,
    "share_cell_params": bool,
    "input_nodes": int,
    "split_input": bool,
    "consistency": bool,
    "two_stage": bool,
    "log_every": int,
}
_SEARCH_KEYS = set(_SEARCH_SCALARS) | {"estimator", "eta", "xi", "adam_beta1", "adam_beta2", "operators", "edge_epochs"}
_BOOLS = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _convert(key: str, raw: str, kind) -> Any:
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            return _BOOLS[raw.lower()]
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    return raw


def _training(section: Mapping[str, str], base: TrainingConfig, name: str) -> TrainingConfig:
    unknown = set(section) - set(_TRAINING_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    values = {k: _convert(f"{name}.{k}", v, _TRAINING_KEYS[k]) for k, v in section.items()}
    return dataclasses.replace(base, **values)


def _optional_float(key: str, raw: str | None):
    if raw is None or not raw.strip():
        return None
    return _convert(key, raw, float)


def parse_config(text: str, overrides: Mapping[str, str] | None = None) -> SearchConfig:
    """Build a :class:`SearchConfig` from INI text plus ``section.key -> value`` overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for key, value in (overrides or {}).items():
        section, _, name = key.rpartition(".")
        section = section or "search"
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, str(value))

    unknown = set(parser.sections()) - {"search", "training", "retrain"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    search = dict(parser["search"]) if parser.has_section("search") else {}
    bad = set(search) - _SEARCH_KEYS
    if bad:
        raise ConfigError(f"unknown keys in [search]: {sorted(bad)}")

    kwargs: dict[str, Any] = {k: _convert(f"search.{k}", v, _SEARCH_SCALARS[k]) for k, v in search.items() if k in _SEARCH_SCALARS}
    defaults = SearchConfig()
    try:
        kwargs["estimator"] = parse_estimator(
            search.get("estimator", defaults.estimator.name),
            eta=_optional_float("search.eta", search.get("eta")),
            xi=_optional_float("search.xi", search.get("xi")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if "adam_beta1" in search or "adam_beta2" in search:
        b1, b2 = defaults.adam_betas
        kwargs["adam_betas"] = (
            _convert("search.adam_beta1", search.get("adam_beta1", str(b1)), float),
            _convert("search.adam_beta2", search.get("adam_beta2", str(b2)), float),
        )
    if "operators" in search:
        kwargs["operators"] = tuple(o.strip() for o in search["operators"].split(",") if o.strip())
    if "edge_epochs" in search and search["edge_epochs"].strip():
        kwargs["edge_epochs"] = _convert("search.edge_epochs", search["edge_epochs"], int)

    training = TrainingConfig()
    try:
        if parser.has_section("training"):
            training = _training(parser["training"], training, "training")
        kwargs["training"] = training
        consistency = kwargs.get("consistency", False)
        if parser.has_section("retrain") and not consistency:
            kwargs["retrain_config"] = _training(parser["retrain"], training, "retrain")
        config = SearchConfig(**kwargs)
        for op in config.operators:
            OperatorKind.parse(op)
        generate_dataset(config.dataset, 0, 4)  # validates the generator name
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    return config


def load_config(path: str | Path, overrides: Mapping[str, str] | None = None) -> SearchConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), overrides)


def apply_overrides(pairs) -> dict[str, str]:
    """``["key=value", ...]`` to a dict; raises :class:`ConfigError` on malformed items."""
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def config_to_ini(config: SearchConfig) -> str:
    """Fully resolved INI text; :func:`parse_config` on it gives back ``config``."""
    est = config.estimator
    lines = ["[search]", f"estimator = {est.name}"]
    if isinstance(est, Amended):
        lines.append(f"eta = {est.eta!r}")
    if isinstance(est, SecondOrderDarts) and est.xi is not None:
        lines.append(f"xi = {est.xi!r}")
    for key in _SEARCH_SCALARS:
        lines.append(f"{key} = {_ini_value(getattr(config, key))}")
    lines.append(f"adam_beta1 = {config.adam_betas[0]!r}")
    lines.append(f"adam_beta2 = {config.adam_betas[1]!r}")
    lines.append(f"operators = {', '.join(config.operators)}")
    if config.edge_epochs is not None:
        lines.append(f"edge_epochs = {config.edge_epochs}")
    sections = [("training", config.training)]
    if config.retrain_config is not None and not config.consistency:
        sections.append(("retrain", config.retrain_config))
    for name, tc in sections:
        lines += ["", f"[{name}]"]
        lines += [f"{key} = {_ini_value(value)}" for key, value in dataclasses.asdict(tc).items()]
    return "\n".join(lines) + "\n"


def _ini_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
