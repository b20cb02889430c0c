"""INI configuration: sections ``[model] [privacy] [linkage] [train]``."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError
from .experiments import DataConfig, ExperimentConfig, TrainConfig
from .model import ModelConfig
from .splitavg import PrivacySpec

SECTIONS = {
    "model": ModelConfig,
    "privacy": PrivacySpec,
    "linkage": DataConfig,
    "train": TrainConfig,
}
_ATTR = {"model": "model", "privacy": "privacy", "linkage": "data", "train": "train"}

HELP = {
    "model.hidden_size": "width H of every representation",
    "model.num_heads": "attention heads; must divide hidden_size",
    "model.num_blocks": "encoder and decoder blocks per party",
    "model.num_neighbors": "K, linked records per secondary party",
    "model.num_parties": "k, number of secondary parties",
    "model.key_dims": "identifier dimensions d_k",
    "model.party_dropout": "fraction r_d of secondary parties dropped per step (>= 1 survives below 1.0; 1.0 drops all)",
    "model.pe_avg_frequency": "average positional encodings every T_pe epochs (0 = never)",
    "model.aggregator_mode": "sum_avg or concat",
    "model.dynamic_mask": "learn per-record mask logits from keys",
    "model.mask_input": "mask MLP input: neighborhood (all K keys jointly), pe, raw, pe_context or raw_context",
    "model.mask_hidden": "width of both mask MLP hidden layers",
    "model.pe_max_frequency": "largest sinusoid frequency of the key encoding",
    "model.pe_init": "uniform or zero init of the learnable PE projection",
    "model.ffn_mult": "feed-forward width as a multiple of hidden_size",
    "model.dropout": "elementwise dropout inside blocks",
    "privacy.epsilon": "budget cap; training halts before exceeding it (none = no cap)",
    "privacy.delta": "DP delta",
    "privacy.noise_multiplier": "sigma; aggregate noise std is clip_norm * sigma",
    "privacy.clip_norm": "C; each party clips to C / k",
    "privacy.subsample_rate": "q, secondary pre-sampling rate per batch",
    "privacy.num_parties": "overwritten from model.num_parties",
    "privacy.enabled": "turn on clipping and noise",
    "privacy.use_mpc": "sum through additive secret sharing",
    "privacy.eval_noise": "overwritten from train.eval_noise",
    "privacy.accountant": "rdp or moments conversion",
    "linkage.source": "mnist, synthetic, or a CSV path with a label column",
    "linkage.rows": "row limit (0 = all)",
    "linkage.key_noise": "std of Gaussian noise added to every party's keys",
    "linkage.key_dims": "PCA identifier dimensions",
    "linkage.subsample_rate": "training-time pre-sampling rate of secondary rows",
    "linkage.synthetic_features": "columns of the synthetic table",
    "linkage.label_column": "label column of a CSV source",
    "linkage.primary_features": "keys (primary holds its PCA reduction) or columns",
    "linkage.key_scaling": "standard (unit variance), minmax ([-1, 1]) or none, applied before fuzzing",
    "train.epochs": "maximum epochs",
    "train.batch_size": "primary rows per step",
    "train.lr": "learning rate",
    "train.weight_decay": "decoupled weight decay",
    "train.seed": "seed (FETSIM_SEED and --seed override)",
    "train.task": "classification or regression",
    "train.early_stop_patience": "epochs without validation gain before stopping (0 = off)",
    "train.eval_noise": "add DP noise at evaluation too",
    "train.optimizer": "adam or sgd",
    "train.eval_batch_size": "rows per evaluation batch",
    "train.model": "fet, solo or top1sim",
}


def _convert(section: str, key: str, raw: str, ftype):
    text = raw.strip()
    origin = typing.get_origin(ftype)
    args = [a for a in typing.get_args(ftype) if a is not type(None)]
    if origin is typing.Union or (args and type(None) in typing.get_args(ftype)):
        if text.lower() in ("", "none", "null"):
            return None
        ftype = args[0]
    try:
        if ftype is bool:
            lowered = text.lower()
            if lowered in configparser.ConfigParser.BOOLEAN_STATES:
                return configparser.ConfigParser.BOOLEAN_STATES[lowered]
            raise ValueError(text)
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}", [f"{section}.{key}"]) from None


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if not f.name.startswith("_")}


def apply_settings(config: ExperimentConfig, settings: dict[str, dict[str, str]]) -> ExperimentConfig:
    """Apply ``{section: {key: text}}``; unknown sections or keys are all reported at once."""
    unknown = []
    for section, values in settings.items():
        if section not in SECTIONS:
            unknown.append(f"[{section}]")
            continue
        types = _field_types(SECTIONS[section])
        for key in values:
            if key not in types:
                unknown.append(f"{section}.{key}")
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}", unknown)
    for section, values in settings.items():
        target = getattr(config, _ATTR[section])
        types = _field_types(SECTIONS[section])
        for key, raw in values.items():
            setattr(target, key, _convert(section, key, raw, types[key]))
    return config


def load_config(path=None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    config = base or ExperimentConfig()
    if path is None:
        return config
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist", [str(path)])
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    settings = {s: dict(parser.items(s)) for s in parser.sections()}
    return apply_settings(config, settings)


def validate_config(config: ExperimentConfig) -> ExperimentConfig:
    from .errors import ContractError

    try:
        config.model.validate()
        config.data.validate()
        config.train.validate()
        config.privacy.num_parties = config.model.num_parties
        config.privacy.validate()
    except ConfigError:
        raise
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    if config.model.key_dims != config.data.key_dims:
        raise ConfigError("model.key_dims must equal linkage.key_dims",
                          ["model.key_dims", "linkage.key_dims"])
    return config


def dump_config(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in config.to_dict().items():
        parser[section] = {k: "none" if v is None else str(v) for k, v in values.items()}
    import io

    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_reference() -> str:
    """Markdown table of every configuration key with its defaults."""
    from .experiments import desk_config

    defaults = ExperimentConfig().to_dict()
    desk = desk_config().to_dict()
    lines = ["# Configuration reference", "",
             "Config files are INI with the sections below. Unknown keys are rejected.",
             "Command-line flags override file values. `fetsim train` and `fetsim ablate`",
             "start from the desk preset; the library dataclasses default to the full-scale",
             "values.", ""]
    for section, cls in SECTIONS.items():
        lines += [f"## [{section}]", "", "| key | type | default | desk preset | meaning |",
                  "|---|---|---|---|---|"]
        for name, ftype in _field_types(cls).items():
            tname = getattr(ftype, "__name__", str(ftype))
            tname = tname.replace("typing.", "").replace(" | ", " or ")
            lines.append(f"| `{name}` | {tname} | `{defaults[section][name]}` | "
                         f"`{desk[section][name]}` | {HELP.get(f'{section}.{name}', '')} |")
        lines.append("")
    return "\n".join(lines)
