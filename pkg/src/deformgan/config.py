"""Experiment configuration: INI files with sections for data, model, loss
weights, training, simulation and evaluation. Every field has a default; CLI
flags override file values; the fully resolved config is written into the run
directory so no implicit defaults remain at runtime.
"""

from __future__ import annotations

import configparser
from pathlib import Path

DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "train_manifest": "",
        "val_manifest": "",
        "background_level": "-1.0",
        "background_tolerance": "1e-3",
    },
    "model": {
        "scale": "full",  # full | toy
    },
    "loss_weights": {
        "lambda_reg": "20.0",
        "lambda_smt": "10.0",
        "lambda_ic_reg": "10.0",
        "lambda_ic_gen": "10.0",
        "lambda_ic_joint": "10.0",
        "lambda_adv_da": "1.0",
    },
    "train": {
        "learning_rate": "1e-4",
        "adam_beta1": "0.5",
        "adam_beta2": "0.999",
        "weight_decay": "1e-4",
        "batch_size": "1",
        "epochs": "50",
        "max_steps": "0",  # 0 = no cap beyond epochs
        "seed": "0",
        "preset": "G2",
        "validation_interval": "200",
        "checkpoint_interval_epochs": "1",
        "saturating_adv": "false",
        "adv_to_regressors": "true",
    },
    "simulate": {
        "level": "3",
        "seed": "0",
    },
    "eval": {
        "data_range": "2.0",
        "direction": "x2y",
    },
}


class ConfigError(Exception):
    pass


class ExperimentConfig:
    def __init__(self, parser: configparser.ConfigParser):
        self._parser = parser

    @classmethod
    def default(cls) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        parser.read_dict(DEFAULTS)
        return cls(parser)

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        """Defaults <- file <- overrides. Override keys are 'section.option'."""
        cfg = cls.default()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            loaded = configparser.ConfigParser()
            loaded.read(path)
            for section in loaded.sections():
                if section not in DEFAULTS:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, value in loaded[section].items():
                    if key not in DEFAULTS[section]:
                        raise ConfigError(f"unknown option '{key}' in [{section}]")
                    cfg._parser[section][key] = value
        for dotted, value in (overrides or {}).items():
            section, _, key = dotted.partition(".")
            if section not in DEFAULTS or key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config option '{dotted}'")
            cfg._parser[section][key] = str(value)
        return cfg

    def get(self, section: str, key: str) -> str:
        return self._parser[section][key]

    def getfloat(self, section: str, key: str) -> float:
        return self._parser.getfloat(section, key)

    def getint(self, section: str, key: str) -> int:
        return self._parser.getint(section, key)

    def getbool(self, section: str, key: str) -> bool:
        return self._parser.getboolean(section, key)

    def set(self, section: str, key: str, value) -> None:
        self._parser[section][key] = str(value)

    def write_resolved(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            self._parser.write(fh)
