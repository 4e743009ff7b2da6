"""Strict TOML run configuration.

Sections: [model] [data] [attack] [taylor] [train] [output].  Unknown
sections or keys are errors; missing keys fall back to the defaults below.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attacks import AttackConfig
from .losses import TaylorConfig
from .trainer import TrainConfig, default_checkpoint_epochs

DEFAULTS: dict[str, dict] = {
    "model": {"arch": "mlp-moons"},
    "data": {
        "dataset": "moons",  # moons | blobs | idx
        "n": 1500,
        "noise": 0.1,
        "test_fraction": 0.2,
        "seed": 0,
        "centers": [[0.0, 0.0], [2.0, 2.0]],
        "blob_std": 0.3,
        "images": "",
        "labels": "",
        "test_images": "",
        "test_labels": "",
        "num_classes": 10,
    },
    "attack": {
        "norm": "linf",
        "epsilon": 8 / 255,
        "step_size": 2 / 255,
        "steps": 10,
        "loss_kind": "kl_vs_clean",
        "random_start_std": 0.001,
        "clamp_range": [],  # [] = no clamp
    },
    "taylor": {
        "lambda_inv": 6.0,
        "eta": -1.0,  # negative = choose from mode
        "sigma": 0.01,
        "mc_samples": 1,
        "mode": "zeroth+first+second",
        "estimator": "appendix_d",
    },
    "train": {
        "epochs": 200,
        "batch_size": 128,
        "lr": 0.1,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "lr_drops": [100, 150],
        "lr_factor": 0.1,
        "seed": 0,
        "checkpoint_epochs": default_checkpoint_epochs(),
        "eval_attacks": ["pgd20"],
        "augment": "auto",  # auto | true | false
    },
    "output": {"dir": "runs/default"},
}

_NUMBER = (int, float)


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None, path=None):
        where = ""
        if path is not None:
            where = str(path)
        if line is not None:
            where += f":{line}:{column or 1}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line, self.column, self.path = line, column, path


def _locate(text: str, section: str, key: str | None) -> tuple[int | None, int | None]:
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"^\[\s*([^\]]+?)\s*\]", line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return no, raw.index("[") + 1
            continue
        if key is not None and current == section:
            m = re.match(r"^(\s*)(\"?)" + re.escape(key) + r"\2\s*=", raw)
            if m:
                return no, len(m.group(1)) + 1
    return None, None


def _check_type(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool) or (isinstance(default, str) and isinstance(value, str))
    if isinstance(default, float):
        return isinstance(value, _NUMBER) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str) or (default == "auto" and isinstance(value, bool))
    if isinstance(default, list):
        return isinstance(value, list)
    return True


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULTS.items()})
    source: str | None = None

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    # typed views -------------------------------------------------------

    def attack(self) -> AttackConfig:
        a = self["attack"]
        clamp = tuple(a["clamp_range"]) or None
        return AttackConfig(norm=a["norm"], epsilon=float(a["epsilon"]), step_size=float(a["step_size"]),
                            steps=a["steps"], loss_kind=a["loss_kind"],
                            random_start_std=float(a["random_start_std"]), clamp_range=clamp)

    def taylor(self) -> TaylorConfig:
        t = self["taylor"]
        eta = None if t["eta"] < 0 else float(t["eta"])
        return TaylorConfig(lambda_inv=float(t["lambda_inv"]), eta=eta, sigma=float(t["sigma"]),
                            mc_samples=t["mc_samples"], mode=t["mode"], estimator=t["estimator"])

    def train(self) -> TrainConfig:
        t = self["train"]
        aug = t["augment"]
        aug = None if aug == "auto" else bool(aug)
        return TrainConfig(arch=self["model"]["arch"], epochs=t["epochs"], batch_size=t["batch_size"],
                           lr=float(t["lr"]), momentum=float(t["momentum"]),
                           weight_decay=float(t["weight_decay"]), lr_drops=tuple(t["lr_drops"]),
                           lr_factor=float(t["lr_factor"]), attack=self.attack(), taylor=self.taylor(),
                           seed=t["seed"], checkpoint_epochs=tuple(t["checkpoint_epochs"]),
                           eval_attacks=tuple(t["eval_attacks"]), augment=aug)

    def with_seed(self, seed: int | None) -> "RunConfig":
        out = RunConfig({k: dict(v) for k, v in self.sections.items()}, self.source)
        if seed is not None:
            out.sections["train"]["seed"] = int(seed)
        return out

    def resolved(self) -> dict:
        """Sections with mode-dependent defaults filled in."""
        out = {k: dict(v) for k, v in self.sections.items()}
        out["taylor"]["eta"] = self.taylor().eta
        return out

    def to_toml(self) -> str:
        return dumps(self.resolved())

    def validate(self) -> None:
        try:
            self.train()
        except ValueError as e:
            raise ConfigError(str(e), path=self.source) from e


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {type(v).__name__}")


def dumps(sections: dict) -> str:
    lines = []
    for name, body in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {_fmt(v)}" for k, v in body.items()]
        lines.append("")
    return "\n".join(lines)


def loads(text: str, source=None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        line = getattr(e, "lineno", None)
        col = getattr(e, "colno", None)
        if line is None:
            m = re.search(r"line (\d+), column (\d+)", str(e))
            line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        msg = getattr(e, "msg", str(e))
        raise ConfigError(f"parse error: {msg}", line, col, source) from e

    cfg = RunConfig(source=source)
    for section, body in raw.items():
        if section not in DEFAULTS:
            line, col = _locate(text, section, None)
            raise ConfigError(f"unknown section [{section}]", line, col, source)
        if not isinstance(body, dict):
            line, col = _locate(text, "", section)
            raise ConfigError(f"{section} must be a table", line, col, source)
        for key, value in body.items():
            line, col = _locate(text, section, key)
            if key not in DEFAULTS[section]:
                known = ", ".join(sorted(DEFAULTS[section]))
                raise ConfigError(f"unknown key {section}.{key} (known: {known})", line, col, source)
            if not _check_type(value, DEFAULTS[section][key]):
                raise ConfigError(f"{section}.{key} has the wrong type ({type(value).__name__})", line, col, source)
            cfg.sections[section][key] = value
    cfg.validate()
    return cfg


PRESETS = ("moons-trades", "moons-taylor1", "moons-taylor12")


def preset_text(name: str) -> str:
    return resources.files("trat").joinpath("presets", f"{name}.toml").read_text(encoding="utf-8")


def resolve_path(path) -> tuple[str, str]:
    """(text, display name).  ``presets/<name>.toml`` or a bare preset name
    falls back to the packaged copy when no such file exists on disk."""
    p = Path(path)
    if p.is_file():
        return p.read_text(encoding="utf-8"), str(p)
    name = p.name[:-5] if p.name.endswith(".toml") else p.name
    if name in PRESETS and (p.parent == Path("presets") or p.parent == Path(".")):
        return preset_text(name), f"presets/{name}.toml"
    raise ConfigError(f"config file not found: {path}")


def load(path) -> RunConfig:
    text, shown = resolve_path(path)
    return loads(text, shown)
