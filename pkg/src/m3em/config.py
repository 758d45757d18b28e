"""Run configuration: flat key=value text with [section] headers.

Every key has a documented default; unknown sections or keys are rejected so
typos fail loudly.  Values are plain scalars, comma lists of ints, or the
4-tuple rectangle for the shared region.  ``#`` starts a comment.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .harness import TrainConfig
from .synthdata import DomainShift, SyntheticDatasetSpec


class UsageError(Exception):
    """Bad invocation or malformed configuration (exit code 1)."""


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    if not text.strip():
        return ()
    return tuple(int(part.strip()) for part in text.split(","))


# section -> key -> (default, parser)
SCHEMA: dict[str, dict[str, tuple[object, type | object]]] = {
    "data": {
        "seed": (7, int),
        "source_samples": (2000, int),
        "target_samples": (2000, int),
        "verb_classes": (5, int),
        "noun_classes": (5, int),
        "channels": (16, int),
        "height": (8, int),
        "width": (8, int),
        "rgb_informative": ((0, 1, 2, 3), _parse_int_list),
        "flow_informative": ((4, 5, 6, 7), _parse_int_list),
        "audio_informative": ((8, 9, 10, 11), _parse_int_list),
        "shared_region": ((2, 2, 6, 6), _parse_int_list),
        "snr": (1.0, float),
        "shift_bias": (0.8, float),
        "shift_noise_scale": (2.0, float),
        "dir": ("data", str),
    },
    "model": {
        "bottleneck_ratio": (16, int),
        "pyramid_levels": (2, int),
        "latent_channels": (0, int),
        "disc_hidden": (0, int),
        "pearson_mode": ("centered", str),
    },
    "train": {
        "epochs": (30, int),
        "batch_size": (32, int),
        "learning_rate": (0.05, float),
        "momentum": (0.9, float),
        "lambda_y": (1.0, float),
        "lambda_d": (1.0, float),
        "seed": (7, int),
        "ablation": ("full", str),
    },
    "eval": {
        "split": ("target", str),
    },
    "output": {
        "dir": ("out", str),
        "figures": (True, _parse_bool),
    },
}


@dataclass
class RunConfig:
    data: SyntheticDatasetSpec
    train: TrainConfig
    data_dir: str = "data"
    out_dir: str = "out"
    eval_split: str = "target"
    figures: bool = True
    raw: dict[str, dict[str, object]] = field(default_factory=dict)

    def resolve_dir(self, base: str, which: str) -> str:
        path = self.data_dir if which == "data" else self.out_dir
        return path if os.path.isabs(path) else os.path.join(base, path)


def parse_config_text(text: str, origin: str = "<config>") -> RunConfig:
    values: dict[str, dict[str, object]] = {
        section: {key: default for key, (default, _) in keys.items()}
        for section, keys in SCHEMA.items()
    }
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise UsageError(f"{origin}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        if section is None:
            raise UsageError(f"{origin}:{lineno}: key outside of any [section]")
        key, _, value_text = line.partition("=")
        key = key.strip()
        value_text = value_text.strip()
        if key not in SCHEMA[section]:
            raise UsageError(f"{origin}:{lineno}: unknown key {key!r} in [{section}]")
        _, parser = SCHEMA[section][key]
        try:
            values[section][key] = parser(value_text)
        except ValueError as exc:
            raise UsageError(f"{origin}:{lineno}: bad value for {key}: {exc}") from exc

    d = values["data"]
    region = d["shared_region"]
    if len(region) != 4:
        raise UsageError(f"{origin}: shared_region needs 4 integers, got {region}")
    spec = SyntheticDatasetSpec(
        seed=d["seed"],
        n_source=d["source_samples"],
        n_target=d["target_samples"],
        verb_classes=d["verb_classes"],
        noun_classes=d["noun_classes"],
        channels=d["channels"],
        height=d["height"],
        width=d["width"],
        informative={
            "rgb": d["rgb_informative"],
            "flow": d["flow_informative"],
            "audio": d["audio_informative"],
        },
        shared_region=tuple(region),
        shift=DomainShift(bias=d["shift_bias"], noise_scale=d["shift_noise_scale"]),
        snr=d["snr"],
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(f"{origin}: {exc}") from exc

    m, t = values["model"], values["train"]
    train_cfg = TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        momentum=t["momentum"],
        lambda_y=t["lambda_y"],
        lambda_d=t["lambda_d"],
        bottleneck_ratio=m["bottleneck_ratio"],
        pyramid_levels=m["pyramid_levels"],
        latent_channels=m["latent_channels"],
        disc_hidden=m["disc_hidden"],
        seed=t["seed"],
        ablation=t["ablation"],
        pearson_mode=m["pearson_mode"],
    )
    try:
        train_cfg.validate()
    except ValueError as exc:
        raise UsageError(f"{origin}: {exc}") from exc

    eval_split = values["eval"]["split"]
    if eval_split not in ("source", "target"):
        raise UsageError(f"{origin}: eval split must be source or target, got {eval_split!r}")

    return RunConfig(
        data=spec,
        train=train_cfg,
        data_dir=values["data"]["dir"],
        out_dir=values["output"]["dir"],
        eval_split=eval_split,
        figures=values["output"]["figures"],
        raw=values,
    )


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {os.fspath(path)!r}: {exc}") from exc
    return parse_config_text(text, origin=os.fspath(path))


def default_config_text() -> str:
    """A config file listing every key with its default value."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (default, _) in keys.items():
            if isinstance(default, tuple):
                rendered = ",".join(str(v) for v in default)
            elif isinstance(default, bool):
                rendered = "true" if default else "false"
            else:
                rendered = str(default)
            lines.append(f"{key} = {rendered}")
        lines.append("")
    return "\n".join(lines)
