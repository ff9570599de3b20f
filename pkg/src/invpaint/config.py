"""Run configuration: a strict sectioned key/value file.

INI-style sections (data, schedule, model, train, eval). Every key has a
declared type and default; unknown sections or keys are rejected by name so
typos never pass silently. The canonical serialization of the resolved
values is hashed and embedded in every artifact the CLI writes.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from . import nets as N
from .losses import LossWeights
from .pipelines import TrainConfig
from .rng import fnv1a64
from .schedule import NoiseSchedule, make_linear_schedule
from .synth import SynthSpec


def _bool(s: str) -> bool:
    low = str(s).strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# section -> key -> (parser, default). Defaults follow the reference
# training setup (batch 32, model lr 1e-5, discriminator lr 1e-6).
SCHEMA = {
    "data": {
        "resolution": (int, 16),
        "channels": (int, 1),
        "n_classes": (int, 4),
        "pos_jitter": (int, 2),
        "size_jitter": (int, 1),
        "intensity_jitter": (float, 0.15),
    },
    "schedule": {
        "timesteps": (int, 1000),
        "beta_start": (float, 1e-4),
        "beta_end": (float, 0.02),
    },
    "model": {
        "teacher_channels": (int, 32),
        "gen_channels": (int, 16),
        "emb_width": (int, 32),
        "nonlin": (str, "silu"),
        "disc_head_width": (int, 8),
        "disc_heads": (int, 3),
    },
    "train": {
        "batch": (int, 32),
        "teacher_steps": (int, 2000),
        "distill_steps": (int, 800),
        "inverter_steps": (int, 800),
        "lr": (float, 1e-5),
        "lr_final": (float, 0.0),  # 0 disables cosine decay
        "ema_decay": (float, 0.0),  # 0 disables weight averaging
        "disc_lr": (float, 1e-6),
        "weight_decay": (float, 0.0),
        "lambda_noise": (float, 1.0),
        "lambda_image": (float, 1.0),
        "lambda_recons": (float, 1.0),
        "lambda_reg": (float, 0.5),
        "lambda_adv": (float, 0.5),
        "use_reblend": (_bool, True),
        "mask_family": (str, "mixed"),
        "coverage_min": (float, 0.1),
        "coverage_max": (float, 0.6),
        "distill_ddim_steps": (int, 32),
        "ckpt_every": (int, 1000),
        "log_every": (int, 25),
        "seed": (int, 0),
    },
    "eval": {
        "n_cases": (int, 200),
        "inpaint_steps": (int, 4),
        "invert_steps": (int, 50),
        "bins": (int, 64),
        "timing": (_bool, False),
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: tuple  # sorted ((section, key, value), ...)

    def get(self, section: str, key: str):
        for s, k, v in self.values:
            if s == section and k == key:
                return v
        raise KeyError(f"{section}.{key}")

    def canonical(self) -> str:
        return "\n".join(f"{s}.{k}={v!r}" for s, k, v in self.values)

    def hash_hex(self) -> str:
        return f"{fnv1a64(self.canonical().encode()):016x}"

    # -- typed builders -------------------------------------------------

    def synth_spec(self) -> SynthSpec:
        g = self.get
        return SynthSpec(resolution=g("data", "resolution"),
                         channels=g("data", "channels"),
                         n_classes=g("data", "n_classes"),
                         pos_jitter=g("data", "pos_jitter"),
                         size_jitter=g("data", "size_jitter"),
                         intensity_jitter=g("data", "intensity_jitter"))

    def schedule(self) -> NoiseSchedule:
        g = self.get
        return make_linear_schedule(g("schedule", "timesteps"),
                                    g("schedule", "beta_start"),
                                    g("schedule", "beta_end"))

    def _backbone(self, channels: int) -> N.BackboneConfig:
        g = self.get
        return N.BackboneConfig(in_channels=g("data", "channels"),
                                base_channels=channels,
                                emb_width=g("model", "emb_width"),
                                n_classes=g("data", "n_classes"),
                                nonlin=g("model", "nonlin"),
                                timesteps=g("schedule", "timesteps"),
                                beta_start=g("schedule", "beta_start"),
                                beta_end=g("schedule", "beta_end"))

    def teacher_cfg(self) -> N.BackboneConfig:
        return self._backbone(self.get("model", "teacher_channels"))

    def gen_cfg(self) -> N.BackboneConfig:
        return self._backbone(self.get("model", "gen_channels"))

    def disc_cfg(self) -> N.DiscConfig:
        return N.DiscConfig(head_width=self.get("model", "disc_head_width"),
                            n_heads=self.get("model", "disc_heads"))

    def weights(self) -> LossWeights:
        g = self.get
        return LossWeights(lambda_noise=g("train", "lambda_noise"),
                           lambda_image=g("train", "lambda_image"),
                           lambda_recons=g("train", "lambda_recons"),
                           lambda_reg=g("train", "lambda_reg"),
                           lambda_adv=g("train", "lambda_adv"))

    def train_cfg(self, stage: str) -> TrainConfig:
        g = self.get
        steps = g("train", f"{stage}_steps")
        return TrainConfig(
            batch=g("train", "batch"), steps=steps,
            resolution=g("data", "resolution"),
            lr=g("train", "lr"), disc_lr=g("train", "disc_lr"),
            lr_final=g("train", "lr_final") or None,
            ema_decay=g("train", "ema_decay") or None,
            weight_decay=g("train", "weight_decay"),
            weights=self.weights(), seed=g("train", "seed"),
            ckpt_every=g("train", "ckpt_every"),
            log_every=g("train", "log_every"),
            distill_ddim_steps=g("train", "distill_ddim_steps"),
            mask_coverage=(g("train", "coverage_min"),
                           g("train", "coverage_max")),
            mask_family=g("train", "mask_family"),
            use_reblend=g("train", "use_reblend"),
        )


def _resolve(raw: dict) -> RunConfig:
    vals = []
    for section, keys in SCHEMA.items():
        for key, (parse, default) in keys.items():
            if (section, key) in raw:
                text = raw.pop((section, key))
                try:
                    v = parse(text)
                except ValueError as e:
                    raise ValueError(
                        f"bad value for {section}.{key}: {e}"
                    ) from None
            else:
                v = default
            vals.append((section, key, v))
    if raw:
        s, k = next(iter(raw))
        raise ValueError(f"unknown config key: {s}.{k}")
    return RunConfig(values=tuple(sorted(vals)))


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a config file (all defaults when path is None) plus overrides.

    Overrides are "section.key=value" strings, applied after the file.
    """
    raw: dict = {}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        with open(path) as f:
            cp.read_file(f)
        for section in cp.sections():
            if section not in SCHEMA:
                raise ValueError(f"unknown config section: {section}")
            for key, val in cp.items(section):
                if key not in SCHEMA[section]:
                    raise ValueError(f"unknown config key: {section}.{key}")
                raw[(section, key)] = val
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ValueError(f"override must be section.key=value: {ov!r}")
        dotted, val = ov.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ValueError(f"unknown config key: {section}.{key}")
        raw[(section, key)] = val
    return _resolve(raw)


def default_config_text() -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default) in keys.items():
            lines.append(f"{key} = {default}")
        lines.append("")
    return "\n".join(lines)
