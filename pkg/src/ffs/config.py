"""Plain-text run configuration.

One ``key = value`` per line, ``#`` starts a comment.  Every key has a
documented default (``DEFAULTS``); unknown keys are rejected.  Lists are
comma separated (``head_hidden = 64, 64``; an empty value means an empty
list).  The resolved configuration can be written back in the same format
and re-read to reproduce a run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .datakit import DatasetSpec
from .errors import ConfigError, InvalidArgument
from .heads import LossWeights
from .synthesis import SynthesisConfig
from .trainer import TrainConfig


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    return tuple(int(p) for p in text.split(",") if p.strip())


def _float_list(text):
    return tuple(float(p) for p in text.split(",") if p.strip())


def _opt(conv):
    def parse(text):
        return None if text.strip().lower() in ("", "none", "auto") else conv(text)
    return parse


# key -> (section, parser, default)
SCHEMA = {
    # dataset
    "generator": ("data", str, "crescents"),
    "K": ("data", int, 3),
    "d": ("data", int, 2),
    "n_per_class": ("data", int, 750),
    "n_background": ("data", int, 250),
    "n_ood": ("data", int, 500),
    "radius": ("data", float, 1.0),
    "noise": ("data", float, 0.15),
    "margin": ("data", float, 0.1),
    "ood_center": ("data", _opt(_float_list), None),
    "ood_std": ("data", float, 0.12),
    "centers": ("data", _float_list, ()),
    "data_seed": ("data", _opt(int), None),
    # training
    "seed": ("train", int, 0),
    "total_iters": ("train", int, 2000),
    "warmup_iters": ("train", _opt(int), None),
    "batch_size": ("train", int, 128),
    "lr_flow": ("train", float, 1e-3),
    "lr_heads": ("train", float, 1e-3),
    "optimizer": ("train", str, "adam"),
    "flow_variant": ("train", str, "Glow"),
    "M": ("train", int, 2),
    "H": ("train", int, 2),
    "W": ("train", int, 64),
    "head_hidden": ("train", _int_list, (64, 64)),
    "T": ("train", float, 1.0),
    "vos_ridge": ("train", float, 1e-3),
    # synthesis
    "mode": ("synthesis", str, "rejection"),
    "k": ("synthesis", int, 200),
    "s": ("synthesis", int, 1),
    "tau": ("synthesis", float, 0.5),
    "max_steps": ("synthesis", int, 500),
    "noise_scale": ("synthesis", float, 0.0),
    "freeze_delta": ("synthesis", _bool, False),
    # loss weights
    "alpha": ("weights", float, 1.0),
    "beta": ("weights", float, 1.0),
    "reg_variant": ("weights", str, "BCE"),
    "m_in": ("weights", float, -25.0),
    "m_out": ("weights", float, -5.0),
    # output
    "out_dir": ("output", str, "out"),
    "plots": ("output", _bool, True),
}

DEFAULTS = {k: v[2] for k, v in SCHEMA.items()}
SECTIONS = ("data", "train", "synthesis", "weights", "output")


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    inputs: dict = field(default_factory=dict)  # path -> sha256, for provenance

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **overrides) -> "RunConfig":
        vals = dict(self.values)
        for key, val in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}", key)
            vals[key] = SCHEMA[key][1](val) if isinstance(val, str) else val
        return RunConfig(vals, dict(self.inputs))

    # -- builders ------------------------------------------------------------

    def _build(self, cls, section, **extra):
        kwargs = {k: v for k, v in self.values.items() if SCHEMA[k][0] == section}
        kwargs.update(extra)
        try:
            return cls(**kwargs)
        except InvalidArgument as exc:
            raise ConfigError(str(exc), _blame(str(exc), kwargs)) from None

    def dataset_spec(self) -> DatasetSpec:
        kwargs = {k: v for k, v in self.values.items() if SCHEMA[k][0] == "data"}
        data_seed = kwargs.pop("data_seed")
        kwargs["seed"] = self["seed"] if data_seed is None else data_seed
        flat, d = kwargs["centers"], kwargs["d"]
        if flat:
            if len(flat) % d:
                raise ConfigError("centers: length is not a multiple of d", "centers")
            kwargs["centers"] = tuple(tuple(flat[i:i + d]) for i in range(0, len(flat), d))
        spec = DatasetSpec(**kwargs)
        try:
            spec.validate()
        except InvalidArgument as exc:
            raise ConfigError(str(exc), _blame(str(exc), kwargs)) from None
        return spec

    def synthesis_config(self) -> SynthesisConfig:
        return self._build(SynthesisConfig, "synthesis")

    def loss_weights(self) -> LossWeights:
        return self._build(LossWeights, "weights")

    def train_config(self) -> TrainConfig:
        return self._build(TrainConfig, "train", synthesis=self.synthesis_config(),
                           weights=self.loss_weights())

    def validate(self):
        self.dataset_spec()
        self.train_config()
        return self

    # -- text form ------------------------------------------------------------

    def to_text(self) -> str:
        lines = ["# resolved run configuration"]
        for section in SECTIONS:
            lines.append(f"\n# [{section}]")
            for key, (sec, _, _) in SCHEMA.items():
                if sec == section:
                    lines.append(f"{key} = {_format(self.values[key])}")
        if self.inputs:
            lines.append("\n# [inputs] sha256")
            for path, digest in sorted(self.inputs.items()):
                lines.append(f"# input {path} sha256={digest}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def _blame(message, kwargs):
    """Best guess at the key an InvalidArgument message is about."""
    head = message.split(":", 1)[0].split()[0] if message else ""
    if head in SCHEMA:
        return head
    for key in sorted(kwargs, key=len, reverse=True):
        if key in message.split() or message.startswith(key):
            return key
    return None


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    vals = dict(base.values if base is not None else DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'", None)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", key)
        try:
            vals[key] = SCHEMA[key][1](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r} ({exc})", key) from None
    return RunConfig(vals, dict(base.inputs) if base is not None else {})


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", None) from None
    return parse_text(text)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
