"""Flat dotted-key configuration.

Config files are plain text, one `key = value` per line, `#` comments.
Every key has a typed default below; unknown keys are an error so typos
fail loudly. `render()` emits the full resolved configuration in a
canonical order, and its SHA-256 is the run's config digest.
"""

import hashlib
from pathlib import Path

from .errors import ConfigError

# key -> (type, default). Types: int, float, bool, str.
SCHEMA = {
    "data.dir": (str, "data"),
    "data.train_images": (str, "train-images.idx"),
    "data.train_labels": (str, "train-labels.idx"),
    "data.test_images": (str, "test-images.idx"),
    "data.test_labels": (str, "test-labels.idx"),
    "data.checksums": (str, "sha256sums.txt"),
    "data.n_train": (int, 10000),
    "data.n_test": (int, 2000),
    "data.seed": (int, 0),

    "model.kind": (str, "senn"),

    "train.epochs": (int, 10),
    "train.batch_size": (int, 128),
    "train.lr": (float, 1e-3),
    "train.seed": (int, 0),

    "senn.n_concepts": (int, 12),
    "senn.hidden_dim": (int, 128),
    "senn.conv_channels": (str, "8,16"),
    "senn.stability_weight": (float, 2e-4),
    "senn.recon_weight": (float, 2e-5),
    "senn.gallery_m": (int, 4),

    "proto.n_prototypes": (int, 15),
    "proto.latent_dim": (int, 40),
    "proto.hidden_dim": (int, 128),
    "proto.conv_channels": (str, "8,16"),
    "proto.recon_weight": (float, 0.1),
    "proto.ground_proto_weight": (float, 0.05),
    "proto.ground_data_weight": (float, 0.05),
    "proto.squared_distances": (bool, True),

    "attack.epsilon": (float, 0.3),
    "attack.steps": (int, 100),
    "attack.step_size": (float, 0.01),
    "attack.lam": (float, 1.0),
    "attack.xi": (float, 1.0),
    "attack.alpha": (float, 0.01),
    "attack.seed": (int, 0),
    "attack.random_start": (bool, False),
    "attack.n_targets": (int, 100),
    "attack.n_examples": (int, 200),

    "lipschitz.n_points": (int, 50),
    "lipschitz.epsilon": (float, 0.3),
    "lipschitz.steps": (int, 30),
    "lipschitz.restarts": (int, 3),
    "lipschitz.seed": (int, 0),

    "report.n_cases": (int, 5),

    "run.workers": (int, 1),
}

_SEED_KEYS = ("data.seed", "train.seed", "attack.seed", "lipschitz.seed")


def _parse_value(key, text):
    typ = SCHEMA[key][0]
    text = text.strip()
    try:
        if typ is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {typ.__name__})")


class RunConfig:
    """Resolved configuration: every schema key has a typed value."""

    def __init__(self, values=None):
        self._values = {k: default for k, (_, default) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def __getitem__(self, key):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def set(self, key, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        typ = SCHEMA[key][0]
        if isinstance(value, str) and typ is not str:
            value = _parse_value(key, value)
        if typ is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, typ):
            raise ConfigError(f"{key} wants {typ.__name__}, got {type(value).__name__}")
        self._values[key] = value

    def set_master_seed(self, seed):
        for key in _SEED_KEYS:
            self.set(key, int(seed))

    def conv_channels(self, section):
        text = self[f"{section}.conv_channels"]
        try:
            channels = tuple(int(p) for p in text.split(","))
        except ValueError:
            raise ConfigError(f"{section}.conv_channels: {text!r}")
        if len(channels) != 2:
            raise ConfigError(f"{section}.conv_channels wants two integers")
        return channels

    def render(self):
        lines = []
        for key in sorted(SCHEMA):
            value = self._values[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.render().encode()).hexdigest()


def parse_config(text):
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text())
