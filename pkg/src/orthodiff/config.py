"""Flat key-value run configuration.

Config files are plain text, one ``key = value`` pair per line with ``#``
comments.  Values are parsed as JSON scalars.  Precedence when resolving:
command-line overrides > environment (``ORTHODIFF_<KEY>`` with ``.`` spelled
``__``) > config file > defaults.
"""

import hashlib
import json
import os

from .errors import ConfigurationError

ENV_PREFIX = "ORTHODIFF_"

DEFAULTS = {
    # corpus vocabulary sizes and expansion counts
    "corpus.identities": 20,
    "corpus.heldout_identities": 4,
    "corpus.poses": 8,
    "corpus.backgrounds": 10,
    "corpus.originals": 4,
    "corpus.variants_per_original": 10,
    "corpus.backgrounds_per_subject": 10,
    "corpus.image_size": 32,
    # feature extraction
    "encoder.dim": 64,
    "encoder.pretrain_steps": 200,
    "encoder.pretrain_lr": 1e-3,
    "mapper.dim": 64,
    "mapper.hidden": 64,
    "mapper.dropout": 0.1,
    # disentangler
    "expert.hidden": 64,
    "expert.dropout": 0.1,
    "decouple.mode": "sequential",
    "decouple.eps": "auto",  # 1e-12 * feature dim
    # conditioning
    "text.dim": 64,
    "align.hidden": 64,
    # diffusion
    "unet.base_channels": 32,
    "schedule.T": 100,
    "schedule.kind": "linear",
    "sampler.kind": "ddim",
    "sampler.steps": 50,
    "loss.lambda1": 0.01,
    "loss.lambda2": 0.1,
    # training
    "train.batch_size": 8,
    "train.base_lr": 1e-4,
    "train.steps": 500,
    "train.weight_decay": 0.01,
    "train.seed": 0,
    "train.checkpoint_every": 0,  # 0 = only final
    "backbone.pretrain_steps": 300,
    "backbone.pretrain_lr": 2e-4,
    # evaluation
    "eval.num_references": 8,
    "eval.sample_steps": 20,
    "eval.drift_pairs": 200,
    "eval.similarity_steps": 300,
    "eval.joint_dim": 32,
    "eval.ablate": "none",
}

_CHOICES = {
    "decouple.mode": {"sequential", "joint"},
    "schedule.kind": {"linear", "cosine"},
    "sampler.kind": {"ddpm", "ddim"},
    "eval.ablate": {"none", "bg", "pose", "both"},
}


class Config:
    """Resolved flat configuration with dotted-key access."""

    def __init__(self, values):
        unknown = set(values) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        self._values = dict(DEFAULTS)
        self._values.update(values)
        self._validate()

    def __getitem__(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigurationError(f"unknown config key: {key}") from None

    def __contains__(self, key):
        return key in self._values

    def as_dict(self):
        return dict(self._values)

    def with_overrides(self, overrides):
        merged = dict(self._values)
        merged.update(overrides)
        return Config(merged)

    def decouple_eps(self):
        """Absolute degenerate-direction threshold for projections."""
        eps = self["decouple.eps"]
        if eps == "auto":
            return 1e-12 * self["mapper.dim"]
        return float(eps)

    def _validate(self):
        v = self._values
        for key, choices in _CHOICES.items():
            if v[key] not in choices:
                raise ConfigurationError(
                    f"{key} must be one of {sorted(choices)}, got {v[key]!r}"
                )
        if v["loss.lambda1"] < 0 or v["loss.lambda2"] < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if v["train.batch_size"] < 1:
            raise ConfigurationError("train.batch_size must be >= 1")
        if v["schedule.T"] < 2:
            raise ConfigurationError("schedule.T must be >= 2")
        if v["sampler.steps"] < 1:
            raise ConfigurationError("sampler.steps must be >= 1")
        if v["corpus.heldout_identities"] >= v["corpus.identities"]:
            raise ConfigurationError(
                "corpus.heldout_identities must be smaller than corpus.identities"
            )
        if v["decouple.eps"] != "auto":
            try:
                eps = float(v["decouple.eps"])
            except (TypeError, ValueError):
                raise ConfigurationError("decouple.eps must be a number or 'auto'") from None
            if eps <= 0:
                raise ConfigurationError("decouple.eps must be positive")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare string


def parse_config_text(text):
    """Parse ``key = value`` lines into a dict (no defaults applied)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = _parse_value(value.strip())
    return values


def env_overrides(environ=None):
    """Collect ORTHODIFF_* variables; '__' in names maps to '.' in keys."""
    environ = os.environ if environ is None else environ
    values = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        values[key] = _parse_value(raw)
    return values


def load_config(path=None, overrides=None, environ=None):
    """Resolve a Config from file, environment, and explicit overrides."""
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
        values.update(parse_config_text(text))
    values.update(env_overrides(environ))
    if overrides:
        values.update(overrides)
    return Config(values)


def config_hash(config):
    """Stable sha256 over the resolved key-value mapping."""
    payload = json.dumps(config.as_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def write_config_snapshot(config, out_dir):
    """Persist the resolved config and its hash as run provenance."""
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"{k} = {json.dumps(v)}" for k, v in sorted(config.as_dict().items())]
    with open(os.path.join(out_dir, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    digest = config_hash(config)
    with open(os.path.join(out_dir, "config.sha256"), "w", encoding="utf-8") as fh:
        fh.write(digest + "\n")
    return digest
