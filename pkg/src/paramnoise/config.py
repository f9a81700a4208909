"""Experiment configuration: an INI-style file with nested sections plus flag overrides.

Sections::

    [run]      seeds, out, checkpoint_every
    [env]      name and any EnvSpec field override (width, height, episode_cap, ...)
    [trainer]  any TrainerConfig field
    [attack]   lam, mode, source, loss, episodes, trigger, rate, adversary, checkpoints
    [attack.replica]  kind, hidden, steps, explore, eval_every

Dotted section names express nesting.  Overrides use ``section.key=value``.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from .agent import ConfigError, TrainerConfig
from .envs import DEFAULT_SPECS, EnvSpec, ToyEnv, make_env

DEFAULT_LAMBDA = 1.0 / 255.0


def parse_real(text: str) -> float:
    """Reals may be written as fractions, e.g. ``1/255``."""
    text = text.strip()
    try:
        return float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number: {text!r}") from exc


def parse_int_list(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise ConfigError(f"not an integer list: {text!r}") from exc


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(name: str, text: str, default):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int) or name in ("eps_decay_steps",):
        if name == "eps_decay_steps" and text.strip().lower() in ("", "none"):
            return None
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"{name}: not an integer: {text!r}") from exc
    if isinstance(default, float):
        return parse_real(text)
    if isinstance(default, tuple) or name == "hidden":
        return tuple(parse_int_list(text))
    return text.strip()


@dataclass
class ReplicaConfig:
    # same: attacker assumes the target's architecture; plain: a noise-free DQN
    kind: str = "same"
    hidden: tuple[int, ...] | None = None
    steps: int = 50_000
    # behaviour of the observed target during replicate rollouts
    explore: float = 0.02
    eval_every: int = 5_000


@dataclass
class AttackConfig:
    lam: float = DEFAULT_LAMBDA
    mode: str = "untargeted"
    source: str = "whitebox"
    # FGSM surrogate: ce (softmax cross-entropy over Q) or neg_q
    loss: str = "ce"
    episodes: int = 100
    # fraction of the oracle-optimal return that starts a training-time attack
    trigger: float = 0.6
    rate: float = 1.0
    adversary: str = "negated"
    adversary_action: int = 0
    target_checkpoint: str = ""
    replica_checkpoint: str = ""
    states: int = 1000
    replica: ReplicaConfig = field(default_factory=ReplicaConfig)

    def validate(self) -> "AttackConfig":
        if not (self.lam >= 0.0) or self.lam == float("inf"):
            raise ConfigError(f"attack.lam must be finite and >= 0, got {self.lam}")
        if self.mode not in ("untargeted", "targeted"):
            raise ConfigError(f"attack.mode must be untargeted or targeted, got {self.mode!r}")
        if self.source not in ("whitebox", "blackbox"):
            raise ConfigError(f"attack.source must be whitebox or blackbox, got {self.source!r}")
        if self.loss not in ("ce", "neg_q"):
            raise ConfigError(f"attack.loss must be ce or neg_q, got {self.loss!r}")
        if self.episodes < 1:
            raise ConfigError("attack.episodes must be >= 1")
        if not 0.0 <= self.trigger <= 1.0:
            raise ConfigError(f"attack.trigger must be a fraction in [0, 1], got {self.trigger}")
        if not 0.0 < self.rate <= 1.0:
            raise ConfigError(f"attack.rate must be in (0, 1], got {self.rate}")
        if self.adversary not in ("negated", "fixed"):
            raise ConfigError(f"attack.adversary must be negated or fixed, got {self.adversary!r}")
        if self.replica.kind not in ("same", "plain"):
            raise ConfigError(f"attack.replica.kind must be same or plain, got {self.replica.kind!r}")
        if self.states < 1:
            raise ConfigError("attack.states must be >= 1")
        return self


@dataclass
class ExperimentConfig:
    env_name: str = "grid_pursuit"
    env_overrides: dict = field(default_factory=dict)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs/out"
    # None: at every eval point; 0: final checkpoint only
    checkpoint_every: int | None = None
    text: str = ""

    def make_env(self) -> ToyEnv:
        return make_env(self.env_name, **self.env_overrides)

    def trainer_for(self, seed: int, **changes) -> TrainerConfig:
        cfg = TrainerConfig(**{**self.trainer.as_dict(), "seed": seed, **changes})
        return cfg.validate()

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def validate(self) -> "ExperimentConfig":
        if self.env_name not in DEFAULT_SPECS:
            raise ConfigError(f"unknown environment {self.env_name!r}; choose from {sorted(DEFAULT_SPECS)}")
        try:
            self.make_env()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"env: {exc}") from exc
        self.trainer.validate()
        self.attack.validate()
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"run.seeds has duplicates: {self.seeds}")
        return self


_ENV_FIELDS = {f.name: f for f in fields(EnvSpec) if f.name != "name"}


def _section_values(parser: configparser.ConfigParser, name: str) -> dict[str, str]:
    return dict(parser.items(name)) if parser.has_section(name) else {}


def _fill(obj, values: dict[str, str], section: str, skip=()):
    known = {f.name: f for f in fields(obj)}
    for key, text in values.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        setattr(obj, key, _coerce(key, text, getattr(obj, key)))


KNOWN_SECTIONS = ("run", "env", "trainer", "attack", "attack.replica")


def apply_overrides(parser: configparser.ConfigParser, overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.rsplit(".", 1)
        if section not in KNOWN_SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key.strip(), value.strip())


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> ExperimentConfig:
    """Read ``path`` (optional), apply ``section.key=value`` overrides, and validate."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    apply_overrides(parser, list(overrides))
    for section in parser.sections():
        if section not in KNOWN_SECTIONS:
            raise ConfigError(f"unknown section [{section}]")

    cfg = ExperimentConfig()
    run = _section_values(parser, "run")
    for key in run:
        if key not in ("seeds", "seed", "out", "checkpoint_every"):
            raise ConfigError(f"[run] unknown key {key!r}")
    if "seeds" in run:
        cfg.seeds = parse_int_list(run["seeds"])
    elif "seed" in run:
        cfg.seeds = parse_int_list(run["seed"])
    cfg.out = run.get("out", cfg.out)
    if "checkpoint_every" in run:
        cfg.checkpoint_every = _coerce("checkpoint_every", run["checkpoint_every"], 0)
        if cfg.checkpoint_every < 0:
            raise ConfigError("run.checkpoint_every must be >= 0")

    env = _section_values(parser, "env")
    cfg.env_name = env.pop("name", cfg.env_name).strip()
    for key, text in env.items():
        if key not in _ENV_FIELDS:
            raise ConfigError(f"[env] unknown key {key!r}")
        try:
            cfg.env_overrides[key] = int(text)
        except ValueError as exc:
            raise ConfigError(f"[env] {key}: not an integer: {text!r}") from exc

    _fill(cfg.trainer, _section_values(parser, "trainer"), "trainer", skip=("seed",))
    try:
        cfg.trainer.__post_init__()
    except ValueError as exc:
        raise ConfigError(f"[trainer] {exc}") from exc
    _fill(cfg.attack, _section_values(parser, "attack"), "attack", skip=("replica",))
    _fill(cfg.attack.replica, _section_values(parser, "attack.replica"), "attack.replica")

    buf = io.StringIO()
    parser.write(buf)
    cfg.text = buf.getvalue()
    return cfg.validate()
