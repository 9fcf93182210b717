"""Experiment configuration: INI files with one section per concern.

Sections are ``experiment``, ``env`` and one per trainer (``a3c``,
``trpo``, ``ddpg``). Unknown sections and keys are rejected. A resolved
config (every default filled in) round-trips through ``to_dict`` /
``from_dict`` and is what run manifests store.
"""
import configparser
import dataclasses
import os
from dataclasses import dataclass, field

from figar.a3c import A3cConfig
from figar.ddpg import DdpgConfig
from figar.envs import ENVIRONMENTS
from figar.errors import ConfigurationError
from figar.policy import make_repetition_set
from figar.trpo import TrpoConfig

ALGORITHMS = ("figar-a3c", "figar-trpo", "figar-ddpg", "baseline-a3c", "baseline-trpo", "baseline-ddpg")
TRAINER_CONFIGS = {"a3c": A3cConfig, "trpo": TrpoConfig, "ddpg": DdpgConfig}
# policy-architecture keys that live in a trainer section but not in its config class
TRAINER_EXTRAS = {
    "a3c": {"hidden": (32,)},
    "trpo": {"hidden": (128, 64), "init_log_std": 0.0},
    "ddpg": {},
}
ENV_KEYS = {
    "corridor": ("length", "gamma", "max_primitive_steps"),
    "chainswitch": ("length", "p_slip", "gamma", "max_primitive_steps"),
    "pointmass": ("gamma", "max_primitive_steps"),
}
EXPERIMENT_KEYS = ("algorithm", "env", "repetition_set", "seed", "eval_episodes", "eval_epsilon", "output_root")
SEED_ENV_VAR = "FIGAR_SEED"
OUTPUT_ENV_VAR = "FIGAR_OUTPUT_ROOT"


@dataclass
class ExperimentConfig:
    algorithm: str
    env: str
    repetition_set: str = "figar-10"
    seed: int = 0
    eval_episodes: int = 100
    eval_epsilon: float = 0.1
    output_root: str = "runs"
    env_params: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"experiment.algorithm: unknown algorithm {self.algorithm!r}")
        if self.env not in ENVIRONMENTS:
            raise ConfigurationError(f"experiment.env: unknown environment {self.env!r}")
        if self.is_baseline:
            self.repetition_set = "baseline"
        for k in self.env_params:
            if k not in ENV_KEYS[self.env]:
                raise ConfigurationError(f"env.{k}: not a parameter of {self.env}")
        if self.eval_episodes < 1:
            raise ConfigurationError("experiment.eval_episodes: must be >= 1")
        if not (0.0 <= self.eval_epsilon <= 1.0):
            raise ConfigurationError("experiment.eval_epsilon: must lie in [0, 1]")
        discrete = self.env != "pointmass"
        if self.kind == "a3c" and not discrete:
            raise ConfigurationError(f"experiment.env: a3c needs a discrete-action environment, got {self.env}")
        if self.kind == "ddpg" and discrete:
            raise ConfigurationError(f"experiment.env: ddpg needs a continuous-action environment, got {self.env}")
        try:
            make_repetition_set(self.repetition_set, self.seed)
        except ConfigurationError as exc:
            raise ConfigurationError(f"experiment.repetition_set: {exc}") from None
        self.trainer = self._resolve_trainer(self.trainer)

    @property
    def kind(self):
        return self.algorithm.split("-", 1)[1]

    @property
    def is_baseline(self):
        return self.algorithm.startswith("baseline-")

    @property
    def W(self):
        return make_repetition_set(self.repetition_set, self.seed)

    def _resolve_trainer(self, raw):
        cls = TRAINER_CONFIGS[self.kind]
        names = {f.name for f in dataclasses.fields(cls)}
        extras = dict(TRAINER_EXTRAS[self.kind])
        kwargs = {}
        for k, v in raw.items():
            if k in extras:
                extras[k] = _coerce(v, extras[k], f"{self.kind}.{k}")
            elif k in names:
                kwargs[k] = v
            else:
                raise ConfigurationError(f"{self.kind}.{k}: unknown key")
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        for k, v in list(kwargs.items()):
            kwargs[k] = _coerce(v, defaults[k], f"{self.kind}.{k}")
        if "gamma" in self.env_params and "gamma" not in kwargs:
            kwargs["gamma"] = float(self.env_params["gamma"])
        try:
            cfg = cls(**kwargs)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{self.kind}: {exc}") from None
        return {**dataclasses.asdict(cfg), **extras}

    def trainer_config(self):
        names = {f.name for f in dataclasses.fields(TRAINER_CONFIGS[self.kind])}
        return TRAINER_CONFIGS[self.kind](**{k: v for k, v in self.trainer.items() if k in names})

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["trainer"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.trainer.items()}
        d["repetition_values"] = list(self.W)
        return d

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "repetition_values"}
        trainer = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("trainer", {}).items()}
        return cls(trainer=trainer, **d)


def _coerce(value, default, where):
    """Convert an INI string to the type of ``default``."""
    if not isinstance(value, str):
        return tuple(value) if isinstance(default, tuple) else value
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(",") if v.strip())
        if default is None:
            return None if value.strip().lower() in ("", "none") else int(value)
        return value.strip()
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {value!r}") from None


def load_config(path, environ=None):
    """Parse an INI experiment file; ``FIGAR_SEED`` / ``FIGAR_OUTPUT_ROOT`` override it."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    allowed = {"experiment", "env", *TRAINER_CONFIGS}
    for section in parser.sections():
        if section not in allowed:
            raise ConfigurationError(f"[{section}]: unknown section")
    if not parser.has_section("experiment"):
        raise ConfigurationError("[experiment]: section missing")
    exp = dict(parser["experiment"])
    for k in exp:
        if k not in EXPERIMENT_KEYS:
            raise ConfigurationError(f"experiment.{k}: unknown key")
    for k in ("algorithm", "env"):
        if k not in exp:
            raise ConfigurationError(f"experiment.{k}: required")
    kind = exp["algorithm"].split("-", 1)[-1]
    for other in TRAINER_CONFIGS:
        if other != kind and parser.has_section(other):
            raise ConfigurationError(f"[{other}]: section does not apply to {exp['algorithm']}")
    env_params = {}
    if parser.has_section("env"):
        for k, v in parser["env"].items():
            env_params[k] = _coerce(v, 0.0 if k in ("gamma", "p_slip") else 0, f"env.{k}")
    kwargs = dict(
        algorithm=exp["algorithm"].strip(),
        env=exp["env"].strip(),
        repetition_set=exp.get("repetition_set", "figar-10").strip(),
        seed=_coerce(exp.get("seed", "0"), 0, "experiment.seed"),
        eval_episodes=_coerce(exp.get("eval_episodes", "100"), 0, "experiment.eval_episodes"),
        eval_epsilon=_coerce(exp.get("eval_epsilon", "0.1"), 0.0, "experiment.eval_epsilon"),
        output_root=exp.get("output_root", "runs").strip(),
        env_params=env_params,
        trainer=dict(parser[kind]) if parser.has_section(kind) else {},
    )
    return ExperimentConfig(**apply_environment(kwargs, environ))


def apply_environment(kwargs, environ=None):
    environ = os.environ if environ is None else environ
    kwargs = dict(kwargs)
    if environ.get(SEED_ENV_VAR):
        kwargs["seed"] = _coerce(environ[SEED_ENV_VAR], 0, SEED_ENV_VAR)
    if environ.get(OUTPUT_ENV_VAR):
        kwargs["output_root"] = environ[OUTPUT_ENV_VAR]
    return kwargs
