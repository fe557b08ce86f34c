"""INI experiment configuration: parsing with typo checks, snapshot and hashing.

Layout::

    [experiment]   seed, out, eval_sequences
    [model]        architecture fields of ModelConfig
    [training]     optimisation / schedule fields of ModelConfig
    [data]         SrcdConfig fields
    [analysis]     probe and fit options

Seeds are not accepted inside ``[model]`` or ``[data]``; both are set from
the single experiment seed.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .tasks import SrcdConfig, stable_hash

TRAINING_KEYS = ("lr", "lr_floor", "consolidation_lr_scale", "batch", "steps", "lambda_e",
                 "lambda_s", "gamma", "temp_start", "temp_end", "anneal_steps", "shadow_rate",
                 "buffer_reset_steps", "log_every", "weight_decay")
SECTIONS = ("experiment", "model", "training", "data", "analysis")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisOptions:
    probe_sequences: int = 16
    probe_ridge: float = 1e-3
    powerlaw_min_count: int = 20
    powerlaw_bootstrap: int = 200
    transition_window: int = 500


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SrcdConfig = field(default_factory=SrcdConfig)
    analysis: AnalysisOptions = field(default_factory=AnalysisOptions)
    seed: int = 0
    eval_sequences: int = 64
    out: str = "runs/experiment"

    def __post_init__(self):
        # one seed drives everything
        if self.model.seed != self.seed:
            object.__setattr__(self, "model", dataclasses.replace(self.model, seed=self.seed))
        if self.data.seed != self.seed:
            object.__setattr__(self, "data", dataclasses.replace(self.data, seed=self.seed))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)

    def canonical(self) -> dict:
        """Everything that affects results (the output directory does not)."""
        return {"seed": self.seed, "eval_sequences": self.eval_sequences,
                "model": self.model.to_dict(), "data": self.data.to_dict(),
                "analysis": dataclasses.asdict(self.analysis)}

    def config_hash(self) -> str:
        return stable_hash(self.canonical())

    # INI ----------------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["experiment"] = {"seed": str(self.seed), "eval_sequences": str(self.eval_sequences),
                            "out": self.out}
        m = self.model.to_dict()
        cp["model"] = {k: _fmt(v) for k, v in m.items() if k not in TRAINING_KEYS + ("seed",)}
        cp["training"] = {k: _fmt(m[k]) for k in TRAINING_KEYS}
        cp["data"] = {k: _fmt(v) for k, v in self.data.to_dict().items() if k != "seed"}
        cp["analysis"] = {k: _fmt(v) for k, v in dataclasses.asdict(self.analysis).items()}
        buf = io.StringIO()
        buf.write(f"# config_hash={self.config_hash()}\n")
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config: {e}") from e
        unknown = [s for s in cp.sections() if s not in SECTIONS]
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        get = lambda s: dict(cp[s]) if cp.has_section(s) else {}

        exp = get("experiment")
        _check_keys("experiment", exp, ("seed", "eval_sequences", "out"))
        seed = int(exp.get("seed", 0))

        model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
        arch = get("model")
        _check_keys("model", arch, [k for k in model_fields if k not in TRAINING_KEYS + ("seed",)])
        train = get("training")
        _check_keys("training", train, TRAINING_KEYS)
        mvals = {k: _parse(model_fields[k], v) for k, v in {**arch, **train}.items()}

        data_fields = {f.name: f for f in dataclasses.fields(SrcdConfig)}
        data = get("data")
        _check_keys("data", data, [k for k in data_fields if k != "seed"])
        dvals = {k: _parse(data_fields[k], v) for k, v in data.items()}

        an_fields = {f.name: f for f in dataclasses.fields(AnalysisOptions)}
        an = get("analysis")
        _check_keys("analysis", an, list(an_fields))
        avals = {k: _parse(an_fields[k], v) for k, v in an.items()}
        try:
            return cls(ModelConfig(**mvals, seed=seed), SrcdConfig(**dvals, seed=seed),
                       AnalysisOptions(**avals), seed, int(exp.get("eval_sequences", 64)),
                       exp.get("out", "runs/experiment"))
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())


def _check_keys(section: str, got: dict, allowed) -> None:
    bad = sorted(set(got) - set(allowed))
    if bad:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(bad)}")


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(f: dataclasses.Field, raw: str):
    hint = f.type if not isinstance(f.type, str) else _resolve(f.type)
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            args = typing.get_args(hint)
            inner = args[0]
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(inner(x) for x in items)
        if hint is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return hint(raw.strip())
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from e


_TYPES = {"int": int, "float": float, "str": str, "bool": bool,
          "tuple[str, ...]": tuple[str, ...], "tuple[float, float]": tuple[float, float]}


def _resolve(name: str):
    if name not in _TYPES:
        raise ConfigError(f"unsupported config field type {name}")
    return _TYPES[name]
