"""Strict JSON run configuration shared by every CLI subcommand."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .augment import AugSpec, default_roster
from .data import SplitSpec, SyntheticSpec
from .model import ThreeDNetConfig, TwoDNetConfig
from .robustness import PerturbationGrid, canonical_family, default_grids
from .training import TrainConfig


class ConfigError(ValueError):
    """A bad configuration value; ``key`` is the dotted path to it."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass
class SyntheticSection:
    num_classes: int = 4
    per_class: Union[int, list] = 50
    size: int = 32
    noise: float = 0.08
    phase_jitter: float = 0.6


@dataclass
class DataSection:
    source: str = "synthetic"
    path: Optional[str] = None
    image_size: Optional[int] = None
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    train_fraction: float = 0.7
    stratified: bool = True
    oversample: bool = False


@dataclass
class ModelSection:
    width_multiplier: float = 0.125
    blocks_per_stage: list = field(default_factory=lambda: [2, 2, 2, 2])
    hidden_width: Optional[int] = None
    alpha: float = 0.5
    beta: float = 0.5


@dataclass
class TrainSection:
    lam: float = field(default=0.5, metadata={"alias": "lambda"})
    lr: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 5
    val_fraction: float = 0.1
    loss_mode: str = "multiclass_ce"
    objective: str = "hybrid"
    mse_stop_grad: str = "none"
    lr_plateau_patience: Optional[int] = 2
    stop_at_perfect: bool = True
    save_hybrid: bool = False


@dataclass
class AugmentSection:
    roster: Optional[list] = None
    roster_size: int = 9


@dataclass
class SweepSection:
    families: Optional[list] = None
    grids: Optional[dict] = None
    head: str = "2d"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output_dir: str = "out"
    seed: int = 0

    # -- derived objects --------------------------------------------------------------

    def roster(self) -> list[AugSpec]:
        if self.augment.roster is None:
            return default_roster(self.augment.roster_size)
        return [AugSpec.coerce(a) for a in self.augment.roster]

    def synthetic_spec(self) -> SyntheticSpec:
        s = self.data.synthetic
        per = s.per_class if isinstance(s.per_class, int) else tuple(s.per_class)
        return SyntheticSpec(s.num_classes, per, s.size, s.noise, s.phase_jitter, self.seed)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.data.train_fraction, self.data.stratified, self.seed)

    def two_d_config(self, num_classes: int) -> TwoDNetConfig:
        return TwoDNetConfig(num_classes, self.model.width_multiplier,
                             tuple(self.model.blocks_per_stage))

    def three_d_config(self, num_classes: int) -> ThreeDNetConfig:
        return ThreeDNetConfig(num_classes, self.model.width_multiplier, self.model.hidden_width)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(lam=t.lam, alpha=self.model.alpha, beta=self.model.beta, lr=t.lr,
                           batch_size=t.batch_size, max_epochs=t.max_epochs,
                           patience=t.patience, val_fraction=t.val_fraction, seed=self.seed,
                           roster=self.roster(), loss_mode=t.loss_mode, objective=t.objective,
                           mse_stop_grad=t.mse_stop_grad,
                           lr_plateau_patience=t.lr_plateau_patience,
                           stop_at_perfect=t.stop_at_perfect)

    def grids(self) -> list[PerturbationGrid]:
        grids = {g.family: g for g in default_grids(self.seed)}
        for fam, levels in (self.sweep.grids or {}).items():
            fam = canonical_family(fam)
            grids[fam] = PerturbationGrid(fam, tuple(levels), self.seed)
        if self.sweep.families is not None:
            wanted = [canonical_family(f) for f in self.sweep.families]
            return [grids[f] for f in wanted]
        return list(grids.values())

    def validate(self) -> None:
        """Build every derived object once so bad values surface as :class:`ConfigError`."""
        checks = {
            "data": self._check_data,
            "augment.roster": self.roster,
            "train": self.train_config,
            "model": lambda: (self.two_d_config(2).widths(), self.three_d_config(2).widths()),
            "sweep": self.grids,
        }
        for key, check in checks.items():
            try:
                check()
            except ConfigError:
                raise
            except (ValueError, TypeError, KeyError) as exc:
                raise ConfigError(key, str(exc)) from exc
        if self.sweep.head not in ("2d", "hybrid"):
            raise ConfigError("sweep.head", "must be '2d' or 'hybrid'")

    def _check_data(self) -> None:
        if self.data.source not in ("synthetic", "directory"):
            raise ConfigError("data.source", "must be 'synthetic' or 'directory'")
        if self.data.source == "directory" and not self.data.path:
            raise ConfigError("data.path", "required when data.source is 'directory'")
        if self.data.image_size is not None and self.data.image_size < 1:
            raise ConfigError("data.image_size", "must be >= 1")
        self.split_spec()
        if self.data.source == "synthetic":
            self.synthetic_spec().counts()

    # -- (de)serialisation ----------------------------------------------------------------

    def to_dict(self) -> dict:
        return _dump(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _key(f: dataclasses.Field) -> str:
    return f.metadata.get("alias", f.name)


def _dump(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {_key(f): _dump(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_dump(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _dump(v) for k, v in obj.items()}
    return obj


def _coerce(value: Any, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    if origin is Union:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, key)
            except ConfigError:
                pass
        raise ConfigError(key, f"value {value!r} has the wrong type")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(key, "expected an object")
        return _load(tp, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return value
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected an object, got {value!r}")
        return value
    return value


def _load(cls, raw: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    by_key = {_key(f): f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in raw.items():
        path = f"{prefix}.{k}" if prefix else k
        if k not in by_key:
            raise ConfigError(path, "unknown key")
        f = by_key[k]
        kwargs[f.name] = _coerce(v, hints[f.name], path)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    cfg = _load(RunConfig, raw)
    cfg.validate()
    return cfg


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Parse and validate a config file; ``None`` gives the defaults."""
    if path is None:
        return config_from_dict({})
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError("", f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)
