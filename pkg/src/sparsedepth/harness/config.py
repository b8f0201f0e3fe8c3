"""Training configuration as plain-text ``key=value`` lines."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from ..depth_grid import DEFAULT_D_MAX


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DensitySchedule:
    """``fixed:d`` draws density ``d``; ``uniform:low,high`` draws from ]low, high] per image."""

    kind: str
    low: float
    high: float

    def __post_init__(self):
        if self.kind == "fixed":
            if not 0 < self.high <= 1:
                raise ConfigError(f"fixed density must be in ]0, 1], got {self.high}")
        elif self.kind == "uniform":
            if not 0 <= self.low < self.high <= 1:
                raise ConfigError(f"uniform density range needs 0 <= low < high <= 1, got ]{self.low}, {self.high}]")
        else:
            raise ConfigError(f"unknown density schedule {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "DensitySchedule":
        kind, _, args = text.strip().partition(":")
        try:
            vals = [float(v) for v in args.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad density schedule {text!r}") from exc
        if kind == "fixed" and len(vals) == 1:
            return cls("fixed", vals[0], vals[0])
        if kind == "uniform" and len(vals) == 2:
            return cls("uniform", vals[0], vals[1])
        raise ConfigError(f"density schedule must be 'fixed:d' or 'uniform:low,high', got {text!r}")

    def sample(self, rng) -> float:
        if self.kind == "fixed":
            return self.high
        # 1 - U[0,1) lies in ]0, 1], so the draw lies in ]low, high]
        return self.low + (self.high - self.low) * (1.0 - rng.random())

    def __str__(self):
        return f"fixed:{self.high:g}" if self.kind == "fixed" else f"uniform:{self.low:g},{self.high:g}"


@dataclass(frozen=True)
class TrainConfig:
    task: str = "depth"  # depth | seg
    arch: str = "tiny-ed"
    inputs: str = "sd"  # sd | rgb | rgb+sd
    fusion: str = "late"  # early | late (two inputs only)
    first_layer: str = "sparse"  # sparse | dense (sparse-depth branch)
    channels: tuple = (16, 32, 64)
    batchnorm: bool = False
    loss: str = "l1"  # l1 | l2 (depth task)
    density: DensitySchedule = DensitySchedule("fixed", 0.05, 0.05)
    pattern: str = "uniform"  # uniform | lidar
    cutout: bool = False
    epochs: int = 1
    max_steps: int = 0  # >0 caps the run at this many steps regardless of epochs
    train_scenes: int = 1000
    batch_size: int = 8
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    scene_seed: int = -1  # -1: derive from seed
    d_max: float = DEFAULT_D_MAX
    height: int = 64
    width: int = 64
    num_classes: int = 4
    val_scenes: int = 16
    val_every: int = 0  # steps between validations; 0 disables best-checkpoint tracking
    data: str = ""  # directory of scene files; empty means synthetic scenes
    precision: str = "float32"  # float32 | float64 training arithmetic

    def __post_init__(self):
        checks = [
            (self.task in ("depth", "seg"), f"task must be depth or seg, got {self.task!r}"),
            (self.arch == "tiny-ed", f"unknown architecture {self.arch!r}"),
            (self.inputs in ("sd", "rgb", "rgb+sd"), f"inputs must be sd, rgb or rgb+sd, got {self.inputs!r}"),
            (self.fusion in ("early", "late"), f"fusion must be early or late, got {self.fusion!r}"),
            (self.first_layer in ("sparse", "dense"), f"first_layer must be sparse or dense"),
            (self.loss in ("l1", "l2"), f"loss must be l1 or l2, got {self.loss!r}"),
            (self.pattern in ("uniform", "lidar"), f"pattern must be uniform or lidar, got {self.pattern!r}"),
            (all(c > 0 for c in self.channels) and len(self.channels) >= 1, "channels must be positive"),
            (self.epochs > 0 and self.train_scenes > 0 and self.batch_size > 0, "epochs, train_scenes and batch_size must be positive"),
            (self.lr > 0 and 0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps_adam > 0, "optimizer hyperparameters out of range"),
            (self.d_max > 0, "d_max must be positive"),
            (2 <= self.num_classes <= 16, "num_classes must be in [2, 16]"),
            (self.val_scenes >= 0 and self.val_every >= 0 and self.max_steps >= 0, "step and validation settings must be >= 0"),
            (self.precision in ("float32", "float64"), f"precision must be float32 or float64"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(self.inputs.split("+"))

    @property
    def steps(self) -> int:
        return self.epochs * -(-self.train_scenes // self.batch_size)

    @property
    def scene_pool_seed(self) -> int:
        return self.seed if self.scene_seed < 0 else self.scene_seed

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kwargs[key] = _coerce(key, types[key], value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _coerce(key, typ, value: str):
    try:
        if typ == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "tuple":
            return tuple(int(v) for v in value.split(","))
        if typ == "DensitySchedule":
            return DensitySchedule.parse(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
