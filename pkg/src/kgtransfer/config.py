"""Declarative run configuration: one JSON document per experiment."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .distill import DistillConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .evaluation import SETTINGS
from .objective import NceConfig
from .paths import WalkConfig
from .pipeline import Settings
from .pretrain import TrainConfig

CONFIG_VERSION = 1
THREADS_ENV = "KGTRANSFER_THREADS"

SECTIONS = {
    "encoder": EncoderConfig,
    "walk": WalkConfig,
    "nce": NceConfig,
    "pretrain": TrainConfig,
    "retrain": TrainConfig,
    "distill": DistillConfig,
}


@dataclass(frozen=True)
class DataConfig:
    train: str = ""
    valid: str = ""
    test: str = ""
    background: tuple[str, ...] = ()
    alignment: tuple[str, ...] = ()
    teacher: str | None = None
    remove_leakage: bool = False


@dataclass(frozen=True)
class RulesConfig:
    max_body: int = 2
    min_confidence: float = 0.5
    min_support: int = 2
    cross_kg: bool = True


@dataclass(frozen=True)
class ProjectConfig:
    checkpoint: str | None = None
    entities: tuple[str, ...] = ()


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str | None = None
    both_directions: bool = True


@dataclass(frozen=True)
class RunConfig:
    """A fully resolved run configuration.

    ``budget`` is the linked-subgraph budget ``b`` (``None`` means the
    number of target training triplets). A top-level or command-line
    ``seed`` overrides every module seed.
    """

    setting: str
    output_dir: str
    data: DataConfig
    encoder: EncoderConfig = EncoderConfig()
    walk: WalkConfig = WalkConfig()
    nce: NceConfig = NceConfig()
    pretrain: TrainConfig = TrainConfig()
    retrain: TrainConfig = TrainConfig()
    distill: DistillConfig = DistillConfig()
    budget: int | None = None
    seed: int = 0
    threads: int = 1
    rules: RulesConfig = RulesConfig()
    eval: EvalConfig = EvalConfig()
    project: ProjectConfig = ProjectConfig()
    version: int = CONFIG_VERSION
    pretrain_given: bool = field(default=False, compare=False)

    def settings(self) -> Settings:
        return Settings(self.encoder, self.walk, self.nce, self.pretrain, self.retrain,
                        self.distill, budget=self.budget)

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("pretrain_given")
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()


class ConfigErrors(ConfigError):
    """Every violation found in one document, each prefixed by its field path."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _build(cls, values, where: str, problems: list[str]):
    if not isinstance(values, dict):
        problems.append(f"{where}: expected an object")
        return None
    names = {f.name for f in dataclasses.fields(cls)}
    for key in sorted(set(values) - names):
        problems.append(f"{where}.{key}: unknown key")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items() if k in names}
    try:
        return cls(**kwargs)
    except (ConfigError, TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be positive")
    return value


def _with_seed(section, seed: int):
    if any(f.name == "seed" for f in dataclasses.fields(section)):
        return dataclasses.replace(section, seed=seed)
    return section


def validate_config(document: dict, base_dir=None, seed: int | None = None,
                    check_paths: bool = True) -> RunConfig:
    """Check a parsed document and fill defaults.

    Raises :class:`ConfigErrors` listing every problem with its field path.
    Relative paths resolve against ``base_dir``.
    """
    if not isinstance(document, dict):
        raise ConfigErrors(["<root>: expected an object"])
    problems: list[str] = []
    known = {"version", "setting", "output_dir", "data", "budget", "seed", "threads",
             "rules", "eval", "project", *SECTIONS}
    for key in sorted(set(document) - known):
        problems.append(f"{key}: unknown key")
    version = document.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        problems.append(f"version: unsupported version {version!r}")
    setting = document.get("setting")
    if setting not in SETTINGS:
        problems.append(f"setting: must be one of {sorted(SETTINGS)}, got {setting!r}")
    output_dir = document.get("output_dir")
    if not isinstance(output_dir, str) or not output_dir:
        problems.append("output_dir: required")
    override_seed = seed is not None or "seed" in document
    run_seed = document.get("seed", 0) if seed is None else seed
    if not isinstance(run_seed, int) or isinstance(run_seed, bool):
        problems.append("seed: must be an integer")
        run_seed = 0
    threads = document.get("threads")
    if threads is None:
        try:
            threads = default_threads()
        except ConfigError as exc:
            problems.append(f"threads: {exc}")
            threads = 1
    elif not isinstance(threads, int) or threads < 1:
        problems.append("threads: must be a positive integer")
    budget = document.get("budget")
    if budget is not None and (not isinstance(budget, int) or budget < 0):
        problems.append("budget: must be a nonnegative integer or null")

    sections = {}
    for name, cls in SECTIONS.items():
        built = _build(cls, document.get(name, {}), name, problems)
        if built is not None and override_seed:
            built = _with_seed(built, run_seed)
        sections[name] = built
    data = _build(DataConfig, document.get("data", {}), "data", problems)
    rules = _build(RulesConfig, document.get("rules", {}), "rules", problems)
    ev = _build(EvalConfig, document.get("eval", {}), "eval", problems)
    proj = _build(ProjectConfig, document.get("project", {}), "project", problems)

    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def resolve(p):
        return None if p is None else str((base / p).resolve()) if not Path(p).is_absolute() else p

    if data is not None:
        data = dataclasses.replace(
            data, train=resolve(data.train) if data.train else "",
            valid=resolve(data.valid) if data.valid else "",
            test=resolve(data.test) if data.test else "",
            background=tuple(resolve(p) for p in data.background),
            alignment=tuple(resolve(p) for p in data.alignment),
            teacher=resolve(data.teacher))
        for key in ("train", "valid", "test"):
            if not getattr(data, key):
                problems.append(f"data.{key}: required")
        if setting in ("joint-lp", "pr4lp"):
            if not data.background:
                problems.append(f"data.background: required for setting {setting}")
            if len(data.alignment) != len(data.background):
                problems.append("data.alignment: need one alignment file per background KG")
        if setting == "pr4lp" and data.teacher is None and "pretrain" not in document:
            problems.append("data.teacher: pr4lp needs a teacher checkpoint or a pretrain block")
        if check_paths:
            paths = [("train", data.train), ("valid", data.valid), ("test", data.test)]
            paths += [(f"background[{i}]", p) for i, p in enumerate(data.background)]
            paths += [(f"alignment[{i}]", p) for i, p in enumerate(data.alignment)]
            if data.teacher is not None:
                paths.append(("teacher", data.teacher))
            for key, p in paths:
                if p and not Path(p).exists():
                    problems.append(f"data.{key}: path does not exist: {p}")
    if problems:
        raise ConfigErrors(problems)
    if ev is not None and ev.checkpoint:
        ev = dataclasses.replace(ev, checkpoint=resolve(ev.checkpoint))
    if proj is not None and proj.checkpoint:
        proj = dataclasses.replace(proj, checkpoint=resolve(proj.checkpoint))
    return RunConfig(setting, resolve(output_dir), data, budget=budget, seed=run_seed,
                     threads=threads, rules=rules, eval=ev, project=proj,
                     pretrain_given="pretrain" in document, **sections)


def load_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigErrors([f"<file>: config not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigErrors([f"<file>: invalid JSON at line {exc.lineno}: {exc.msg}"]) from None
    return validate_config(document, path.parent, seed)
