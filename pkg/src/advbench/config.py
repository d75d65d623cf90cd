"""Run configuration: a strict YAML schema covering data, models,
training, attacks, scenarios, and output.

Unknown keys are rejected with their location (and a guess at what was
meant), every seed defaults to the run seed, and scenario model
references must resolve to a defined model.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .attacks import AttackConfig
from .errors import ConfigError
from .harness import ScenarioSpec
from .nn import ModelConfig
from .train import TrainConfig

__all__ = ["DataSection", "AttackSection", "OutputSection", "RunConfig", "load_run_config"]

DATA_ENV = "ADVBENCH_DATA"

FGSM_DEFAULT_SWEEP = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)
PGD_DEFAULT_SWEEP = (5, 10, 20)

_DATASET_SHAPES = {
    "cifar10": {"num_classes": 10, "input_channels": 3, "input_size": 32},
    "cifar100": {"num_classes": 100, "input_channels": 3, "input_size": 32},
    "fashion_mnist": {"num_classes": 10, "input_channels": 1, "input_size": 28},
}


@dataclass
class DataSection:
    name: str
    root: str | None = None
    train_per_class: int | None = None
    train_subset_seed: int = 0
    eval_count: int | None = None
    eval_seed: int = 0

    def resolve_root(self) -> Path:
        root = self.root or os.environ.get(DATA_ENV)
        if not root:
            raise ConfigError(
                f"data.root is not set and the {DATA_ENV} environment variable is empty"
            )
        return Path(root)


@dataclass
class AttackSection:
    epsilon: float = 0.2
    alpha: float = 0.01
    clip_min: float = 0.0
    clip_max: float = 1.0
    fgsm_epsilons: tuple = FGSM_DEFAULT_SWEEP
    pgd_iterations: tuple = PGD_DEFAULT_SWEEP


@dataclass
class OutputSection:
    dir: str = "runs/out"
    formats: tuple = ("csv",)
    figures: bool = True


@dataclass
class RunConfig:
    seed: int
    data: DataSection
    models: dict[str, ModelConfig]
    train: TrainConfig
    attack: AttackSection
    scenarios: list[ScenarioSpec]
    output: OutputSection
    source_text: str = ""

    def digest(self) -> str:
        return hashlib.sha256(self.source_text.encode()).hexdigest()


def _check_keys(section: dict, allowed: tuple[str, ...], where: str) -> None:
    for key in section:
        if key not in allowed:
            hint = difflib.get_close_matches(str(key), allowed, n=1)
            suffix = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"{where}: unknown key {key!r}{suffix}")


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return section[key]


def _typed(value, types, where: str):
    if not isinstance(value, types):
        names = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(f"{where}: expected {names}, got {type(value).__name__} ({value!r})")
    return value


def _parse_data(section, where="data") -> DataSection:
    _typed(section, dict, where)
    _check_keys(section, ("name", "root", "train_per_class", "train_subset_seed",
                          "eval_count", "eval_seed"), where)
    name = _typed(_require(section, "name", where), str, f"{where}.name")
    if name not in _DATASET_SHAPES:
        raise ConfigError(f"{where}.name: unknown dataset {name!r}, "
                          f"expected one of {sorted(_DATASET_SHAPES)}")
    out = DataSection(name=name)
    if "root" in section:
        out.root = _typed(section["root"], str, f"{where}.root")
    for key in ("train_per_class", "eval_count"):
        if key in section and section[key] is not None:
            setattr(out, key, _typed(section[key], int, f"{where}.{key}"))
    for key in ("train_subset_seed", "eval_seed"):
        if key in section:
            setattr(out, key, _typed(section[key], int, f"{where}.{key}"))
    return out


def _parse_model(name: str, section, dataset: str) -> ModelConfig:
    where = f"models.{name}"
    _typed(section, dict, where)
    allowed = ("family", "stages", "block_kind", "cbam", "cbam_reduction",
               "spatial_kernel", "num_classes", "input_channels", "input_size")
    _check_keys(section, allowed, where)
    shape = _DATASET_SHAPES[dataset]
    kwargs = dict(shape)
    kwargs["family"] = _typed(_require(section, "family", where), str, f"{where}.family")
    stages = _typed(_require(section, "stages", where), list, f"{where}.stages")
    parsed_stages = []
    for i, stage in enumerate(stages):
        stage = _typed(stage, list, f"{where}.stages[{i}]")
        if len(stage) != 2:
            raise ConfigError(f"{where}.stages[{i}]: expected [count, width], got {stage!r}")
        parsed_stages.append((
            _typed(stage[0], int, f"{where}.stages[{i}][0]"),
            _typed(stage[1], int, f"{where}.stages[{i}][1]"),
        ))
    kwargs["stages"] = tuple(parsed_stages)
    for key, types in (("block_kind", str), ("cbam", bool), ("cbam_reduction", int),
                       ("spatial_kernel", int), ("num_classes", int),
                       ("input_channels", int), ("input_size", int)):
        if key in section:
            kwargs[key] = _typed(section[key], types, f"{where}.{key}")
    try:
        return ModelConfig(**kwargs).validate()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_train(section, run_seed: int, where="train") -> TrainConfig:
    _typed(section, dict, where)
    allowed = ("epochs", "batch_size", "learning_rate", "momentum", "weight_decay",
               "lr_decay_epochs", "lr_decay_factor", "seed")
    _check_keys(section, allowed, where)
    kwargs = {"seed": run_seed}
    for key, types in (("epochs", int), ("batch_size", int),
                       ("learning_rate", (int, float)), ("momentum", (int, float)),
                       ("weight_decay", (int, float)), ("lr_decay_factor", (int, float)),
                       ("seed", int)):
        if key in section:
            kwargs[key] = _typed(section[key], types, f"{where}.{key}")
    if "lr_decay_epochs" in section:
        decays = _typed(section["lr_decay_epochs"], list, f"{where}.lr_decay_epochs")
        kwargs["lr_decay_epochs"] = tuple(
            _typed(e, int, f"{where}.lr_decay_epochs[{i}]") for i, e in enumerate(decays)
        )
    try:
        return TrainConfig(**kwargs).validate()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_attack(section, where="attack") -> AttackSection:
    _typed(section, dict, where)
    allowed = ("epsilon", "alpha", "clip_min", "clip_max", "fgsm_epsilons", "pgd_iterations")
    _check_keys(section, allowed, where)
    out = AttackSection()
    for key in ("epsilon", "alpha", "clip_min", "clip_max"):
        if key in section:
            setattr(out, key, float(_typed(section[key], (int, float), f"{where}.{key}")))
    if "fgsm_epsilons" in section:
        grid = _typed(section["fgsm_epsilons"], list, f"{where}.fgsm_epsilons")
        out.fgsm_epsilons = tuple(
            float(_typed(e, (int, float), f"{where}.fgsm_epsilons[{i}]"))
            for i, e in enumerate(grid)
        )
    if "pgd_iterations" in section:
        grid = _typed(section["pgd_iterations"], list, f"{where}.pgd_iterations")
        out.pgd_iterations = tuple(
            _typed(e, int, f"{where}.pgd_iterations[{i}]") for i, e in enumerate(grid)
        )
    try:
        AttackConfig(kind="pgd", epsilon=out.epsilon, alpha=out.alpha, iterations=1,
                     clip_min=out.clip_min, clip_max=out.clip_max)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return out


def _parse_scenario(i: int, section, cfg_models: dict, attack_section: AttackSection,
                    dataset: str, run_seed: int) -> ScenarioSpec:
    where = f"scenarios[{i}]"
    _typed(section, dict, where)
    _check_keys(section, ("mode", "attack", "source", "targets", "sweep", "seed"), where)
    mode = _typed(_require(section, "mode", where), str, f"{where}.mode")
    attack = _typed(_require(section, "attack", where), str, f"{where}.attack")
    source = _typed(_require(section, "source", where), str, f"{where}.source")
    if mode == "whitebox":
        targets = section.get("targets", [source])
    else:
        targets = _require(section, "targets", where)
    targets = [_typed(t, str, f"{where}.targets") for t in _typed(targets, list, f"{where}.targets")]
    for ref in [source] + targets:
        if ref not in cfg_models:
            raise ConfigError(f"{where}: model {ref!r} is not defined under 'models'")
    if "sweep" in section:
        sweep = tuple(
            _typed(v, (int, float), f"{where}.sweep[{j}]")
            for j, v in enumerate(_typed(section["sweep"], list, f"{where}.sweep"))
        )
    else:
        sweep = attack_section.fgsm_epsilons if attack == "fgsm" else attack_section.pgd_iterations
    spec = ScenarioSpec(
        dataset=dataset, attack=attack, mode=mode, source_model=source,
        target_models=tuple(targets), sweep=sweep,
        seed=_typed(section.get("seed", run_seed), int, f"{where}.seed"),
    )
    try:
        return spec.validate()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_output(section, where="output") -> OutputSection:
    _typed(section, dict, where)
    _check_keys(section, ("dir", "formats", "figures"), where)
    out = OutputSection()
    if "dir" in section:
        out.dir = _typed(section["dir"], str, f"{where}.dir")
    if "formats" in section:
        formats = _typed(section["formats"], list, f"{where}.formats")
        for f in formats:
            if f not in ("csv", "json"):
                raise ConfigError(f"{where}.formats: unknown format {f!r}")
        out.formats = tuple(formats)
    if "figures" in section:
        out.figures = _typed(section["figures"], bool, f"{where}.figures")
    return out


def load_run_config(path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid yaml ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    _check_keys(raw, ("seed", "data", "models", "train", "attack", "scenarios", "output"), str(path))

    seed = _typed(raw.get("seed", 0), int, "seed")
    if seed_override is not None:
        seed = seed_override
    data = _parse_data(_require(raw, "data", str(path)))
    models_raw = _typed(_require(raw, "models", str(path)), dict, "models")
    if not models_raw:
        raise ConfigError("models: at least one model must be defined")
    models = {name: _parse_model(name, sec, data.name) for name, sec in models_raw.items()}
    train = _parse_train(raw.get("train", {}), seed)
    attack = _parse_attack(raw.get("attack", {}))
    scenarios_raw = _typed(raw.get("scenarios", []), list, "scenarios")
    scenarios = [
        _parse_scenario(i, sec, models, attack, data.name, seed)
        for i, sec in enumerate(scenarios_raw)
    ]
    output = _parse_output(raw.get("output", {}))
    return RunConfig(seed=seed, data=data, models=models, train=train, attack=attack,
                     scenarios=scenarios, output=output, source_text=text)
