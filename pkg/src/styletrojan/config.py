"""Experiment configuration: one JSON file holding every stage's settings,
validated against module preconditions at load time and round-tripping
losslessly."""

import dataclasses
import json
from dataclasses import dataclass, field

from .detox import InjectorLossWeights
from .errors import ConfigError
from .models import CLASSIFIER_ARCHS

PIPELINE_STAGES = ("train-clean", "train-generator", "poison", "detox",
                   "evaluate", "scan", "robustness")


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**data)


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


@dataclass
class DatasetSection:
    root: str = ""
    layout: str = "folders"
    image_size: int = 32
    classes: list = None
    split_fraction: float = 0.8
    style_path: str = None
    seed: int = 0

    def validate(self):
        _require(self.layout in ("folders", "packed"), f"dataset.layout {self.layout!r} unsupported")
        _require(0 < self.split_fraction < 1, f"dataset.split_fraction {self.split_fraction} outside (0,1)")
        _require(self.image_size >= 12 and self.image_size % 4 == 0,
                 f"dataset.image_size {self.image_size} must be >= 12 and divisible by 4")
        return self


@dataclass
class ModelSection:
    arch: str = "nin-small"
    seed: int = 0

    def validate(self):
        _require(self.arch in CLASSIFIER_ARCHS, f"model.arch {self.arch!r} not in {CLASSIFIER_ARCHS}")
        return self


@dataclass
class TrainSection:
    epochs: int = 25
    lr: float = 1e-3
    batch: int = 64
    optimizer: str = "adam"

    def validate(self, where="train"):
        _require(self.epochs >= 0, f"{where}.epochs must be >= 0")
        _require(self.lr > 0, f"{where}.lr must be > 0")
        _require(self.batch >= 1, f"{where}.batch must be >= 1")
        _require(self.optimizer in ("adam", "sgd"), f"{where}.optimizer {self.optimizer!r} unknown")
        return self


@dataclass
class GanSection:
    epochs: int = 12
    batch: int = 8
    lr: float = 2e-4
    cycle_weight: float = 10.0
    identity_weight: float = 1.0
    domain_a_fraction: float = 0.1
    style_count: int = 250
    depth: int = 3
    base: int = 16

    def validate(self):
        _require(self.epochs >= 0, "gan.epochs must be >= 0")
        _require(self.batch >= 1, "gan.batch must be >= 1")
        _require(self.lr > 0, "gan.lr must be > 0")
        _require(self.cycle_weight > 0, "gan.cycle_weight must be > 0")
        _require(self.identity_weight >= 0, "gan.identity_weight must be >= 0")
        _require(0 < self.domain_a_fraction <= 1, "gan.domain_a_fraction outside (0,1]")
        _require(self.style_count >= 1, "gan.style_count must be >= 1")
        _require(self.depth >= 1, "gan.depth must be >= 1")
        return self


@dataclass
class PoisonSection:
    target_label: int = 0
    fraction: float = 0.02
    epochs: int = 12
    lr: float = 5e-4
    batch: int = 64
    optimizer: str = "adam"
    benign_margin: float = 0.03
    min_asr: float = 0.85

    def validate(self):
        _require(self.target_label >= 0, "poison.target_label must be >= 0")
        _require(0 < self.fraction <= 1, "poison.fraction outside (0,1]")
        _require(self.epochs >= 0, "poison.epochs must be >= 0")
        _require(self.lr > 0, "poison.lr must be > 0")
        _require(self.benign_margin >= 0, "poison.benign_margin must be >= 0")
        _require(0 <= self.min_asr <= 1, "poison.min_asr outside [0,1]")
        return self


@dataclass
class DetoxSection:
    rounds_max: int = 2
    importance_frac: float = 0.3
    elevation_ratio: float = 1.0
    detox_fraction: float = 0.01
    asr_threshold: float = 0.75
    asr_floor: float = 0.7
    pair_count: int = 50
    injector_epochs: int = 40
    injector_lr: float = 5e-3
    injector_base: int = 12
    weights: dict = field(default_factory=lambda: {"activate": 1.0, "preserve": 0.01,
                                                   "similarity": 1.0, "misclassify": 1.0})
    optimizer: str = "adam"
    retrain_epochs: int = 4
    retrain_lr: float = 5e-4
    max_scan_neurons: int = None

    def validate(self):
        _require(self.rounds_max >= 0, "detox.rounds_max must be >= 0")
        _require(self.importance_frac > 0, "detox.importance_frac must be > 0")
        _require(self.elevation_ratio > 0, "detox.elevation_ratio must be > 0")
        _require(0 < self.detox_fraction <= 1, "detox.detox_fraction outside (0,1]")
        _require(0 <= self.asr_threshold <= 1.01, "detox.asr_threshold outside [0,1.01]")
        _require(0 <= self.asr_floor <= 1, "detox.asr_floor outside [0,1]")
        _require(self.pair_count >= 1, "detox.pair_count must be >= 1")
        _require(self.injector_epochs >= 0, "detox.injector_epochs must be >= 0")
        _require(self.injector_lr > 0, "detox.injector_lr must be > 0")
        try:
            InjectorLossWeights(**self.weights).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"detox.weights invalid: {exc}") from exc
        return self

    def loss_weights(self):
        return InjectorLossWeights(**self.weights)


@dataclass
class ScanSection:
    methods: list = field(default_factory=lambda: ["nc", "abs"])
    nc_steps: int = 300
    nc_lr: float = 0.1
    nc_mask_weight: float = 0.02
    nc_batch: int = 32
    abs_stim_levels: list = field(default_factory=lambda: [1.0, 2.5, 5.0, 10.0, 25.0])
    abs_top_k: int = 6
    abs_re_steps: int = 150
    abs_re_lr: float = 0.1
    abs_asr_threshold: float = 0.8
    sample_count: int = 100

    def validate(self):
        _require(all(m in ("nc", "abs") for m in self.methods), "scan.methods entries must be nc|abs")
        _require(self.nc_steps >= 1, "scan.nc_steps must be >= 1")
        _require(self.nc_lr > 0, "scan.nc_lr must be > 0")
        _require(self.nc_mask_weight >= 0, "scan.nc_mask_weight must be >= 0")
        _require(len(self.abs_stim_levels) > 0 and all(l > 0 for l in self.abs_stim_levels),
                 "scan.abs_stim_levels must be positive")
        _require(self.abs_top_k >= 1, "scan.abs_top_k must be >= 1")
        _require(0 <= self.abs_asr_threshold <= 1.01, "scan.abs_asr_threshold outside [0,1.01]")
        return self


@dataclass
class RobustnessSection:
    suites: list = field(default_factory=lambda: ["adv", "smooth", "transforms"])
    adv_methods: list = field(default_factory=lambda: ["fgsm", "pgd"])
    adv_epochs: int = 3
    adv_lr: float = 5e-4
    adv_batch: int = 64
    fgsm_eps: float = 0.2
    pgd_eps: float = 5.0 / 255.0
    pgd_steps: int = 7
    pgd_step_size: float = 2.0 / 255.0
    smooth_sigmas: list = field(default_factory=lambda: [0.05, 0.1])
    smooth_n0: int = 25
    smooth_n: int = 200
    smooth_alpha: float = 0.001
    smooth_samples: int = 8
    transforms: list = field(default_factory=lambda: [
        "identity", "flip", "shrinkpad-2", "gaussian-0.02",
        "brightness-0.8", "saturation-1.2", "contrast-0.8"])

    def validate(self):
        _require(all(s in ("adv", "smooth", "transforms") for s in self.suites),
                 "robustness.suites entries must be adv|smooth|transforms")
        _require(all(m in ("fgsm", "pgd") for m in self.adv_methods),
                 "robustness.adv_methods entries must be fgsm|pgd")
        _require(self.fgsm_eps >= 0, "robustness.fgsm_eps must be >= 0")
        _require(self.pgd_eps > 0 and self.pgd_step_size > 0 and self.pgd_steps >= 1,
                 "robustness pgd settings must be positive")
        _require(all(s > 0 for s in self.smooth_sigmas), "robustness.smooth_sigmas must be > 0")
        _require(0 < self.smooth_n0 <= self.smooth_n, "robustness needs 0 < smooth_n0 <= smooth_n")
        _require(0 < self.smooth_alpha < 1, "robustness.smooth_alpha outside (0,1)")
        for name in self.transforms:
            _validate_transform_name(name)
        return self


def _validate_transform_name(name):
    if name in ("identity", "flip"):
        return
    kind, _, arg = name.partition("-")
    ok = False
    if arg:
        try:
            value = float(arg)
            if kind == "shrinkpad":
                ok = value == int(value) and value > 0
            elif kind in ("gaussian", "brightness", "saturation", "contrast"):
                ok = value >= 0
        except ValueError:
            ok = False
    if not ok:
        raise ConfigError(f"robustness.transforms entry {name!r} not recognized")


@dataclass
class ExperimentConfig:
    experiment_id: str = "experiment"
    out_dir: str = "runs"
    seed: int = 0
    stages: list = field(default_factory=lambda: list(PIPELINE_STAGES))
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train_clean: TrainSection = field(default_factory=TrainSection)
    gan: GanSection = field(default_factory=GanSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    detox: DetoxSection = field(default_factory=DetoxSection)
    scan: ScanSection = field(default_factory=ScanSection)
    robustness: RobustnessSection = field(default_factory=RobustnessSection)

    def validate(self):
        _require(bool(self.experiment_id), "experiment_id must be non-empty")
        unknown = [s for s in self.stages if s not in PIPELINE_STAGES]
        _require(not unknown, f"unknown stages {unknown}; valid: {PIPELINE_STAGES}")
        self.dataset.validate()
        self.model.validate()
        self.train_clean.validate("train_clean")
        self.gan.validate()
        self.poison.validate()
        self.detox.validate()
        self.scan.validate()
        self.robustness.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        data = dict(data)
        sections = {
            "dataset": DatasetSection, "model": ModelSection, "train_clean": TrainSection,
            "gan": GanSection, "poison": PoisonSection, "detox": DetoxSection,
            "scan": ScanSection, "robustness": RobustnessSection,
        }
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                kwargs[key] = _build(sections[key], value, key)
            elif key in ("experiment_id", "out_dir", "seed", "stages"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            config = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return config.validate()

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path


def load_config(path):
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data)
