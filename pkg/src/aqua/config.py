"""Pipeline configuration: one YAML document layered over packaged defaults.

Every key a user writes must exist in the defaults and match its type, so a
typo fails up front with the dotted path of the offending key instead of
being silently ignored.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import AquaError, BadConfig, ConfigError
from .synth import SceneSpec
from .teacher import IndexSpec
from .train import TrainConfig
from .unet import UNetConfig

# Maps whose keys are user-defined rather than fixed by the defaults.
FREE_FORM = {"scenes.band_stats", "index.presets"}

# Config sections each stage depends on; a stage is redone when any of them changes.
STAGE_SECTIONS = {
    "synth": ("seed", "tile_size", "train_fraction", "scenes"),
    "tile": ("seed", "tile_size", "train_fraction", "scenes"),
    "teacher": ("index",),
    "train": ("seed", "index", "unet", "train"),
    "predict": ("unet", "train", "predict"),
    "baseline": ("baseline",),
    "evaluate": ("predict", "evaluate"),
    "timeseries": ("predict",),
}
STAGE_DEPENDS = {
    "synth": (),
    "tile": ("synth",),
    "teacher": ("tile",),
    "train": ("teacher",),
    "predict": ("train",),
    "baseline": ("tile",),
    "evaluate": ("predict", "baseline"),
    "timeseries": ("train",),
}


def default_document() -> dict:
    text = resources.files("aqua").joinpath("default_config.yaml").read_text()
    return yaml.safe_load(text)


def _typed(default, value, where: str):
    if default is None:
        if value is None or (isinstance(value, (int, float)) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{where}: expected a number or null, got {type(value).__name__}", key=where)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
    elif isinstance(default, dict):
        if isinstance(value, dict):
            return value
    raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__}", key=where)


def merge(default: dict, user: dict, prefix: str = "") -> dict:
    """Overlay ``user`` on ``default``, rejecting unknown keys and mistyped values."""
    out = copy.deepcopy(default)
    for key, value in user.items():
        where = f"{prefix}{key}"
        if key not in default:
            raise ConfigError(f"unknown key {where!r}", key=where)
        d = default[key]
        if isinstance(d, dict) and where not in FREE_FORM:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}", key=where)
            out[key] = merge(d, value, where + ".")
        else:
            out[key] = _typed(d, value, where)
    return out


@dataclass(frozen=True)
class PipelineConfig:
    doc: dict
    base_dir: Path

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def tile_size(self) -> int:
        return self.doc["tile_size"]

    @property
    def train_fraction(self) -> float:
        return self.doc["train_fraction"]

    def path(self, key: str) -> Path:
        p = Path(self.doc["paths"][key])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def scenes(self) -> dict:
        return self.doc["scenes"]

    @property
    def index_spec(self) -> IndexSpec:
        ix = self.doc["index"]
        return IndexSpec(ix["name"], ix["threshold"], dict(ix["presets"].get(ix["name"].upper(), {})))

    @property
    def unet(self) -> UNetConfig:
        u = self.doc["unet"]
        return UNetConfig(1, u["depth"], u["base_channels"], u["kernel"], self.tile_size)

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(**self.doc["train"], seed=self.seed, index_spec=self.index_spec)

    def section(self, name: str) -> dict:
        return self.doc[name]

    def scene_spec(self, role: str, i: int) -> SceneSpec:
        """Spec of the i-th train or test scene; seeds and cover draws derive from the global seed."""
        s = self.scenes
        role_code = {"train": 0, "test": 1}[role]
        seq = np.random.SeedSequence([self.seed, role_code, i])
        seed = int(seq.generate_state(1, np.uint64)[0] >> np.uint64(1))
        cover = float(np.random.default_rng(seq).uniform(s["water_cover_min"], s["water_cover_max"]))
        return SceneSpec(
            seed=seed,
            width=s["width"],
            height=s["height"],
            water_cover_target=cover,
            vegetated_water_fraction=s["vegetated_water_fraction"],
            speckle_looks=s["speckle_looks"],
            band_stats={c: {k: tuple(v) for k, v in b.items()} for c, b in s["band_stats"].items()},
            vegetation_fraction=s["vegetation_fraction"],
            feature_scale=s["feature_scale"],
            vegetated_margin=s["vegetated_margin"],
            noise_free=s["noise_free"],
            cloud_fraction=s["cloud_fraction"],
            pixel_size_m=s["pixel_size_m"],
        )

    def stage_hash(self, stage: str) -> str:
        """Digest of every section ``stage`` depends on, including upstream stages."""
        seen, todo, sections = set(), [stage], set()
        while todo:
            st = todo.pop()
            if st in seen:
                continue
            seen.add(st)
            sections.update(STAGE_SECTIONS[st])
            todo.extend(STAGE_DEPENDS[st])
        blob = json.dumps({k: self.doc[k] for k in sorted(sections)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _validate(cfg: PipelineConfig) -> None:
    def check(ok, key, msg):
        if not ok:
            raise ConfigError(f"{key}: {msg}", key=key)

    check(cfg.tile_size >= 1, "tile_size", "must be positive")
    check(0.0 < cfg.train_fraction < 1.0, "train_fraction", "must lie strictly between 0 and 1")
    s = cfg.scenes
    check(s["n_train_scenes"] >= 0 and s["n_test_scenes"] >= 0, "scenes", "scene counts must be >= 0")
    check(0.0 <= s["water_cover_min"] <= s["water_cover_max"] <= 1.0, "scenes.water_cover_min", "need 0 <= min <= max <= 1")
    check(bool(s["test_sites"]) and all(isinstance(v, str) for v in s["test_sites"]), "scenes.test_sites", "need a list of site names")
    check(bool(s["test_dates"]) and all(isinstance(v, str) for v in s["test_dates"]), "scenes.test_dates", "need a list of quoted date strings")
    check(s["width"] >= cfg.tile_size and s["height"] >= cfg.tile_size, "scenes.width", "scene smaller than one tile")
    for c, block in s["band_stats"].items():
        for k, v in block.items():
            check(isinstance(v, list) and len(v) == 2, f"scenes.band_stats.{c}.{k}", "expected [mean, sigma]")
    try:
        cfg.scene_spec("train", 0)
    except AquaError as exc:
        raise ConfigError(f"scenes: {exc}", key="scenes") from exc
    ix = cfg.doc["index"]
    check(ix["name"].upper() in ix["presets"], "index.name", f"no preset named {ix['name']!r}")
    for key, build in (("index", lambda: cfg.index_spec), ("unet", lambda: cfg.unet), ("train", lambda: cfg.train)):
        try:
            build()
        except (AquaError, TypeError) as exc:
            raise BadConfig(f"{key}: {exc}", key=key) from exc
    b = cfg.section("baseline")
    try:
        from .baseline import gaussian_kernel

        gaussian_kernel(b["kernel_size"], b["sigma"])
    except AquaError as exc:
        raise BadConfig(f"baseline: {exc}", key="baseline") from exc
    check(set(cfg.section("predict")["splits"]) <= {"train", "val", "test"}, "predict.splits", "unknown split")
    check(set(cfg.section("evaluate")["splits"]) <= {"train", "val", "test"}, "evaluate.splits", "unknown split")
    check(0.0 <= cfg.section("predict")["cut"] < 1.0, "predict.cut", "must lie in [0, 1)")
    check(cfg.section("evaluate")["truth"] in ("truth", "open_truth"), "evaluate.truth", "must be truth or open_truth")


def load_config(path=None, seed: int | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Read ``path`` (or only the defaults), apply ``overrides`` and ``seed``, and validate."""
    doc = default_document()
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", path=str(path)) from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}", path=str(path)) from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a mapping at top level", path=str(path))
        doc = merge(doc, user)
        base = path.resolve().parent
    if overrides:
        doc = merge(doc, overrides)
    if seed is not None:
        doc["seed"] = int(seed)
    cfg = PipelineConfig(doc, base)
    _validate(cfg)
    return cfg
