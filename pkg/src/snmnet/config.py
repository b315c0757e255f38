"""Experiment config files: one JSON document, validated in full before any work starts.

Layout (every key optional except ``dataset``)::

    {
      "seed": 41,
      "dataset": {"synthetic": {...SynthConfig fields...}} | {"path": "data/vergara"},
      "train": {...TrainConfig fields..., "backbone": {...BackboneConfig fields...}},
      "configs": {"full": {}, "no-bn": {"use_bn": false}},
      "protocol": {...ProtocolConfig fields...},
      "output_dir": "runs/example",
      "roc_svg": true,
      "save_models": true
    }

``seed`` is the only source of randomness: it seeds the synthetic generator
and the protocol, which in turn derives every training seed. ``configs`` maps
a run name to overrides of ``train``; ``ablate`` ignores it and uses the
fixed ablation matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from snmnet.backbone import BackboneConfig
from snmnet.dataio import SynthConfig
from snmnet.errors import ConfigError, SNMError
from snmnet.evaluation.protocol import ProtocolConfig
from snmnet.train import TrainConfig

TOP_KEYS = {"seed", "dataset", "train", "configs", "protocol", "output_dir", "roc_svg", "save_models"}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    synthetic: SynthConfig | None
    data_path: Path | None
    train: TrainConfig
    configs: dict[str, TrainConfig]
    protocol: ProtocolConfig
    output_dir: Path
    roc_svg: bool = True
    save_models: bool = True
    raw: dict = field(default_factory=dict, repr=False)

    def resolved(self) -> dict:
        """Normalised config, as written next to the run outputs."""
        doc = dict(self.raw)
        doc["seed"] = self.seed
        return doc


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected an object, got {type(given).__name__}")
    extra = sorted(set(given) - set(allowed))
    if extra:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(extra)}")


def _names(cls, exclude=()) -> set[str]:
    return {f.name for f in fields(cls)} - set(exclude)


def _build(section: str, cls, values: dict, **extra):
    try:
        return cls(**values, **extra)
    except SNMError as exc:
        raise ConfigError(f"{section}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _as_kwargs(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _train_config(section: str, values: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from ``values``, layered over ``base`` when given."""
    _check_keys(section, values, _names(TrainConfig, exclude=("seed",)))
    base = base or TrainConfig()
    merged = {**_as_kwargs(base), **values}
    if "backbone" in values:
        _check_keys(f"{section}.backbone", values["backbone"], _names(BackboneConfig))
        merged["backbone"] = _build(f"{section}.backbone", BackboneConfig,
                                    {**_as_kwargs(base.backbone), **values["backbone"]})
    return _build(section, TrainConfig, merged)


def parse_config(doc: dict, seed_override: int | None = None, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a config document; raises :class:`ConfigError` on the first problem."""
    _check_keys("config", doc, TOP_KEYS)
    seed = doc.get("seed", 41) if seed_override is None else seed_override
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

    if "dataset" not in doc:
        raise ConfigError("config: 'dataset' is required")
    ds = doc["dataset"]
    _check_keys("dataset", ds, {"synthetic", "path"})
    if len(ds) != 1:
        raise ConfigError("dataset: give exactly one of 'synthetic' or 'path'")
    synthetic, data_path = None, None
    if "synthetic" in ds:
        _check_keys("dataset.synthetic", ds["synthetic"], _names(SynthConfig, exclude=("seed",)))
        synthetic = _build("dataset.synthetic", SynthConfig, ds["synthetic"], seed=seed)
    else:
        if not isinstance(ds["path"], str) or not ds["path"]:
            raise ConfigError("dataset.path must be a non-empty string")
        data_path = Path(ds["path"])
        if base_dir is not None and not data_path.is_absolute():
            data_path = base_dir / data_path

    train = _train_config("train", doc.get("train", {}))
    runs = doc.get("configs", {"full": {}})
    if not isinstance(runs, dict) or not runs:
        raise ConfigError("configs: expected a non-empty object of name -> overrides")
    configs = {str(name): _train_config(f"configs.{name}", over, train) for name, over in runs.items()}

    prot = doc.get("protocol", {})
    _check_keys("protocol", prot, _names(ProtocolConfig))
    protocol = _build("protocol", ProtocolConfig, prot)

    out = doc.get("output_dir", "snmnet-out")
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir must be a non-empty string")
    for key in ("roc_svg", "save_models"):
        if key in doc and not isinstance(doc[key], bool):
            raise ConfigError(f"{key} must be true or false")
    return ExperimentConfig(seed, synthetic, data_path, train, configs, protocol, Path(out),
                            doc.get("roc_svg", True), doc.get("save_models", True), dict(doc))


def load_config(path: str | Path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc, seed_override, base_dir=path.parent)
