"""Sensor-map preprocessing, the on-disk dataset format, and synthetic drift data.

A dataset directory holds ``manifest.json`` plus one headerless CSV per
sample (``t_steps`` rows by ``channels`` columns)::

    {
      "class_names": ["acetone", ...],
      "positions": ["L1", ...],
      "t_steps": 260,
      "channels": 72,
      "samples": [{"file": "L1/acetone_000.csv", "label": "acetone", "position": "L1"}, ...]
    }

``label`` may also be ``"unknown"`` for samples that belong to no named class.

Mapping the preprocessed Vergara wind-tunnel recordings onto this format:
average each 100 Hz trace over non-overlapping 100-sample windows
(:func:`downsample_mean`, giving 260 steps), stack the 72 sensors (9 modules x
8 TGS sensors) as columns, write one CSV per recording, use the gas name as
``label`` and the line position (L1..L5) as ``position``. Channel z-scoring is
*not* baked into the files; the experiment protocol fits it per training
split. Obtaining the recordings is left to the user.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from snmnet.errors import ConfigError, InvalidInputError, LoadError

log = logging.getLogger(__name__)

UNKNOWN = -1
UNKNOWN_TAG = "unknown"
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class RawSequence:
    """``values`` has shape (channels, length): C parallel series at ``rate_hz``."""

    values: np.ndarray
    rate_hz: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidInputError(f"raw values must be (channels, length), got {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SampleMap:
    grid: np.ndarray  # (t_steps, channels)
    label: int
    position: int

    @property
    def t_steps(self) -> int:
        return self.grid.shape[0]

    @property
    def channels(self) -> int:
        return self.grid.shape[1]


@dataclass
class Dataset:
    """Samples stored as one stacked array for vectorised processing.

    Attributes:
        X: (n, t_steps, channels) float64 maps.
        labels: (n,) int, index into ``class_names`` or ``UNKNOWN``.
        positions: (n,) int, index into ``position_names``.
    """

    X: np.ndarray
    labels: np.ndarray
    positions: np.ndarray
    class_names: list[str]
    position_names: list[str]

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        n = len(self.labels)
        if self.X.ndim != 3 or self.X.shape[0] != n or len(self.positions) != n:
            raise InvalidInputError(
                f"inconsistent dataset arrays: X {self.X.shape}, "
                f"{n} labels, {len(self.positions)} positions"
            )
        if not np.all(np.isfinite(self.X)):
            raise InvalidInputError("dataset contains non-finite values")
        bad = (self.labels != UNKNOWN) & ((self.labels < 0) | (self.labels >= len(self.class_names)))
        if bad.any():
            raise InvalidInputError(f"labels outside class_names at rows {np.flatnonzero(bad)[:5]}")
        if n and (self.positions.min() < 0 or self.positions.max() >= len(self.position_names)):
            raise InvalidInputError("position id outside position_names")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> SampleMap:
        return SampleMap(self.X[i], int(self.labels[i]), int(self.positions[i]))

    def __iter__(self) -> Iterator[SampleMap]:
        return (self[i] for i in range(len(self)))

    @property
    def samples(self) -> list[SampleMap]:
        return list(self)

    @property
    def t_steps(self) -> int:
        return self.X.shape[1]

    @property
    def channels(self) -> int:
        return self.X.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.X[idx], self.labels[idx], self.positions[idx],
            list(self.class_names), list(self.position_names),
        )

    def with_maps(self, X: np.ndarray) -> "Dataset":
        return Dataset(X, self.labels.copy(), self.positions.copy(),
                       list(self.class_names), list(self.position_names))

    @classmethod
    def empty(cls, t_steps: int, channels: int, class_names=(), position_names=()) -> "Dataset":
        return cls(np.zeros((0, t_steps, channels)), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   list(class_names), list(position_names))


def downsample_mean(raw: RawSequence, window: int) -> RawSequence:
    """Average non-overlapping windows; a trailing partial window is dropped."""
    if window < 1:
        raise InvalidInputError(f"window must be >= 1, got {window}")
    n = len(raw)
    if n == 0:
        raise InvalidInputError("cannot downsample an empty series")
    if n < window:
        raise InvalidInputError(f"series of length {n} is shorter than window {window}")
    keep = (n // window) * window
    values = raw.values[:, :keep].reshape(raw.channels, -1, window).mean(axis=2)
    return RawSequence(values, raw.rate_hz / window)


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel z-score parameters (population std) and any clamped channels."""

    mean: np.ndarray
    std: np.ndarray
    clamped: tuple[int, ...] = ()

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


def fit_channel_stats(X: np.ndarray) -> ChannelStats:
    """Fit channel means and population stds over all samples and time steps of ``X``."""
    if X.shape[0] == 0:
        raise InvalidInputError("cannot fit channel statistics on an empty split")
    flat = X.reshape(-1, X.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    dead = np.flatnonzero(~(std > 0))
    if dead.size:
        log.warning("zero-variance channels %s: std clamped to 1", dead.tolist())
        std = std.copy()
        std[dead] = 1.0
    return ChannelStats(mean, std, tuple(int(c) for c in dead))


def zscore_channels(dataset: Dataset, fit_indices=None) -> tuple[Dataset, ChannelStats]:
    """Z-score every channel with statistics fit on ``fit_indices`` only.

    ``fit_indices=None`` fits on the whole dataset. The returned stats can be
    re-applied with :meth:`ChannelStats.apply`.
    """
    fit_X = dataset.X if fit_indices is None else dataset.X[np.asarray(fit_indices)]
    stats = fit_channel_stats(fit_X)
    return dataset.with_maps(stats.apply(dataset.X)), stats


# -- on-disk format ---------------------------------------------------------


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write ``dataset`` as manifest + per-sample CSVs. Output is byte-stable."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    counters: dict[tuple[int, int], int] = {}
    for i in range(len(dataset)):
        lab, pos = int(dataset.labels[i]), int(dataset.positions[i])
        lab_name = UNKNOWN_TAG if lab == UNKNOWN else dataset.class_names[lab]
        pos_name = dataset.position_names[pos]
        k = counters.get((lab, pos), 0)
        counters[(lab, pos)] = k + 1
        rel = f"{pos_name}/{lab_name}_{k:04d}.csv"
        (directory / pos_name).mkdir(exist_ok=True)
        np.savetxt(directory / rel, dataset.X[i], fmt="%.17g", delimiter=",")
        entries.append({"file": rel, "label": lab_name, "position": pos_name})
    manifest = {
        "class_names": list(dataset.class_names),
        "positions": list(dataset.position_names),
        "t_steps": dataset.t_steps,
        "channels": dataset.channels,
        "samples": entries,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return directory


def _read_manifest(path: Path) -> dict:
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON ({exc})") from exc
    required = {"class_names": list, "positions": list, "t_steps": int, "channels": int, "samples": list}
    for key, kind in required.items():
        if not isinstance(manifest.get(key), kind):
            raise LoadError(f"{path}: field {key!r} missing or not a {kind.__name__}")
    if manifest["t_steps"] < 1 or manifest["channels"] < 1:
        raise LoadError(f"{path}: t_steps and channels must be positive")
    return manifest


def load_dataset(path: str | Path) -> Dataset:
    """Load a dataset directory (or its ``manifest.json``).

    All sample files are checked before failing, so the error lists every
    offending entry rather than the first.
    """
    path = Path(path)
    manifest_path = path / MANIFEST if path.is_dir() else path
    root = manifest_path.parent
    manifest = _read_manifest(manifest_path)
    T, C = manifest["t_steps"], manifest["channels"]
    class_index = {name: i for i, name in enumerate(manifest["class_names"])}
    pos_index = {name: i for i, name in enumerate(manifest["positions"])}

    problems: list[str] = []
    maps, labels, positions = [], [], []
    for k, entry in enumerate(manifest["samples"]):
        if not isinstance(entry, dict) or not {"file", "label", "position"} <= entry.keys():
            problems.append(f"sample #{k}: needs file, label and position")
            continue
        label = entry["label"]
        if label != UNKNOWN_TAG and label not in class_index:
            problems.append(f"{entry['file']}: unknown label {label!r}")
            continue
        if entry["position"] not in pos_index:
            problems.append(f"{entry['file']}: unknown position {entry['position']!r}")
            continue
        file = root / entry["file"]
        if not file.is_file():
            problems.append(f"{file}: missing file")
            continue
        try:
            grid = np.loadtxt(file, delimiter=",", ndmin=2, dtype=np.float64)
        except ValueError as exc:
            problems.append(f"{file}: non-numeric or ragged content ({exc})")
            continue
        if grid.shape != (T, C):
            problems.append(f"{file}: shape {grid.shape[0]}x{grid.shape[1]}, manifest declares {T}x{C}")
            continue
        if not np.all(np.isfinite(grid)):
            problems.append(f"{file}: non-finite values")
            continue
        maps.append(grid)
        labels.append(UNKNOWN if label == UNKNOWN_TAG else class_index[label])
        positions.append(pos_index[entry["position"]])

    if problems:
        shown = "\n  ".join(problems[:20])
        more = f"\n  ... and {len(problems) - 20} more" if len(problems) > 20 else ""
        raise LoadError(f"{len(problems)} invalid entries in {manifest_path}:\n  {shown}{more}")
    if not maps:
        return Dataset.empty(T, C, manifest["class_names"], manifest["positions"])
    return Dataset(np.stack(maps), labels, positions,
                   list(manifest["class_names"]), list(manifest["positions"]))


# -- synthetic drift data ---------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic drift benchmark parameters.

    ``feature_anisotropy`` is the condition number of each class's amplitude
    covariance. ``position_decay[p]`` scales every amplitude at position ``p``.
    ``intensity_spread`` is the relative std of the leading covariance axis,
    which is aligned with the class's mean response (concentration fluctuation).
    """

    n_classes: int = 10
    samples_per_class_per_position: int = 60
    n_positions: int = 5
    t_steps: int = 64
    channels: int = 16
    feature_anisotropy: float = 50.0
    position_decay: tuple[float, ...] = (1.0, 0.8, 0.6, 0.45, 0.3)
    noise_std: float = 0.05
    intensity_spread: float = 0.25
    seed: int = 41

    def __post_init__(self):
        object.__setattr__(self, "position_decay", tuple(float(v) for v in self.position_decay))
        for name in ("n_classes", "samples_per_class_per_position", "n_positions", "t_steps", "channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if len(self.position_decay) != self.n_positions:
            raise ConfigError(
                f"position_decay has {len(self.position_decay)} entries for {self.n_positions} positions"
            )
        if any(not v > 0 for v in self.position_decay):
            raise ConfigError("position_decay multipliers must be > 0")
        if not self.feature_anisotropy >= 1:
            raise ConfigError("feature_anisotropy is a condition number and must be >= 1")
        if self.noise_std < 0 or self.intensity_spread < 0:
            raise ConfigError("noise_std and intensity_spread must be >= 0")


def response_template(t: np.ndarray, tau_rise: float, t_plateau: float, tau_decay: float) -> np.ndarray:
    """Rise, plateau, decay envelope ``(1 - e^{-t/tau_rise}) e^{-max(0, t - t_plateau)/tau_decay}``."""
    return (1.0 - np.exp(-t / tau_rise)) * np.exp(-np.maximum(0.0, t - t_plateau) / tau_decay)


def _orthonormal_basis_with(first: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    d = first.shape[0]
    M = np.column_stack([first, rng.standard_normal((d, d - 1))])
    Q, R = np.linalg.qr(M)
    return Q * np.sign(np.diag(R))  # keep Q[:, 0] == first / ||first||


def class_amplitude_model(cfg: SynthConfig, rng: np.random.Generator):
    """Draw per-class (mean amplitude, covariance, envelope params)."""
    C = cfg.channels
    means, covs, envelopes = [], [], []
    eig = np.geomspace(1.0, 1.0 / cfg.feature_anisotropy, C)
    for _ in range(cfg.n_classes):
        mean = np.exp(0.8 * rng.standard_normal(C))
        Q = _orthonormal_basis_with(mean / np.linalg.norm(mean), rng)
        scale = (cfg.intensity_spread * np.linalg.norm(mean)) ** 2
        cov = scale * (Q * eig) @ Q.T
        means.append(mean)
        covs.append((cov + cov.T) / 2)
        envelopes.append((
            rng.uniform(0.05, 0.2) * cfg.t_steps,   # tau_rise
            rng.uniform(0.3, 0.6) * cfg.t_steps,    # t_plateau
            rng.uniform(0.1, 0.4) * cfg.t_steps,    # tau_decay
        ))
    return means, covs, envelopes


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic drift dataset: every (class, position) pair gets
    ``samples_per_class_per_position`` maps of shape (t_steps, channels)."""
    rng = np.random.default_rng(cfg.seed)
    means, covs, envelopes = class_amplitude_model(cfg, rng)
    t = np.arange(cfg.t_steps, dtype=np.float64)
    n_each = cfg.samples_per_class_per_position
    maps, labels, positions = [], [], []
    for p, decay in enumerate(cfg.position_decay):
        for c in range(cfg.n_classes):
            env = response_template(t, *envelopes[c])
            amps = rng.multivariate_normal(means[c], covs[c], size=n_each, method="eigh")
            noise = cfg.noise_std * rng.standard_normal((n_each, cfg.t_steps, cfg.channels))
            maps.append(decay * env[None, :, None] * amps[:, None, :] + noise)
            labels.extend([c] * n_each)
            positions.extend([p] * n_each)
    return Dataset(
        np.concatenate(maps),
        labels,
        positions,
        [f"gas{c:02d}" for c in range(cfg.n_classes)],
        [f"L{p + 1}" for p in range(cfg.n_positions)],
    )
