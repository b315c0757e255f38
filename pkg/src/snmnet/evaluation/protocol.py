"""k-fold known/unknown protocol, run position by position.

Every (position, fold) pair draws its own class partition and sample split
from a generator keyed on ``(seed, position, fold)``, so results do not
depend on execution order or on ``jobs``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from snmnet.dataio import UNKNOWN, Dataset, zscore_channels
from snmnet.errors import ConfigError, ProtocolError
from snmnet.evaluation.metrics import auroc, known_accuracy, tpr_at_fpr
from snmnet.train import TrainConfig, train_model

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "tpr", "auroc")


@dataclass(frozen=True)
class ProtocolConfig:
    n_folds: int = 10
    n_known: int = 6
    n_unknown: int = 4
    train_fraction: float = 0.6
    unknown_test_fraction: float = 0.4
    fpr: float = 0.05
    positions: tuple[int, ...] | None = None  # None = every position in the dataset

    def __post_init__(self):
        if self.positions is not None:
            object.__setattr__(self, "positions", tuple(int(p) for p in self.positions))
        if self.n_folds < 1:
            raise ConfigError("n_folds must be >= 1")
        if self.n_known < 2:
            raise ConfigError("n_known must be >= 2")
        if self.n_unknown < 1:
            raise ConfigError("n_unknown must be >= 1")
        for name in ("train_fraction", "unknown_test_fraction", "fpr"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in (0, 1)")


def ablation_variants(base: TrainConfig) -> dict[str, TrainConfig]:
    """The five refinement/scoring toggles plus the softmax baseline, in table order."""
    return {
        "BASE": replace(base, use_bn=False, use_l2n=False, score_metric="anchor"),
        "+M": replace(base, use_bn=False, use_l2n=False, score_metric="mahalanobis"),
        "+M+BN": replace(base, use_bn=True, use_l2n=False, score_metric="mahalanobis"),
        "+M+L2N": replace(base, use_bn=False, use_l2n=True, score_metric="mahalanobis"),
        "full": replace(base, use_bn=True, use_l2n=True, score_metric="mahalanobis"),
        "softmax": replace(base, head="softmax", score_metric="softmax", use_bn=False, use_l2n=False),
    }


@dataclass(frozen=True)
class FoldSplit:
    position: int
    fold: int
    known_classes: tuple[int, ...]
    unknown_classes: tuple[int, ...]
    train_idx: np.ndarray
    test_idx: np.ndarray


@dataclass
class FoldResult:
    position: int
    fold: int
    config: str
    accuracy: float
    tpr: float
    auroc: float
    tau: float
    best_epoch: int
    n_train: int
    n_known_test: int
    n_unknown_test: int
    known_classes: tuple[int, ...]
    unknown_classes: tuple[int, ...]
    known_scores: np.ndarray = field(repr=False, default=None)
    unknown_scores: np.ndarray = field(repr=False, default=None)

    @property
    def key(self):
        return (self.position, self.fold, self.config)


def _fold_rng(seed: int, position: int, fold: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, position, fold]))


def _fold_train_seed(seed: int, position: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, position, fold, 1]).generate_state(1)[0])


def partition_classes(class_ids, n_known: int, n_unknown: int, rng: np.random.Generator):
    """Random (known, unknown) class sets, each sorted."""
    ids = np.asarray(sorted(class_ids))
    if len(ids) < n_known + n_unknown:
        raise ProtocolError(f"need {n_known + n_unknown} classes for a {n_known}/{n_unknown} split, "
                            f"found {len(ids)}")
    perm = rng.permutation(ids)
    return tuple(sorted(int(c) for c in perm[:n_known])), \
        tuple(sorted(int(c) for c in perm[n_known:n_known + n_unknown]))


def split_fold(dataset: Dataset, position: int, fold: int, seed: int, cfg: ProtocolConfig) -> FoldSplit:
    """Class partition and train/test indices for one (position, fold)."""
    rng = _fold_rng(seed, position, fold)
    here = np.flatnonzero(dataset.positions == position)
    if here.size == 0:
        raise ProtocolError(f"no samples at position {dataset.position_names[position]!r}")
    labels = dataset.labels[here]
    present = sorted(int(c) for c in np.unique(labels) if c != UNKNOWN)
    known, unknown = partition_classes(present, cfg.n_known, cfg.n_unknown, rng)
    train, test = [], []
    for c in known:
        idx = rng.permutation(here[labels == c])
        k = int(round(cfg.train_fraction * len(idx)))
        if k < 3 or k >= len(idx):
            raise ProtocolError(
                f"class {dataset.class_names[c]!r} at position {dataset.position_names[position]!r} "
                f"has {len(idx)} samples; too few for a {cfg.train_fraction:.0%} train split"
            )
        train.extend(idx[:k])
        test.extend(idx[k:])
    # samples tagged unknown in the source data are always unknown
    for c in (*unknown, UNKNOWN):
        idx = rng.permutation(here[labels == c])
        if c == UNKNOWN and idx.size == 0:
            continue
        k = int(round(cfg.unknown_test_fraction * len(idx)))
        if k < 1:
            name = "unknown-tagged" if c == UNKNOWN else repr(dataset.class_names[c])
            raise ProtocolError(f"class {name} at position {dataset.position_names[position]!r} "
                                f"has {len(idx)} samples; none left for the unknown test draw")
        test.extend(idx[:k])
    return FoldSplit(position, fold, known, unknown,
                     np.sort(np.asarray(train, np.int64)), np.sort(np.asarray(test, np.int64)))


def evaluate_fold(dataset: Dataset, split: FoldSplit, configs: dict[str, TrainConfig],
                  seed: int, fpr: float, model_dir: str | Path | None = None) -> list[FoldResult]:
    """z-score on the train split, train every config, score the test split."""
    local = np.concatenate([split.train_idx, split.test_idx])
    sub = dataset.subset(local)
    n_train = len(split.train_idx)
    sub, _ = zscore_channels(sub, np.arange(n_train))
    train_ds, test_ds = sub.subset(np.arange(n_train)), sub.subset(np.arange(n_train, len(sub)))
    is_known = np.isin(test_ds.labels, split.known_classes)
    train_seed = _fold_train_seed(seed, split.position, split.fold)
    results = []
    for name, cfg in configs.items():
        model = train_model(train_ds, replace(cfg, seed=train_seed))
        scores, pred = model.score(test_ds.X)
        ks, us = scores[is_known], scores[~is_known]
        results.append(FoldResult(
            split.position, split.fold, name,
            known_accuracy(pred, test_ds.labels, is_known), tpr_at_fpr(ks, us, fpr), auroc(ks, us),
            model.tau, model.best_epoch, n_train, int(is_known.sum()), int((~is_known).sum()),
            split.known_classes, split.unknown_classes, ks, us,
        ))
        if model_dir is not None:
            from snmnet.serialize import save_model
            out = Path(model_dir) / _safe(name)
            out.mkdir(parents=True, exist_ok=True)
            save_model(model, out / f"{dataset.position_names[split.position]}_fold{split.fold:02d}.snm")
        log.info("%s fold %d %s: acc %.4f tpr %.4f auroc %.4f",
                 dataset.position_names[split.position], split.fold, name,
                 results[-1].accuracy, results[-1].tpr, results[-1].auroc)
    return results


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name.replace("+", "plus_"))


def _run_task(args):
    dataset, position, fold, seed, cfg, configs, model_dir = args
    split = split_fold(dataset, position, fold, seed, cfg)
    return evaluate_fold(dataset, split, configs, seed, cfg.fpr, model_dir)


def _mean_std(values) -> tuple[float, float | None, int]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), (float(v.std(ddof=1)) if len(v) > 1 else None), len(v)


@dataclass
class ExperimentReport:
    rows: list[FoldResult]
    configs: list[str]
    position_names: list[str]
    seed: int

    def __post_init__(self):
        order = {c: i for i, c in enumerate(self.configs)}
        self.rows = sorted(self.rows, key=lambda r: (r.position, r.fold, order[r.config]))

    def for_config(self, config: str) -> list[FoldResult]:
        return [r for r in self.rows if r.config == config]

    def positions(self) -> list[int]:
        return sorted({r.position for r in self.rows})

    def aggregate(self, config: str, metric: str, position: int | None = None):
        """(mean, sample std or None for one entry, count) over folds, optionally one position."""
        vals = [getattr(r, metric) for r in self.for_config(config)
                if position is None or r.position == position]
        if not vals:
            raise ProtocolError(f"no rows for config {config!r}")
        return _mean_std(vals)

    def position_spread(self, config: str, metric: str = "auroc") -> float | None:
        """Sample std across positions of the per-position mean."""
        means = [self.aggregate(config, metric, p)[0] for p in self.positions()]
        return float(np.std(means, ddof=1)) if len(means) > 1 else None

    def summary(self) -> dict:
        out = {}
        for c in self.configs:
            entry = {"overall": {}, "per_position": {}, "position_std": {}}
            for m in METRIC_NAMES:
                mean, std, n = self.aggregate(c, m)
                entry["overall"][m] = {"mean": mean, "std": std, "n": n}
                entry["position_std"][m] = self.position_spread(c, m)
            for p in self.positions():
                entry["per_position"][self.position_names[p]] = {
                    m: dict(zip(("mean", "std", "n"), self.aggregate(c, m, p))) for m in METRIC_NAMES
                }
            out[c] = entry
        return out


def run_protocol(dataset: Dataset, configs: dict[str, TrainConfig], cfg: ProtocolConfig | None = None,
                 seed: int = 41, jobs: int = 1, model_dir: str | Path | None = None) -> ExperimentReport:
    """Train and score every config on every (position, fold)."""
    cfg = cfg or ProtocolConfig()
    if not configs:
        raise ConfigError("no configurations to run")
    positions = cfg.positions if cfg.positions is not None else tuple(range(len(dataset.position_names)))
    for p in positions:
        if not 0 <= p < len(dataset.position_names):
            raise ConfigError(f"position index {p} out of range")
    # validate every split before training anything
    for p in positions:
        for f in range(cfg.n_folds):
            split_fold(dataset, p, f, seed, cfg)
    tasks = [(dataset.subset(np.flatnonzero(dataset.positions == p)) if jobs > 1 else dataset,
              p, f, seed, cfg, configs, model_dir)
             for p in positions for f in range(cfg.n_folds)]
    rows: list[FoldResult] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for part in pool.map(_run_task, tasks):
                rows.extend(part)
    else:
        for t in tasks:
            rows.extend(_run_task(t))
    if not all(math.isfinite(r.auroc) for r in rows):
        raise ProtocolError("non-finite metric in report")
    return ExperimentReport(rows, list(configs), list(dataset.position_names), seed)
