"""Training: CAC loss through backbone + refinement, Adam, early stopping.

After training the BN stage is frozen, class statistics are fit on refined
training features and the rejection threshold is calibrated on training
scores. The softmax baseline shares the loop with a plain linear classifier.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from snmnet import linalg
from snmnet.backbone import Backbone, BackboneConfig, build_backbone
from snmnet.dataio import UNKNOWN, Dataset
from snmnet.errors import ConfigError, InvalidInputError, ProtocolError, TrainingAborted
from snmnet.refine import Refiner
from snmnet.scorer import ClassStats, calibrate_threshold, decide_batch, fit_stats, rejection_score

log = logging.getLogger(__name__)

SCORE_METRICS = ("mahalanobis", "euclidean", "anchor", "softmax")


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation and ablation settings; defaults follow the published table."""

    batch_size: int = 16
    lr: float = 4e-5
    weight_decay: float = 1e-4
    max_epochs: int = 25
    patience: int = 10
    seed: int = 41
    dropout: float = 0.1
    lambda_anchor: float = 1e-5
    anchor_magnitude: float = 10.0
    monitor_fraction: float = 0.1
    head: str = "cac"
    use_bn: bool = True
    use_l2n: bool = True
    bn_affine: bool = True
    score_metric: str = "mahalanobis"
    cov_lambda: float = linalg.DEFAULT_LAMBDA
    reject_percentile: float = 95.0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneConfig(**self.backbone))
        if self.head not in ("cac", "softmax"):
            raise ConfigError(f"head must be 'cac' or 'softmax', got {self.head!r}")
        if self.score_metric not in SCORE_METRICS:
            raise ConfigError(f"score_metric must be one of {SCORE_METRICS}, got {self.score_metric!r}")
        if (self.head == "softmax") != (self.score_metric == "softmax"):
            raise ConfigError("score_metric 'softmax' goes with head 'softmax' and only with it")
        for name in ("batch_size", "max_epochs", "patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.batch_size < 2 and self.use_bn:
            raise ConfigError("batch norm needs batch_size >= 2")
        for name in ("lr", "anchor_magnitude"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("weight_decay", "lambda_anchor", "cov_lambda"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.score_metric == "mahalanobis" and not self.cov_lambda > 0:
            raise ConfigError("mahalanobis scoring needs cov_lambda > 0 for a factorable covariance")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if not 0 < self.monitor_fraction < 1:
            raise ConfigError("monitor_fraction must be in (0, 1)")
        if not 0 < self.reject_percentile < 100:
            raise ConfigError("reject_percentile must be in (0, 100)")

    def to_dict(self) -> dict:
        return asdict(self)


# -- heads and losses -------------------------------------------------------


@dataclass(frozen=True)
class AnchorSet:
    """Fixed class anchors ``magnitude * e_c`` in the K-dimensional logit space."""

    n_classes: int
    magnitude: float = 10.0

    @property
    def points(self) -> np.ndarray:
        return self.magnitude * np.eye(self.n_classes)


class LinearHead:
    def __init__(self, dim: int, n_classes: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(dim)
        self.params = {
            "W": rng.uniform(-bound, bound, (dim, n_classes)),
            "b": rng.uniform(-bound, bound, n_classes),
        }
        self.trainable = {"W": True, "b": True}

    def __call__(self, F: np.ndarray) -> np.ndarray:
        return F @ self.params["W"] + self.params["b"]


def anchor_distances(P: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    diff = P[:, None, :] - anchors[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, K):
    y = np.asarray(labels)
    if y.ndim != 1 or (y.size and (y.min() < 0 or y.max() >= K)):
        raise InvalidInputError(f"labels must lie in [0, {K})")
    return y


def cac_loss(F, labels, W, b, anchors: AnchorSet, lambda_anchor: float):
    """Class-anchor loss ``CE(softmax(-dist)) + lambda * mean dist-to-own-anchor``.

    Features are projected by the linear head ``P = F W + b``; distances are
    Euclidean to the anchors. Returns ``(loss, grad_F, {"W": .., "b": ..})``.
    """
    F = np.asarray(F, dtype=np.float64)
    K = anchors.n_classes
    y = _check_labels(labels, K)
    n = F.shape[0]
    A = anchors.points
    P = F @ W + b
    Dist = anchor_distances(P, A)
    logp = _log_softmax(-Dist)
    rows = np.arange(n)
    ce = -logp[rows, y].mean()
    anchor_term = Dist[rows, y].mean()
    loss = ce + lambda_anchor * anchor_term

    onehot = np.zeros_like(Dist)
    onehot[rows, y] = 1.0
    dDist = (-(np.exp(logp) - onehot) + lambda_anchor * onehot) / n
    safe = np.where(Dist > 0, Dist, 1.0)
    unit = (P[:, None, :] - A[None, :, :]) / safe[:, :, None]
    unit[Dist == 0] = 0.0  # subgradient at the anchor itself
    dP = (dDist[:, :, None] * unit).sum(axis=1)
    grads = {"W": F.T @ dP, "b": dP.sum(axis=0)}
    return float(loss), dP @ W.T, grads


def softmax_ce_loss(F, labels, W, b):
    """Plain cross-entropy on linear logits. Same return layout as :func:`cac_loss`."""
    F = np.asarray(F, dtype=np.float64)
    y = _check_labels(labels, W.shape[1])
    n = F.shape[0]
    logp = _log_softmax(F @ W + b)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()
    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dlogits /= n
    return float(loss), dlogits @ W.T, {"W": F.T @ dlogits, "b": dlogits.sum(axis=0)}


def softmax_scores(logits: np.ndarray):
    """Rejection score ``-max softmax probability`` and the argmax class."""
    prob = np.exp(_log_softmax(logits))
    return -prob.max(axis=1), prob.argmax(axis=1)


# -- optimisation -----------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              trainable: dict | None = None, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place. Weight decay is coupled (added to the gradient).

    Raises:
        TrainingAborted: a gradient is NaN or infinite.
    """
    state.t += 1
    t = state.t
    for name, p in params.items():
        if trainable is not None and not trainable.get(name, True):
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for {name!r} at step {t}")
        if weight_decay:
            g = g + weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, loss: float, epoch: int) -> bool:
        """Record ``loss`` for ``epoch``; return True when training should stop."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad_epochs == 0


# -- the trained artefact ---------------------------------------------------


@dataclass
class TrainedModel:
    config: TrainConfig
    backbone: Backbone
    refiner: Refiner
    head: LinearHead
    class_ids: np.ndarray  # head index -> dataset label
    anchors: AnchorSet | None = None
    stats: list[ClassStats] = field(default_factory=list)
    tau: float = math.inf
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def features(self, X: np.ndarray) -> np.ndarray:
        """Eval-mode features fed to the head: refined when refinement is on."""
        Z, _ = self.backbone.forward(X, train=False)
        return self.refiner.refine_eval(np.atleast_2d(Z))

    def score(self, X: np.ndarray):
        """Rejection scores (higher = more unknown) and predicted dataset labels."""
        F = self.features(X)
        metric = self.config.score_metric
        if metric == "softmax":
            s, idx = softmax_scores(self.head(F))
        elif metric == "anchor":
            D = anchor_distances(self.head(F), self.anchors.points)
            idx = D.argmin(axis=1)
            s = D[np.arange(len(idx)), idx]
        else:
            s, ids = rejection_score(F, self.stats, metric)
            return s, ids
        return s, self.class_ids[idx]

    def predict(self, X: np.ndarray):
        s, y = self.score(X)
        return decide_batch(s, y, self.tau)


def _stratified_monitor_split(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    train_idx, mon_idx = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(fraction * len(idx)))
        k = min(max(k, 1), len(idx) - 2) if len(idx) >= 3 else 0
        mon_idx.extend(idx[:k])
        train_idx.extend(idx[k:])
    return np.sort(np.array(train_idx, dtype=np.int64)), np.sort(np.array(mon_idx, dtype=np.int64))


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    chunks = [perm[i:i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


class _Trainer:
    def __init__(self, model: TrainedModel):
        self.m = model
        cfg = model.config
        self.loss_kind = cfg.head

    def groups(self):
        m = self.m
        return [("backbone", m.backbone), ("refine", m.refiner), ("head", m.head)]

    def loss_and_grads(self, X, y, train: bool, rng=None):
        m, cfg = self.m, self.m.config
        Z, btape = m.backbone.forward(X, train=train, rng=rng)
        F, rtape = m.refiner.forward(Z)
        W, b = m.head.params["W"], m.head.params["b"]
        if self.loss_kind == "cac":
            loss, gF, hgrads = cac_loss(F, y, W, b, m.anchors, cfg.lambda_anchor)
        else:
            loss, gF, hgrads = softmax_ce_loss(F, y, W, b)
        if not train:
            return loss, None
        gZ, rgrads = m.refiner.backward(rtape, gF)
        bgrads, _ = m.backbone.backward(btape, gZ)
        return loss, {"backbone": bgrads, "refine": rgrads, "head": hgrads}

    def eval_loss(self, X, y) -> float:
        self.m.refiner.eval()
        try:
            return self.loss_and_grads(X, y, train=False)[0]
        finally:
            self.m.refiner.train()

    def snapshot(self):
        m = self.m
        return {
            "backbone": m.backbone.state_dict(),
            "bn": m.refiner.bn.copy(),
            "head": {k: v.copy() for k, v in m.head.params.items()},
        }

    def restore(self, snap):
        m = self.m
        m.backbone.load_state_dict(snap["backbone"])
        m.refiner.bn = snap["bn"].copy()
        m.refiner.mark_updated()
        for k, v in snap["head"].items():
            m.head.params[k][...] = v


def _encode_labels(labels: np.ndarray):
    if np.any(labels == UNKNOWN):
        raise ProtocolError("training split contains unknown-tagged samples")
    class_ids = np.unique(labels)
    return class_ids, np.searchsorted(class_ids, labels)


def train_model(train: Dataset, config: TrainConfig | None = None) -> TrainedModel:
    """Train on known-class samples, then freeze BN, fit class stats and calibrate the threshold.

    A stratified ``monitor_fraction`` of ``train`` is held out for early
    stopping; the class statistics and threshold use all of ``train``.
    """
    cfg = config or TrainConfig()
    if len(train) == 0:
        raise ProtocolError("empty training split")
    class_ids, y_all = _encode_labels(train.labels)
    counts = np.bincount(y_all)
    if counts.min() < 2:
        raise ProtocolError(f"class {class_ids[counts.argmin()]} has fewer than 2 training samples")

    root = np.random.SeedSequence(cfg.seed)
    init_ss, split_ss, shuffle_ss, drop_ss = root.spawn(4)
    init_rng = np.random.default_rng(init_ss)
    backbone = build_backbone(cfg.backbone, train.channels, train.t_steps, cfg.dropout, init_rng)
    refiner = Refiner(backbone.out_dim, cfg.use_bn, cfg.use_l2n, affine=cfg.bn_affine)
    head = LinearHead(backbone.out_dim, len(class_ids), init_rng)
    anchors = AnchorSet(len(class_ids), cfg.anchor_magnitude) if cfg.head == "cac" else None
    model = TrainedModel(cfg, backbone, refiner, head, class_ids, anchors)

    fit_idx, mon_idx = _stratified_monitor_split(y_all, cfg.monitor_fraction, np.random.default_rng(split_ss))
    if len(mon_idx) == 0:
        raise ProtocolError("training split too small to carve a monitor split")
    X_fit, y_fit = train.X[fit_idx], y_all[fit_idx]
    X_mon, y_mon = train.X[mon_idx], y_all[mon_idx]

    trainer = _Trainer(model)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    adam = {name: AdamState() for name, _ in trainer.groups()}
    stopper = EarlyStopping(cfg.patience)
    best = trainer.snapshot()
    refiner.train()
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for batch in _batches(len(fit_idx), cfg.batch_size, shuffle_rng):
            loss, grads = trainer.loss_and_grads(X_fit[batch], y_fit[batch], train=True, rng=drop_rng)
            if not math.isfinite(loss):
                raise TrainingAborted(f"non-finite training loss at epoch {epoch}")
            for name, part in trainer.groups():
                adam_step(part.params, grads[name], adam[name], cfg.lr, cfg.weight_decay, part.trainable)
                if hasattr(part, "mark_updated"):
                    part.mark_updated()
            losses.append(loss)
        monitor = trainer.eval_loss(X_mon, y_mon)
        stop = stopper.step(monitor, epoch)
        if stopper.improved:
            best = trainer.snapshot()
        model.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "monitor_loss": monitor})
        log.debug("epoch %d train %.5f monitor %.5f", epoch, np.mean(losses), monitor)
        if stop:
            break
    trainer.restore(best)
    model.best_epoch = stopper.best_epoch
    refiner.eval()
    return finalize(model, train.X, y_all)


def finalize(model: TrainedModel, X: np.ndarray, y_index: np.ndarray) -> TrainedModel:
    """Fit class statistics on eval-mode features and calibrate ``tau`` on training scores."""
    cfg = model.config
    F = model.features(X)
    if cfg.score_metric in ("mahalanobis", "euclidean"):
        model.stats = fit_stats(F, model.class_ids[y_index], cfg.cov_lambda,
                                require_unit_norm=cfg.use_l2n)
    scores, _ = model.score(X)
    model.tau = calibrate_threshold(scores, cfg.reject_percentile)
    return model


def train_softmax_baseline(train: Dataset, config: TrainConfig | None = None) -> TrainedModel:
    """Same loop with a linear classifier head; rejection score is ``-max softmax``."""
    cfg = replace(config or TrainConfig(), head="softmax", score_metric="softmax",
                  use_bn=False, use_l2n=False)
    return train_model(train, cfg)
