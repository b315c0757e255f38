"""Differentiable feature extractors with hand-written reverse mode.

Both backbones map a batch of sensor maps ``(n, T, C)`` to raw features
``(n, d)``. ``forward`` returns a :class:`Tape` holding every activation and
dropout mask needed by ``backward``; a tape is bound to the parameter version
it was recorded against and is rejected once the parameters change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from snmnet.errors import ConfigError, ContractError

GELU_C = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-5


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture hyperparameters.

    ``kind="mlp"`` uses ``hidden``/``d``; ``kind="attention"`` uses the
    transformer fields and emits ``d_model`` features.
    """

    kind: str = "mlp"
    hidden: int = 64
    d: int = 32
    activation: str = "tanh"
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 1
    ff_dim: int = 64
    freeze_pos: bool = False

    def __post_init__(self):
        if self.kind not in ("mlp", "attention"):
            raise ConfigError(f"backbone kind must be 'mlp' or 'attention', got {self.kind!r}")
        if self.activation not in ("tanh", "linear"):
            raise ConfigError(f"mlp activation must be 'tanh' or 'linear', got {self.activation!r}")
        for name in ("hidden", "d", "d_model", "n_heads", "n_layers", "ff_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"backbone.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def out_dim(self) -> int:
        return self.d if self.kind == "mlp" else self.d_model


FULL_SCALE_ATTENTION = BackboneConfig(kind="attention", d_model=128, n_heads=4, n_layers=2, ff_dim=512)


@dataclass
class Tape:
    owner: int
    version: int
    single: bool
    cache: dict = field(default_factory=dict)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def dropout_mask(rng: np.random.Generator | None, shape, rate: float, train: bool):
    """Inverted-dropout mask, or ``None`` when dropout is inactive."""
    if not train or rate <= 0.0:
        return None
    if rng is None:
        raise ContractError("train-mode dropout needs an explicit rng")
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=red)
    db = dy.sum(axis=red)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def gelu(u):
    t = np.tanh(GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * u * u)


def softmax(s, axis=-1):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class Backbone:
    """Shared parameter bookkeeping; subclasses implement ``_forward``/``_backward``."""

    kind = ""

    def __init__(self, cfg: BackboneConfig, channels: int, t_steps: int, dropout: float):
        self.cfg = cfg
        self.channels = channels
        self.t_steps = t_steps
        self.dropout = float(dropout)
        self.params: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}
        self.version = 0

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def _add(self, name: str, value: np.ndarray, trainable: bool = True):
        self.params[name] = np.ascontiguousarray(value, dtype=np.float64)
        self.trainable[name] = trainable

    def mark_updated(self):
        """Must be called after mutating ``params`` in place; invalidates old tapes."""
        self.version += 1

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            raise ContractError(f"state keys {sorted(state)} do not match {sorted(self.params)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ContractError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k][...] = v
        self.mark_updated()

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def _check_input(self, X) -> tuple[np.ndarray, bool]:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        if single:
            X = X[None]
        if X.ndim != 3 or X.shape[2] != self.channels:
            raise ConfigError(
                f"{self.kind} backbone expects (n, T, {self.channels}) maps, got {X.shape}"
            )
        return X, single

    def forward(self, X, train: bool = False, rng: np.random.Generator | None = None):
        """Return ``(z_raw, tape)``; a single (T, C) map gives a (d,) vector."""
        X, single = self._check_input(X)
        tape = Tape(id(self), self.version, single)
        Z = self._forward(X, train, rng, tape.cache)
        return (Z[0] if single else Z), tape

    def backward(self, tape: Tape, grad_out):
        """Return ``(param_grads, grad_input)`` for upstream gradient ``grad_out``.

        Gradients are produced for every tensor, frozen ones included; the
        optimizer consults ``trainable`` to decide what to update.
        """
        if tape.owner != id(self) or tape.version != self.version:
            raise ContractError("stale tape: parameters changed since the forward pass")
        G = np.asarray(grad_out, dtype=np.float64)
        if tape.single:
            G = G[None]
        grads, gX = self._backward(G, tape.cache)
        return grads, (gX[0] if tape.single else gX)

    def _forward(self, X, train, rng, cache):
        raise NotImplementedError

    def _backward(self, G, cache):
        raise NotImplementedError


class MLPBackbone(Backbone):
    """Temporal mean pooling then a two-layer perceptron."""

    kind = "mlp"

    def __init__(self, cfg: BackboneConfig, channels: int, t_steps: int, dropout: float = 0.0,
                 rng: np.random.Generator | None = None):
        super().__init__(cfg, channels, t_steps, dropout)
        rng = rng if rng is not None else np.random.default_rng(0)
        H, d = cfg.hidden, cfg.d
        self._add("W1", _uniform(rng, channels, (channels, H)))
        self._add("b1", _uniform(rng, channels, H))
        self._add("W2", _uniform(rng, H, (H, d)))
        self._add("b2", _uniform(rng, H, d))

    def _forward(self, X, train, rng, cache):
        p = self.params
        pooled = X.mean(axis=1)
        pre = pooled @ p["W1"] + p["b1"]
        act = np.tanh(pre) if self.cfg.activation == "tanh" else pre
        mask = dropout_mask(rng, act.shape, self.dropout, train)
        hid = act if mask is None else act * mask
        cache.update(T=X.shape[1], pooled=pooled, act=act, mask=mask, hid=hid)
        return hid @ p["W2"] + p["b2"]

    def _backward(self, G, c):
        p = self.params
        g = {"W2": c["hid"].T @ G, "b2": G.sum(axis=0)}
        d_act = G @ p["W2"].T
        if c["mask"] is not None:
            d_act = d_act * c["mask"]
        d_pre = d_act * (1.0 - c["act"] ** 2) if self.cfg.activation == "tanh" else d_act
        g["W1"] = c["pooled"].T @ d_pre
        g["b1"] = d_pre.sum(axis=0)
        d_pooled = d_pre @ p["W1"].T
        gX = np.repeat(d_pooled[:, None, :] / c["T"], c["T"], axis=1)
        return g, gX


class AttentionBackbone(Backbone):
    """Pre-norm transformer encoder with learnable positions and mean pooling.

    ``H0 = X W_proj + E_pos``; each layer applies ``H += MHA(LN(H))`` and
    ``H += FFN(LN(H))`` (GELU); a final LayerNorm precedes time averaging.
    """

    kind = "attention"

    def __init__(self, cfg: BackboneConfig, channels: int, t_steps: int, dropout: float = 0.0,
                 rng: np.random.Generator | None = None):
        super().__init__(cfg, channels, t_steps, dropout)
        rng = rng if rng is not None else np.random.default_rng(0)
        D, F = cfg.d_model, cfg.ff_dim
        self._add("W_proj", _uniform(rng, channels, (channels, D)))
        self._add("E_pos", _uniform(rng, D, (t_steps, D)), trainable=not cfg.freeze_pos)
        for l in range(cfg.n_layers):
            self._add(f"l{l}.ln1_g", np.ones(D))
            self._add(f"l{l}.ln1_b", np.zeros(D))
            for name in ("Wq", "Wk", "Wv", "Wo"):
                self._add(f"l{l}.{name}", _uniform(rng, D, (D, D)))
            self._add(f"l{l}.ln2_g", np.ones(D))
            self._add(f"l{l}.ln2_b", np.zeros(D))
            self._add(f"l{l}.W1", _uniform(rng, D, (D, F)))
            self._add(f"l{l}.b1", _uniform(rng, D, F))
            self._add(f"l{l}.W2", _uniform(rng, F, (F, D)))
            self._add(f"l{l}.b2", _uniform(rng, F, D))
        self._add("lnf_g", np.ones(D))
        self._add("lnf_b", np.zeros(D))

    def _check_input(self, X):
        X, single = super()._check_input(X)
        if X.shape[1] != self.t_steps:
            raise ConfigError(f"attention backbone built for T={self.t_steps}, got T={X.shape[1]}")
        return X, single

    def _split(self, M):
        n, T, D = M.shape
        h = self.cfg.n_heads
        return M.reshape(n, T, h, D // h).transpose(0, 2, 1, 3)

    @staticmethod
    def _merge(M):
        n, h, T, dk = M.shape
        return M.transpose(0, 2, 1, 3).reshape(n, T, h * dk)

    def _forward(self, X, train, rng, cache):
        p = self.params
        dk = self.cfg.d_model // self.cfg.n_heads
        scale = 1.0 / math.sqrt(dk)
        H = X @ p["W_proj"] + p["E_pos"]
        cache["X"] = X
        layers = []
        for l in range(self.cfg.n_layers):
            k = f"l{l}."
            A, ln1 = layer_norm(H, p[k + "ln1_g"], p[k + "ln1_b"])
            Q, K, V = (self._split(A @ p[k + w]) for w in ("Wq", "Wk", "Wv"))
            P = softmax(Q @ K.transpose(0, 1, 3, 2) * scale)
            O = self._merge(P @ V)
            M = O @ p[k + "Wo"]
            m1 = dropout_mask(rng, M.shape, self.dropout, train)
            H = H + (M if m1 is None else M * m1)
            B, ln2 = layer_norm(H, p[k + "ln2_g"], p[k + "ln2_b"])
            U = B @ p[k + "W1"] + p[k + "b1"]
            Gu, t = gelu(U)
            Fo = Gu @ p[k + "W2"] + p[k + "b2"]
            m2 = dropout_mask(rng, Fo.shape, self.dropout, train)
            H = H + (Fo if m2 is None else Fo * m2)
            layers.append(dict(A=A, ln1=ln1, Q=Q, K=K, V=V, P=P, O=O, m1=m1,
                               B=B, ln2=ln2, U=U, t=t, Gu=Gu, m2=m2))
        Hf, lnf = layer_norm(H, p["lnf_g"], p["lnf_b"])
        cache.update(layers=layers, lnf=lnf, T=X.shape[1], scale=scale)
        return Hf.mean(axis=1)

    def attention_maps(self, tape: Tape) -> list[np.ndarray]:
        """Per-layer attention probabilities, each (n, heads, T, T)."""
        return [layer["P"] for layer in tape.cache["layers"]]

    def _backward(self, G, c):
        p = self.params
        g: dict[str, np.ndarray] = {}
        T = c["T"]
        dHf = np.repeat(G[:, None, :] / T, T, axis=1)
        dH, g["lnf_g"], g["lnf_b"] = layer_norm_backward(dHf, p["lnf_g"], c["lnf"])
        for l in reversed(range(self.cfg.n_layers)):
            k = f"l{l}."
            s = c["layers"][l]
            # feed-forward sublayer
            dFo = dH if s["m2"] is None else dH * s["m2"]
            g[k + "W2"] = np.einsum("ntf,ntd->fd", s["Gu"], dFo)
            g[k + "b2"] = dFo.sum(axis=(0, 1))
            dGu = dFo @ p[k + "W2"].T
            dU = dGu * gelu_grad(s["U"], s["t"])
            g[k + "W1"] = np.einsum("ntd,ntf->df", s["B"], dU)
            g[k + "b1"] = dU.sum(axis=(0, 1))
            dB = dU @ p[k + "W1"].T
            dH2, g[k + "ln2_g"], g[k + "ln2_b"] = layer_norm_backward(dB, p[k + "ln2_g"], s["ln2"])
            dH = dH + dH2
            # attention sublayer
            dM = dH if s["m1"] is None else dH * s["m1"]
            g[k + "Wo"] = np.einsum("ntd,nte->de", s["O"], dM)
            dO = self._split(dM @ p[k + "Wo"].T)
            P, Q, K, V = s["P"], s["Q"], s["K"], s["V"]
            dV = P.transpose(0, 1, 3, 2) @ dO
            dP = dO @ V.transpose(0, 1, 3, 2)
            dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * c["scale"]
            dQ = dS @ K
            dK = dS.transpose(0, 1, 3, 2) @ Q
            A = s["A"]
            dA = np.zeros_like(A)
            for name, dX in (("Wq", dQ), ("Wk", dK), ("Wv", dV)):
                dX = self._merge(dX)
                g[k + name] = np.einsum("ntd,nte->de", A, dX)
                dA += dX @ p[k + name].T
            dH1, g[k + "ln1_g"], g[k + "ln1_b"] = layer_norm_backward(dA, p[k + "ln1_g"], s["ln1"])
            dH = dH + dH1
        g["E_pos"] = dH.sum(axis=0)
        g["W_proj"] = np.einsum("ntc,ntd->cd", c["X"], dH)
        gX = dH @ p["W_proj"].T
        return g, gX


def build_backbone(cfg: BackboneConfig, channels: int, t_steps: int, dropout: float = 0.0,
                   seed: int | np.random.Generator = 0) -> Backbone:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cls = MLPBackbone if cfg.kind == "mlp" else AttentionBackbone
    return cls(cfg, channels, t_steps, dropout, rng)
