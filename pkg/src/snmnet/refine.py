"""Geometric refinement: batch normalisation cascaded with L2 projection.

Features leave this module on the unit hypersphere, so downstream distances
depend on direction only. Both stages can be switched off for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from snmnet.errors import ContractError, DegenerateFeatureError, InvalidInputError


@dataclass
class BNState:
    """Batch-norm parameters and running statistics for ``dim`` features.

    With ``affine=False`` the scale/shift stay at 1/0 and are never trained,
    which is the plain ``(z - mean) / sqrt(var + eps)`` form.
    """

    dim: int
    eps: float = 1e-5
    momentum: float = 0.1
    affine: bool = True
    mode: str = "train"
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    gamma: np.ndarray = field(default=None)
    beta: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.eps > 0:
            raise InvalidInputError("BN eps must be > 0")
        if self.mode not in ("train", "eval"):
            raise InvalidInputError(f"BN mode must be 'train' or 'eval', got {self.mode!r}")
        d = self.dim
        self.running_mean = np.zeros(d) if self.running_mean is None else np.array(self.running_mean, float)
        self.running_var = np.ones(d) if self.running_var is None else np.array(self.running_var, float)
        self.gamma = np.ones(d) if self.gamma is None else np.array(self.gamma, float)
        self.beta = np.zeros(d) if self.beta is None else np.array(self.beta, float)

    def copy(self) -> "BNState":
        return BNState(self.dim, self.eps, self.momentum, self.affine, self.mode,
                       self.running_mean.copy(), self.running_var.copy(),
                       self.gamma.copy(), self.beta.copy())


def bn_forward(batch: np.ndarray, state: BNState):
    """Normalise ``batch`` (n, d). Returns ``(out, cache)``.

    Train mode normalises with the biased batch variance and folds the batch
    statistics into the running estimates (unbiased variance, EMA with
    ``momentum``). Eval mode reads the running estimates and mutates nothing.
    """
    Z = np.asarray(batch, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != state.dim:
        raise InvalidInputError(f"BN expects (n, {state.dim}) input, got {Z.shape}")
    if state.mode == "train":
        n = Z.shape[0]
        if n < 2:
            raise InvalidInputError(f"train-mode batch norm needs a batch of at least 2, got {n}")
        mean = Z.mean(axis=0)
        var = Z.var(axis=0)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * var * (n / (n - 1))
    else:
        mean, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (Z - mean) * inv
    out = xhat * state.gamma + state.beta
    return out, {"xhat": xhat, "inv": inv, "mode": state.mode}


def bn_backward(cache: dict, grad: np.ndarray, state: BNState):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv = cache["xhat"], cache["inv"]
    g_gamma = (grad * xhat).sum(axis=0)
    g_beta = grad.sum(axis=0)
    dxhat = grad * state.gamma
    if cache["mode"] == "train":
        dz = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
    else:
        dz = dxhat * inv
    return dz, g_gamma, g_beta


def l2_normalize(z_hat: np.ndarray) -> np.ndarray:
    """Project each row (or a single vector) onto the unit sphere.

    Raises:
        DegenerateFeatureError: a row is exactly zero; there is no direction
            to keep and none is invented.
    """
    Z = np.asarray(z_hat, dtype=np.float64)
    norms = np.linalg.norm(Z, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateFeatureError("cannot L2-normalise a zero (or non-finite) feature vector")
    return Z / norms


def l2_backward(F: np.ndarray, norms: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient through ``f = z / ||z||``: the tangential part of ``grad``, scaled by ``1/||z||``."""
    return (grad - F * (F * grad).sum(axis=-1, keepdims=True)) / norms


class Refiner:
    """BN -> L2 stack with a tape-based backward, switchable per stage."""

    def __init__(self, dim: int, use_bn: bool = True, use_l2n: bool = True,
                 affine: bool = True, eps: float = 1e-5, momentum: float = 0.1):
        self.dim = dim
        self.use_bn = use_bn
        self.use_l2n = use_l2n
        self.bn = BNState(dim, eps=eps, momentum=momentum, affine=affine)
        self.version = 0

    @property
    def params(self) -> dict[str, np.ndarray]:
        if self.use_bn and self.bn.affine:
            return {"bn_gamma": self.bn.gamma, "bn_beta": self.bn.beta}
        return {}

    @property
    def trainable(self) -> dict[str, bool]:
        return {k: True for k in self.params}

    def mark_updated(self):
        self.version += 1

    def train(self):
        self.bn.mode = "train"

    def eval(self):
        self.bn.mode = "eval"

    def forward(self, Z: np.ndarray):
        """Refine a batch (n, d) of raw features. Returns ``(F, tape)``."""
        Z = np.asarray(Z, dtype=np.float64)
        tape = {"version": self.version, "owner": id(self)}
        out = Z
        if self.use_bn:
            out, tape["bn"] = bn_forward(out, self.bn)
        if self.use_l2n:
            norms = np.linalg.norm(out, axis=-1, keepdims=True)
            out = l2_normalize(out)
            tape["l2"] = (out, norms)
        return out, tape

    def backward(self, tape: dict, grad_F: np.ndarray):
        """Return ``(grad_z_raw, param_grads)``."""
        if tape["owner"] != id(self) or tape["version"] != self.version:
            raise ContractError("stale tape: refinement parameters changed since the forward pass")
        g = np.asarray(grad_F, dtype=np.float64)
        grads: dict[str, np.ndarray] = {}
        if self.use_l2n:
            g = l2_backward(*tape["l2"], g)
        if self.use_bn:
            g, g_gamma, g_beta = bn_backward(tape["bn"], g, self.bn)
            if self.bn.affine:
                grads = {"bn_gamma": g_gamma, "bn_beta": g_beta}
        return g, grads

    def refine_eval(self, Z: np.ndarray) -> np.ndarray:
        """Eval-mode refinement as a pure function of ``(Z, state)``."""
        if self.use_bn and self.bn.mode != "eval":
            raise ContractError("refine_eval requires the BN state in eval mode")
        return self.forward(Z)[0]
