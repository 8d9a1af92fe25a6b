"""Adapter algebra for a frozen base weight ``w0`` (d x k).

Four parameterizations of the trained weight are supported:

* ``FULL``      W = w0 + dW, with the full-size dW trainable.
* ``LORA``      W = w0 + (alpha/r) * B A, with B (d x r) and A (r x k)
                both trainable; A starts Gaussian, B starts at zero.
* ``FFA_LORA``  same composition as LORA but A is frozen at its random
                initialization and only B trains.
* ``QVP``       W = w0 + Q0 V P0, with frozen Gaussian Q0 (d x r) and
                P0 (r x k) and only the small core V (r x r) trainable,
                starting at zero. No alpha/r scaling is applied.

Because every trainable factor that starts at zero (B, V, dW) really is zero
at construction, the effective weight of a fresh adapter equals w0 bit-exactly.

Gradients: given the loss gradient with respect to the effective weight,
grad_w, the factor gradients are (s = alpha/r)

    LORA:      dB = s * grad_w @ A.T        dA = s * B.T @ grad_w
    FFA_LORA:  dB = s * grad_w @ A.T
    QVP:       dV = Q0.T @ grad_w @ P0.T
    FULL:      d(dW) = grad_w

i.e. the scaling factor propagates into the factor gradients via the chain
rule. Updates are simultaneous: all trainable factors step with gradients
evaluated at the step's start.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np

from .linalg import (
    DimensionError,
    RngStream,
    as_matrix,
    gaussian_matrix,
    orthonormal_rows,
    top_r_right_singular_vectors,
)

__all__ = [
    "AdapterKind",
    "InitScheme",
    "AdapterConfig",
    "AdapterState",
    "AdapterGrads",
    "init_adapter",
    "effective_weight",
    "backprop_to_adapter",
    "apply_update",
    "flatten_trainable",
    "unflatten_trainable",
    "trainable_param_count",
    "grads_from_flat",
    "per_sample_flat_grads",
]


class AdapterKind(enum.Enum):
    FULL = "full"
    LORA = "lora"
    FFA_LORA = "ffa_lora"
    QVP = "qvp"


class InitScheme(enum.Enum):
    KAIMING_GAUSSIAN = "kaiming_gaussian"
    ORTHOGONAL_ROWS = "orthogonal_rows"
    SVD_OF_BASE = "svd_of_base"


@dataclass(frozen=True)
class AdapterConfig:
    """Static description of an adapter.

    ``rank`` and ``alpha`` are ignored for FULL. ``init`` selects how A is
    initialized (QVP ignores it: Q0 and P0 are always Gaussian with variances
    1/r and 1/k). ``init_std`` overrides the Kaiming-Gaussian std for A
    (default 1/sqrt(r)).
    """

    kind: AdapterKind
    rank: int = 1
    alpha: float = 1.0
    init: InitScheme = InitScheme.KAIMING_GAUSSIAN
    seed: int = 0
    init_std: float | None = None

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")

    @property
    def scaling(self) -> float:
        """alpha/r multiplier on the B A product (1 for FULL and QVP)."""
        if self.kind in (AdapterKind.LORA, AdapterKind.FFA_LORA):
            return self.alpha / self.rank
        return 1.0


@dataclass(frozen=True, eq=False)
class AdapterState:
    """Base weight plus the scheme-specific factor matrices.

    Value type: operations return new states; arrays are never mutated in
    place, so states are safe to share read-only across threads. Frozen
    factors (w0; a for FFA_LORA; q0, p0 for QVP) are carried by reference
    through updates and therefore stay bitwise identical.
    """

    config: AdapterConfig
    w0: np.ndarray
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    q0: np.ndarray | None = None
    p0: np.ndarray | None = None
    v: np.ndarray | None = None
    delta_w: np.ndarray | None = None

    @property
    def kind(self) -> AdapterKind:
        return self.config.kind

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape

    def trainable_factors(self) -> list[tuple[str, np.ndarray]]:
        """(field name, matrix) pairs in the canonical flatten order:
        B before A for LORA; single factor otherwise."""
        kind = self.kind
        if kind == AdapterKind.FULL:
            return [("delta_w", self.delta_w)]
        if kind == AdapterKind.LORA:
            return [("b", self.b), ("a", self.a)]
        if kind == AdapterKind.FFA_LORA:
            return [("b", self.b)]
        return [("v", self.v)]

    def frozen_factors(self) -> list[tuple[str, np.ndarray]]:
        out = [("w0", self.w0)]
        if self.kind == AdapterKind.FFA_LORA:
            out.append(("a", self.a))
        elif self.kind == AdapterKind.QVP:
            out.extend([("q0", self.q0), ("p0", self.p0)])
        return out


@dataclass(frozen=True, eq=False)
class AdapterGrads:
    """Gradient matrices mirroring the trainable factors of an AdapterState."""

    kind: AdapterKind
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    v: np.ndarray | None = None
    delta_w: np.ndarray | None = None

    def factors(self) -> list[tuple[str, np.ndarray]]:
        if self.kind == AdapterKind.FULL:
            return [("delta_w", self.delta_w)]
        if self.kind == AdapterKind.LORA:
            return [("b", self.b), ("a", self.a)]
        if self.kind == AdapterKind.FFA_LORA:
            return [("b", self.b)]
        return [("v", self.v)]


def init_adapter(cfg: AdapterConfig, w0: np.ndarray) -> AdapterState:
    """Build a fresh adapter over ``w0``; its effective weight equals w0.

    Deterministic in cfg.seed: identical configs build identical states.
    """
    w0 = as_matrix(w0)
    d, k = w0.shape
    if cfg.kind != AdapterKind.FULL:
        # Gaussian-initialized factors stay well-formed for any rank up to
        # max(d, k) (the adapter is merely overcomplete past min(d, k));
        # the structured inits have hard dimensional limits.
        if cfg.rank > max(d, k):
            raise DimensionError(f"rank {cfg.rank} exceeds max(d, k) = {max(d, k)}")
        if cfg.init == InitScheme.SVD_OF_BASE and cfg.rank > min(d, k):
            raise DimensionError(
                f"SVD init supports rank <= min(d, k) = {min(d, k)}, got {cfg.rank}"
            )
        if cfg.init == InitScheme.ORTHOGONAL_ROWS and cfg.rank > k:
            raise DimensionError(
                f"orthogonal rows need rank <= k = {k}, got {cfg.rank}"
            )

    rng = RngStream(cfg.seed, "adapter-init")
    r = cfg.rank
    if cfg.kind == AdapterKind.FULL:
        return AdapterState(config=cfg, w0=w0, delta_w=np.zeros((d, k)))
    if cfg.kind == AdapterKind.QVP:
        q0 = gaussian_matrix(d, r, 1.0 / np.sqrt(r), rng)
        p0 = gaussian_matrix(r, k, 1.0 / np.sqrt(k), rng)
        return AdapterState(config=cfg, w0=w0, q0=q0, p0=p0, v=np.zeros((r, r)))

    if cfg.init == InitScheme.KAIMING_GAUSSIAN:
        std = cfg.init_std if cfg.init_std is not None else 1.0 / np.sqrt(r)
        a = gaussian_matrix(r, k, std, rng)
    elif cfg.init == InitScheme.ORTHOGONAL_ROWS:
        a = orthonormal_rows(r, k, rng)
    else:
        a = top_r_right_singular_vectors(w0, r)
    return AdapterState(config=cfg, w0=w0, a=a, b=np.zeros((d, r)))


def effective_weight(state: AdapterState) -> np.ndarray:
    """The composed d x k weight the model actually uses."""
    kind = state.kind
    if kind == AdapterKind.FULL:
        return state.w0 + state.delta_w
    if kind == AdapterKind.QVP:
        return state.w0 + state.q0 @ state.v @ state.p0
    return state.w0 + state.config.scaling * (state.b @ state.a)


def backprop_to_adapter(state: AdapterState, grad_w: np.ndarray) -> AdapterGrads:
    """Map a d x k loss gradient on the effective weight to factor gradients."""
    grad_w = np.asarray(grad_w, dtype=np.float64)
    if grad_w.shape != state.shape:
        raise DimensionError(
            f"grad_w shape {grad_w.shape} does not match weight shape {state.shape}"
        )
    kind = state.kind
    if kind == AdapterKind.FULL:
        return AdapterGrads(kind=kind, delta_w=grad_w.copy())
    if kind == AdapterKind.QVP:
        return AdapterGrads(kind=kind, v=state.q0.T @ grad_w @ state.p0.T)
    s = state.config.scaling
    grad_b = s * (grad_w @ state.a.T)
    if kind == AdapterKind.FFA_LORA:
        return AdapterGrads(kind=kind, b=grad_b)
    return AdapterGrads(kind=kind, b=grad_b, a=s * (state.b.T @ grad_w))


def apply_update(state: AdapterState, grads: AdapterGrads, eta: float) -> AdapterState:
    """Simultaneous step: every trainable factor F becomes F - eta * dF."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if grads.kind != state.kind:
        raise ValueError(f"gradient kind {grads.kind} does not match state {state.kind}")
    updates = {}
    for (name, factor), (gname, grad) in zip(state.trainable_factors(), grads.factors()):
        assert name == gname
        if factor.shape != grad.shape:
            raise DimensionError(f"gradient for {name} has shape {grad.shape}, "
                                 f"expected {factor.shape}")
        updates[name] = factor - eta * grad
    return dataclasses.replace(state, **updates)


def flatten_trainable(state: AdapterState) -> np.ndarray:
    """Concatenate the trainable factors into one vector (B before A)."""
    return np.concatenate([f.ravel() for _, f in state.trainable_factors()])


def unflatten_trainable(state: AdapterState, vector: np.ndarray) -> AdapterState:
    """Inverse of flatten_trainable; round-trips bitwise."""
    vector = np.asarray(vector, dtype=np.float64).ravel()
    expected = sum(f.size for _, f in state.trainable_factors())
    if vector.size != expected:
        raise DimensionError(
            f"vector length {vector.size} does not match trainable size {expected}"
        )
    updates = {}
    offset = 0
    for name, factor in state.trainable_factors():
        updates[name] = vector[offset : offset + factor.size].reshape(factor.shape).copy()
        offset += factor.size
    return dataclasses.replace(state, **updates)


def trainable_param_count(cfg: AdapterConfig, d: int, k: int) -> int:
    """FULL -> d*k, LORA -> r*(d+k), FFA_LORA -> r*d, QVP -> r*r."""
    if cfg.kind == AdapterKind.FULL:
        return d * k
    if cfg.kind == AdapterKind.LORA:
        return cfg.rank * (d + k)
    if cfg.kind == AdapterKind.FFA_LORA:
        return cfg.rank * d
    return cfg.rank * cfg.rank


def grads_from_flat(state: AdapterState, vector: np.ndarray) -> AdapterGrads:
    """Reshape a flattened trainable-gradient vector into AdapterGrads."""
    vector = np.asarray(vector, dtype=np.float64).ravel()
    expected = sum(f.size for _, f in state.trainable_factors())
    if vector.size != expected:
        raise DimensionError(
            f"vector length {vector.size} does not match trainable size {expected}"
        )
    fields = {}
    offset = 0
    for name, factor in state.trainable_factors():
        fields[name] = vector[offset : offset + factor.size].reshape(factor.shape).copy()
        offset += factor.size
    return AdapterGrads(kind=state.kind, **fields)


def per_sample_flat_grads(state: AdapterState, x: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Per-sample flattened trainable gradients for losses whose per-sample
    weight gradient is the outer product x_i^T delta_i.

    x is (n, d), deltas is (n, k); returns (n, p) with p the trainable
    parameter count near-flattened in the same order as flatten_trainable.
    Row i equals flatten_trainable of backprop_to_adapter on x_i^T delta_i.
    """
    x = np.asarray(x, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    n = x.shape[0]
    kind = state.kind
    if kind == AdapterKind.FULL:
        return np.einsum("nd,nk->ndk", x, deltas).reshape(n, -1)
    if kind == AdapterKind.QVP:
        left = x @ state.q0            # (n, r)
        right = deltas @ state.p0.T    # (n, r)
        return np.einsum("ni,nj->nij", left, right).reshape(n, -1)
    s = state.config.scaling
    u = deltas @ state.a.T             # (n, r)
    grad_b = s * np.einsum("nd,nr->ndr", x, u)
    if kind == AdapterKind.FFA_LORA:
        return grad_b.reshape(n, -1)
    w = x @ state.b                    # (n, r)
    grad_a = s * np.einsum("nr,nk->nrk", w, deltas)
    return np.concatenate([grad_b.reshape(n, -1), grad_a.reshape(n, -1)], axis=1)
