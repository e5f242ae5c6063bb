"""Per-label classifier heads over fixed feature vectors.

Parameters for all T heads are stored stacked, one ``(W, b)`` pair per layer
with ``W`` of shape ``(T, out, in)`` and ``b`` of shape ``(T, out)``. A linear
head is the single-layer case ``(T, 1, d)``. Hidden layers use ReLU; the last
layer emits one logit per label, turned into a probability by a clamped
sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from ._io import FORMAT_VERSION, read_json, write_json

P_MIN = 1e-7

Layers = list[tuple[np.ndarray, np.ndarray]]


class ModelError(ValueError):
    """Structural problems: dimension mismatches, malformed checkpoints."""


@dataclass
class HeadParams:
    """One label's head, layers as ``(W (out, in), b (out,))``."""

    kind: str
    layers: Layers

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in self.layers])


@dataclass
class ModelParams:
    kind: str
    layers: Layers

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ModelError(f"unknown head kind {self.kind!r}")
        if not self.layers:
            raise ModelError("a head needs at least one layer")
        T = self.layers[0][0].shape[0]
        prev = self.layers[0][0].shape[2]
        for W, b in self.layers:
            if W.ndim != 3 or b.ndim != 2 or W.shape[0] != T or b.shape != W.shape[:2]:
                raise ModelError("layer shapes must be W (T, out, in) and b (T, out)")
            if W.shape[2] != prev:
                raise ModelError(f"layer input {W.shape[2]} does not chain from {prev}")
            prev = W.shape[1]
        if prev != 1:
            raise ModelError("last layer must have a single output unit")
        if self.kind == "linear" and len(self.layers) != 1:
            raise ModelError("a linear head has exactly one layer")
        if not all(np.isfinite(W).all() and np.isfinite(b).all() for W, b in self.layers):
            raise ModelError("non-finite parameters")

    @property
    def n_labels(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def n_features(self) -> int:
        return self.layers[0][0].shape[2]

    @property
    def dims(self) -> list[int]:
        return [self.n_features] + [W.shape[1] for W, _ in self.layers]

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, [(W.copy(), b.copy()) for W, b in self.layers])

    def head(self, t: int) -> HeadParams:
        return HeadParams(self.kind, [(W[t].copy(), b[t].copy()) for W, b in self.layers])

    @classmethod
    def from_heads(cls, heads: Sequence[HeadParams]) -> "ModelParams":
        kinds = {h.kind for h in heads}
        if len(kinds) != 1:
            raise ModelError("all heads must share one kind")
        n_layers = len(heads[0].layers)
        layers = [
            (np.stack([h.layers[i][0] for h in heads]), np.stack([h.layers[i][1] for h in heads]))
            for i in range(n_layers)
        ]
        return cls(kinds.pop(), layers)

    def equals(self, other: "ModelParams") -> bool:
        return self.kind == other.kind and len(self.layers) == len(other.layers) and all(
            np.array_equal(W1, W2) and np.array_equal(b1, b2)
            for (W1, b1), (W2, b2) in zip(self.layers, other.layers)
        )


class ReferenceParams:
    """Frozen snapshot of a model; its arrays are read-only copies."""

    def __init__(self, params: ModelParams):
        layers = []
        for W, b in params.layers:
            W, b = W.copy(), b.copy()
            W.setflags(write=False)
            b.setflags(write=False)
            layers.append((W, b))
        self._params = ModelParams(params.kind, layers)

    @property
    def params(self) -> ModelParams:
        return self._params

    @property
    def kind(self):
        return self._params.kind

    @property
    def layers(self):
        return self._params.layers

    def thaw(self) -> ModelParams:
        """A writable copy, e.g. to start training from the reference."""
        return self._params.copy()

    def __eq__(self, other):
        if not isinstance(other, ReferenceParams):
            return NotImplemented
        return self._params.equals(other._params)

    __hash__ = None


def _params(p) -> ModelParams:
    return p.params if isinstance(p, ReferenceParams) else p


def snapshot_reference(params) -> ReferenceParams:
    return ReferenceParams(_params(params))


def init_params(
    n_labels: int,
    n_features: int,
    kind: str = "linear",
    hidden: Sequence[int] = (16, 8),
    rng: np.random.Generator | int = 0,
    scale: float = 0.01,
) -> ModelParams:
    """Linear heads: weights uniform in [-scale, scale], zero bias.

    MLP heads use He-uniform hidden layers (tiny uniform weights would leave
    the ReLU stack with vanishing signal) and the ``scale`` rule on the
    output layer.
    """
    rng = np.random.default_rng(rng)
    dims = [n_features] + (list(hidden) if kind == "mlp" else []) + [1]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        lim = scale if last else np.sqrt(6.0 / fan_in)
        W = rng.uniform(-lim, lim, size=(n_labels, fan_out, fan_in))
        layers.append((W, np.zeros((n_labels, fan_out))))
    return ModelParams(kind, layers)


def _check_features(params: ModelParams, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[-1] != params.n_features:
        raise ModelError(f"feature length {Z.shape[-1]} does not match head input {params.n_features}")
    return Z


def _forward_cache(params: ModelParams, Z: np.ndarray):
    """Logits (B, T) plus per-layer inputs/preactivations for backprop."""
    if params.kind == "linear":
        W, b = params.layers[0]
        return Z @ W[:, 0, :].T + b[:, 0], None
    acts = []
    pre = None
    a = None
    for i, (W, b) in enumerate(params.layers):
        if i == 0:
            pre = np.einsum("toi,bi->tbo", W, Z) + b[:, None, :]
        else:
            pre = np.einsum("toi,tbi->tbo", W, a) + b[:, None, :]
        if i < len(params.layers) - 1:
            acts.append((a, pre))
            a = np.maximum(pre, 0.0)
        else:
            acts.append((a, pre))
    return pre[:, :, 0].T, acts


def logits(params, Z) -> np.ndarray:
    params = _params(params)
    Z = _check_features(params, Z)
    single = Z.ndim == 1
    u, _ = _forward_cache(params, np.atleast_2d(Z))
    return u[0] if single else u


def clamp_probability(u: np.ndarray) -> np.ndarray:
    return np.clip(expit(u), P_MIN, 1.0 - P_MIN)


def forward(params, features) -> np.ndarray:
    """Clamped per-label probabilities; ``features`` is (d,) or (B, d)."""
    return clamp_probability(logits(params, features))


def unclamped(m) -> np.ndarray:
    """True where a clamped probability did not hit the clamp."""
    m = np.asarray(m)
    return (m > P_MIN) & (m < 1.0 - P_MIN)


def backprop(params, Z, C) -> Layers:
    """Gradient of ``sum_{i,t} C[i, t] * logit_t(z_i)`` w.r.t. every parameter.

    ``C`` holds upstream derivatives dL/d(logit), shape (B, T); the result has
    the same layout as ``params.layers``. Heads with an all-zero column get an
    exactly zero gradient.
    """
    params = _params(params)
    Z = np.atleast_2d(_check_features(params, Z))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if params.kind == "linear":
        W, _ = params.layers[0]
        return [((C.T @ Z)[:, None, :], C.sum(axis=0)[:, None])]
    _, acts = _forward_cache(params, Z)
    grads: Layers = [None] * len(params.layers)
    g = C.T[:, :, None]  # (T, B, out)
    for i in range(len(params.layers) - 1, -1, -1):
        a_in, _ = acts[i]
        if i == 0:
            dW = np.einsum("tbo,bi->toi", g, Z)
        else:
            dW = np.einsum("tbo,tbi->toi", g, a_in)
        grads[i] = (dW, g.sum(axis=1))
        if i > 0:
            W, _ = params.layers[i]
            _, pre_below = acts[i - 1]
            g = np.einsum("tbo,toi->tbi", g, W) * (pre_below > 0)
    return grads


def head_gradient(params, features, coeffs: dict[int, float]) -> dict[int, HeadParams]:
    """Sparse per-head gradients for one instance from logit coefficients."""
    params = _params(params)
    z = np.asarray(features, dtype=np.float64)
    C = np.zeros((1, params.n_labels))
    for t, c in coeffs.items():
        C[0, t] += c
    full = backprop(params, z[None, :], C)
    return {t: HeadParams(params.kind, [(dW[t], db[t]) for dW, db in full]) for t in coeffs}


def backward_logscore(params, features, label_index: int) -> HeadParams:
    """Gradient of log m(x; theta_t) w.r.t. head t's parameters.

    For a linear head this is ``(1 - m) z`` and ``(1 - m)``; it is zero when
    m sits on the clamp.
    """
    params = _params(params)
    m = forward(params, features)[label_index]
    coeff = float((1.0 - m) * unclamped(m))
    return head_gradient(params, features, {label_index: coeff})[label_index]


# -- checkpoints -------------------------------------------------------------


def checkpoint_dict(params, seed: int | None = None, meta: dict | None = None) -> dict:
    params = _params(params)
    heads = [params.head(t).flat().tolist() for t in range(params.n_labels)]
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": params.kind,
        "dims": params.dims,
        "n_labels": params.n_labels,
        "seed": seed,
        "heads": heads,
    }
    if meta:
        doc["meta"] = meta
    return doc


def params_from_dict(doc: dict) -> ModelParams:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    dims = doc["dims"]
    heads = []
    for flat in doc["heads"]:
        flat = np.asarray(flat, dtype=np.float64)
        layers, pos = [], 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            W = flat[pos : pos + fan_in * fan_out].reshape(fan_out, fan_in)
            pos += fan_in * fan_out
            b = flat[pos : pos + fan_out]
            pos += fan_out
            layers.append((W, b))
        if pos != flat.size:
            raise ModelError("checkpoint head length does not match dims")
        heads.append(HeadParams(doc["kind"], layers))
    if len(heads) != doc["n_labels"]:
        raise ModelError("checkpoint head count does not match n_labels")
    return ModelParams.from_heads(heads)


def save_checkpoint(path, params, seed: int | None = None, meta: dict | None = None) -> None:
    write_json(path, checkpoint_dict(params, seed, meta))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = read_json(path)
    return params_from_dict(doc), doc
