"""Attention-augmented recurrent knowledge-tracing model in numpy.

Per step t of a sequence::

    h_t     = tanh(W_xh x_{t-1} + W_hh h_{t-1} + b_h),   h_0 = 0
    v_t     = B[:, e_t]
    alpha_t = softmax(v_t^T F)                  (attention modes)
    w_t     = F_v alpha_t                      (attention modes)
    w_t     = W_r h_t                          (other modes)
    p_t     = tanh(W1 [w_t, v_t, h_t] + b1)
    y_t     = sigmoid(W2 p_t + b2)

Gradients are computed by hand with backpropagation through time. All
sequence-level entry points are thin wrappers around the padded batch
versions ``forward_batch`` / ``backward_batch``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import EncodedStep

PROB_EPS = 1e-7
CHECKPOINT_VERSION = 1


class Mode(str, enum.Enum):
    DKT = "dkt"
    DKT_A = "dkt-a"
    AA_DKT = "aa-dkt"
    AA_DKTA = "aa-dkta"

    @property
    def attention(self) -> bool:
        return self in (Mode.DKT_A, Mode.AA_DKTA)

    @property
    def clusters(self) -> bool:
        return self in (Mode.AA_DKT, Mode.AA_DKTA)

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        if isinstance(value, Mode):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}") from None


class GradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelDims:
    d_k: int
    d_h: int
    m: int  # one-hot width of the interaction block is 2m
    K_clusters: int
    N: int  # number of knowledge concepts
    n_exercises: int

    def __post_init__(self):
        for name in ("d_k", "d_h", "m", "N", "n_exercises"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.K_clusters < 0:
            raise ValueError("K_clusters must be nonnegative")

    def input_width(self, mode: Mode) -> int:
        return 2 * self.m + (self.K_clusters if mode.clusters else 0)

    def shapes(self, mode: Mode) -> dict[str, tuple[int, ...]]:
        shapes = {"B": (self.d_k, self.n_exercises)}
        if mode.attention:
            shapes["F"] = (self.d_k, self.N)
            shapes["F_v"] = (self.d_k, self.N)
        else:
            shapes["W_r"] = (self.d_k, self.d_h)
        shapes.update({
            "W_xh": (self.d_h, self.input_width(mode)),
            "W_hh": (self.d_h, self.d_h),
            "b_h": (self.d_h,),
            "W1": (self.d_k, 2 * self.d_k + self.d_h),
            "b1": (self.d_k,),
            "W2": (1, self.d_k),
            "b2": (1,),
        })
        return shapes


@dataclass
class ModelParams:
    dims: ModelDims
    mode: Mode
    tensors: dict[str, np.ndarray]
    seed: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, self.mode, {k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def census(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def to_json(self) -> dict:
        return {
            "format": "aadkta-checkpoint",
            "schema_version": CHECKPOINT_VERSION,
            "mode": self.mode.value,
            "seed": self.seed,
            "dims": self.dims.__dict__,
            "tensors": {
                name: {"shape": list(t.shape), "data": t.ravel().tolist()}
                for name, t in self.tensors.items()
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelParams":
        if obj.get("format") != "aadkta-checkpoint":
            raise ValueError("not a checkpoint file")
        if obj.get("schema_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {obj.get('schema_version')}")
        dims = ModelDims(**obj["dims"])
        mode = Mode.parse(obj["mode"])
        tensors = {
            name: np.array(t["data"], dtype=np.float64).reshape(t["shape"])
            for name, t in obj["tensors"].items()
        }
        expected = dims.shapes(mode)
        got = {k: v.shape for k, v in tensors.items()}
        if got != expected:
            raise ValueError(f"checkpoint tensor shapes {got} do not match dims {expected}")
        return cls(dims, mode, tensors, int(obj.get("seed", 0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class Gradients:
    tensors: dict[str, np.ndarray]
    norm: float = 0.0  # global norm before clipping

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients({k: v + other.tensors[k] for k, v in self.tensors.items()})


@dataclass
class StepOutput:
    h_t: np.ndarray
    alpha: np.ndarray | None
    w_t: np.ndarray
    p_t: np.ndarray
    y_t: float


def init_params(dims: ModelDims, seed: int, mode: Mode | str = Mode.AA_DKTA) -> ModelParams:
    mode = Mode.parse(mode)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in dims.shapes(mode).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            s = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-s, s, size=shape)
    return ModelParams(dims, mode, tensors, seed)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def rnn_step(h_prev: np.ndarray, x_prev: np.ndarray, params: ModelParams) -> np.ndarray:
    W_xh, W_hh = params["W_xh"], params["W_hh"]
    if h_prev.shape[-1] != W_hh.shape[1] or x_prev.shape[-1] != W_xh.shape[1]:
        raise ValueError(f"rnn_step got h {h_prev.shape}, x {x_prev.shape}; expected "
                         f"{W_hh.shape[1]} and {W_xh.shape[1]}")
    return np.tanh(x_prev @ W_xh.T + h_prev @ W_hh.T + params["b_h"])


def attention_weights(v_t: np.ndarray, F: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    logits = v_t @ F
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    return softmax(logits)


def mastery_read(alpha: np.ndarray, F_v: np.ndarray) -> np.ndarray:
    return alpha @ F_v.T


def _head(params: ModelParams, w, v, h):
    z = np.concatenate([w, v, h], axis=-1)
    p = np.tanh(z @ params["W1"].T + params["b1"])
    y = sigmoid(p @ params["W2"].T + params["b2"])[..., 0]
    return z, p, y


def predict_step(w_t, v_t, h_t, params: ModelParams):
    _, p, y = _head(params, w_t, v_t, h_t)
    return p, y


def read_and_predict(params: ModelParams, h: np.ndarray, exercises: np.ndarray,
                     concept_mask: np.ndarray | None = None):
    """Prediction head for hidden states ``h`` (..., d_h) and exercise ids (...).

    Returns ``(alpha, w, p, y)``; ``alpha`` is None in modes without attention.
    """
    v = params["B"].T[exercises]
    if params.mode.attention:
        mask = None if concept_mask is None else concept_mask[exercises]
        alpha = attention_weights(v, params["F"], mask)
        w = mastery_read(alpha, params["F_v"])
    else:
        alpha = None
        w = h @ params["W_r"].T
    _, p, y = _head(params, w, v, h)
    return alpha, w, p, y


@dataclass
class Batch:
    """Padded batch; padding sits at the end of each row and is masked out."""

    X: np.ndarray  # (n, T, D)
    exercises: np.ndarray  # (n, T) int
    labels: np.ndarray  # (n, T)
    mask: np.ndarray  # (n, T) bool

    @classmethod
    def from_steps(cls, sequences: Sequence[Sequence[EncodedStep]], width: int | None = None) -> "Batch":
        n = len(sequences)
        T = max((len(s) for s in sequences), default=0)
        if width is None:
            width = next((len(st.input_vector) for s in sequences for st in s), 0)
        X = np.zeros((n, T, width))
        ex = np.zeros((n, T), dtype=np.int64)
        lab = np.zeros((n, T))
        mask = np.zeros((n, T), dtype=bool)
        for i, seq in enumerate(sequences):
            for t, st in enumerate(seq):
                X[i, t] = st.input_vector
                ex[i, t] = st.exercise_id
                lab[i, t] = st.label
                mask[i, t] = True
        return cls(X, ex, lab, mask)

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass
class ForwardCache:
    H: np.ndarray  # (n, T, d_h): hidden state used for the prediction at step t
    V: np.ndarray
    alpha: np.ndarray | None
    W: np.ndarray
    Z: np.ndarray
    P: np.ndarray
    Y: np.ndarray  # (n, T)


def forward_batch(batch: Batch, params: ModelParams, concept_mask: np.ndarray | None = None) -> ForwardCache:
    n, T = batch.exercises.shape
    dims = params.dims
    if T and batch.X.shape[2] != params["W_xh"].shape[1]:
        raise ValueError(f"input width {batch.X.shape[2]} does not match W_xh {params['W_xh'].shape}")
    H = np.zeros((n, T, dims.d_h))
    h = np.zeros((n, dims.d_h))
    # recurrence first: h for step t only depends on x_0..x_{t-1}
    for t in range(T):
        H[:, t] = h
        if t + 1 < T:
            h = rnn_step(h, batch.X[:, t], params)
    alpha, W, P, Y = read_and_predict(params, H, batch.exercises, concept_mask)
    V = params["B"].T[batch.exercises]
    Z = np.concatenate([W, V, H], axis=-1)
    return ForwardCache(H, V, alpha, W, Z, P, Y)


def _bce(Y: np.ndarray, labels: np.ndarray) -> np.ndarray:
    y = np.clip(Y, PROB_EPS, 1.0 - PROB_EPS)
    return -(labels * np.log(y) + (1.0 - labels) * np.log(1.0 - y))


def batch_losses(cache: ForwardCache, batch: Batch) -> np.ndarray:
    """Summed cross-entropy per sequence in the batch."""
    return np.where(batch.mask, _bce(cache.Y, batch.labels), 0.0).sum(axis=1)


def sequence_loss(outputs: Sequence[StepOutput] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    y = np.array([o.y_t for o in outputs] if outputs is not None and len(outputs) and
                 isinstance(outputs[0], StepOutput) else outputs, dtype=float)
    r = np.asarray(labels, dtype=float)
    if y.shape != r.shape:
        raise ValueError(f"got {y.shape[0] if y.ndim else 0} outputs for {r.shape[0] if r.ndim else 0} labels")
    return float(_bce(y, r).sum())


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float | None) -> float:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient in parameter block {name!r}")
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def backward_batch(batch: Batch, params: ModelParams, cache: ForwardCache | None = None, *,
                   reduction: str = "mean", clip_norm: float | None = 5.0,
                   concept_mask: np.ndarray | None = None) -> Gradients:
    """Exact gradients of the batch loss.

    The loss of a sequence is its summed step cross-entropy; ``reduction``
    chooses between the mean (training objective) and the sum over
    sequences. Gradients are rescaled to global norm ``clip_norm`` when
    larger; pass ``None`` to disable clipping.
    """
    if cache is None:
        cache = forward_batch(batch, params, concept_mask)
    n, T = batch.exercises.shape
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    if n == 0 or T == 0 or not batch.mask.any():
        return Gradients(grads, 0.0)
    scale = 1.0 / n if reduction == "mean" else 1.0
    d_k = params.dims.d_k

    Y = cache.Y
    inside = (Y > PROB_EPS) & (Y < 1.0 - PROB_EPS)  # clamped probabilities carry no gradient
    d_out = np.where(batch.mask & inside, Y - batch.labels, 0.0) * scale  # (n, T)

    W1, W2 = params["W1"], params["W2"]
    grads["W2"] += np.einsum("nt,ntk->k", d_out, cache.P)[None]
    grads["b2"] += d_out.sum()
    d_pre_p = d_out[..., None] * W2[0] * (1.0 - cache.P ** 2)  # (n, T, d_k)
    grads["W1"] += np.einsum("ntj,nti->ji", d_pre_p, cache.Z)
    grads["b1"] += d_pre_p.sum(axis=(0, 1))
    dZ = d_pre_p @ W1
    dW_read, dV, dH = dZ[..., :d_k], dZ[..., d_k:2 * d_k].copy(), dZ[..., 2 * d_k:].copy()

    if params.mode.attention:
        alpha = cache.alpha
        grads["F_v"] += np.einsum("ntd,nti->di", dW_read, alpha)
        d_alpha = dW_read @ params["F_v"]
        d_logits = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=-1, keepdims=True))
        dV += d_logits @ params["F"].T
        grads["F"] += np.einsum("ntd,nti->di", cache.V, d_logits)
    else:
        grads["W_r"] += np.einsum("ntd,nth->dh", dW_read, cache.H)
        dH += dW_read @ params["W_r"]

    np.add.at(grads["B"].T, batch.exercises.ravel(), dV.reshape(-1, d_k))

    # BPTT: H[:, t+1] = tanh(W_xh X[:, t] + W_hh H[:, t] + b_h)
    W_hh = params["W_hh"]
    carry = np.zeros((n, params.dims.d_h))
    for t in range(T - 1, -1, -1):
        # carry holds dL/dH[:, t] from steps > t
        dh = dH[:, t] + carry
        if t == 0:
            break
        da = dh * (1.0 - cache.H[:, t] ** 2)
        grads["W_xh"] += da.T @ batch.X[:, t - 1]
        grads["W_hh"] += da.T @ cache.H[:, t - 1]
        grads["b_h"] += da.sum(axis=0)
        carry = da @ W_hh

    norm = clip_gradients(grads, clip_norm)
    return Gradients(grads, norm)


def _as_batch(encoded: Sequence[EncodedStep], params: ModelParams) -> Batch:
    return Batch.from_steps([list(encoded)], width=params["W_xh"].shape[1])


def forward_sequence(encoded: Sequence[EncodedStep], params: ModelParams,
                     mode: Mode | str | None = None,
                     concept_mask: np.ndarray | None = None) -> list[StepOutput]:
    if mode is not None and Mode.parse(mode) != params.mode:
        raise ValueError(f"parameters were built for mode {params.mode.value}, not {Mode.parse(mode).value}")
    if not encoded:
        return []
    cache = forward_batch(_as_batch(encoded, params), params, concept_mask)
    return [
        StepOutput(
            h_t=cache.H[0, t],
            alpha=None if cache.alpha is None else cache.alpha[0, t],
            w_t=cache.W[0, t],
            p_t=cache.P[0, t],
            y_t=float(cache.Y[0, t]),
        )
        for t in range(len(encoded))
    ]


def backward_sequence(encoded: Sequence[EncodedStep], labels: Sequence[int] | None, params: ModelParams,
                      *, clip_norm: float | None = 5.0,
                      concept_mask: np.ndarray | None = None) -> Gradients:
    if labels is not None and len(labels) != len(encoded):
        raise ValueError("labels and encoded steps differ in length")
    if not encoded:
        return Gradients({k: np.zeros_like(v) for k, v in params.tensors.items()}, 0.0)
    batch = _as_batch(encoded, params)
    if labels is not None:
        batch.labels[0] = np.asarray(labels, dtype=float)
    return backward_batch(batch, params, reduction="sum", clip_norm=clip_norm, concept_mask=concept_mask)
