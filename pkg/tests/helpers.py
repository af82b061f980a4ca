"""Shared builders for the test suite."""

import numpy as np

from aadkta.dataset import EncodedStep, InteractionRecord, StudentSequence, encode_step
from aadkta.model import Mode, ModelDims, backward_batch, Batch, batch_losses, forward_batch, init_params

SMALL_DIMS = ModelDims(d_k=8, d_h=16, m=5, K_clusters=3, N=5, n_exercises=7)


def random_steps(dims, mode, T, seed=0):
    rng = np.random.default_rng(seed)
    K = dims.K_clusters if Mode.parse(mode).clusters else 0
    steps = []
    for t in range(T):
        r = InteractionRecord("s", int(rng.integers(dims.n_exercises)), int(rng.integers(dims.m)),
                              int(rng.integers(2)), 1.0, float(t))
        steps.append(encode_step(r, dims.m, int(rng.integers(K)) if K else None, K))
    return steps


def history(rows, student="s"):
    """Sequence from (exercise, skill, correct) triples."""
    return StudentSequence(student, tuple(
        InteractionRecord(student, e, k, c, 10.0, float(i)) for i, (e, k, c) in enumerate(rows)))


def total_loss(batch, params, concept_mask=None, reduction="mean"):
    losses = batch_losses(forward_batch(batch, params, concept_mask), batch)
    return losses.mean() if reduction == "mean" else losses.sum()


def finite_difference(batch, params, eps=1e-5, concept_mask=None, reduction="mean"):
    out = {}
    for name, tensor in params.tensors.items():
        g = np.zeros_like(tensor)
        flat, gflat = tensor.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = total_loss(batch, params, concept_mask, reduction)
            flat[i] = keep - eps
            down = total_loss(batch, params, concept_mask, reduction)
            flat[i] = keep
            gflat[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def relative_error(a, b):
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def gradient_check(mode, T=12, seed=0, dims=SMALL_DIMS, n=1, concept_mask=None):
    params = init_params(dims, seed, mode)
    # nonzero biases so their gradient paths are exercised
    rng = np.random.default_rng(seed + 100)
    for k in ("b_h", "b1", "b2"):
        params.tensors[k] = rng.normal(0, 0.3, params.tensors[k].shape)
    batch = Batch.from_steps([random_steps(dims, mode, T - i, seed + i) for i in range(n)])
    analytic = backward_batch(batch, params, clip_norm=None, concept_mask=concept_mask)
    numeric = finite_difference(batch, params, concept_mask=concept_mask)
    return {k: relative_error(analytic[k], numeric[k]) for k in numeric}
