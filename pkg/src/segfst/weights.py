"""Segment weight functions mapping (encoder outputs, segment) to a real
score, with backward passes from per-edge gradients to the decoder
parameters and to the encoder outputs.

Two families are provided: the frame-classifier (FC) score assembled from
transformed per-frame log probabilities (average, samples, boundaries,
duration, bias), and the feed-forward segmental score (SRNN) over boundary
encoder states plus label and duration embeddings.

Index conventions: encoder output row ``i`` holds the state for frame
``i + 1``; a segment ``(label, s, t)`` covers rows ``s .. t-1``.  The SRNN
boundary vectors are the rows for times ``s`` and ``t``, with time 0 mapped
to a zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .dp import EdgeWeightTable
from .lattice import Edge, SearchSpace

# Boundary transforms sample the classifier output just outside the segment
# start and just after the segment end; out-of-range rows are clamped.
LEFT_OFFSETS = (-1, -2, -3)     # relative to the segment start s
RIGHT_OFFSETS = (0, 1, 2)       # relative to the segment end t


@dataclass
class EncoderOutputs:
    """Encoder state matrix plus optional cached per-frame log-probs and an
    accumulation buffer for dL/dh."""

    h: np.ndarray
    z: np.ndarray | None = None
    grad: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return self.h.shape[0]


@dataclass
class FcParams:
    """Parameters of the frame-classifier weight function."""

    clf_w: np.ndarray       # (L, enc_dim) frame classifier projection
    clf_b: np.ndarray       # (L,)
    avg_w: np.ndarray       # (L, L)
    spl_w: np.ndarray       # (L, L), shared across the three sample points
    left_w: np.ndarray      # (3, L, L)
    right_w: np.ndarray     # (3, L, L)
    dur: np.ndarray         # (L, D) lookup by (label, duration - 1)
    bias: np.ndarray        # (L,)

    @property
    def num_labels(self) -> int:
        return self.bias.shape[0]

    @property
    def max_duration(self) -> int:
        return self.dur.shape[1]

    def tensors(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class SrnnParams:
    """Parameters of the feed-forward segmental weight function."""

    label_emb: np.ndarray   # (L, label_dim)
    dur_emb: np.ndarray     # (num_buckets, dur_dim)
    w1: np.ndarray          # (h1, 2*enc_dim + label_dim + dur_dim)
    b1: np.ndarray
    w2: np.ndarray          # (h2, h1)
    b2: np.ndarray
    theta: np.ndarray       # (h2,)

    @property
    def enc_dim(self) -> int:
        extra = self.label_emb.shape[1] + self.dur_emb.shape[1]
        return (self.w1.shape[1] - extra) // 2

    def tensors(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)


def zeros_like_params(params):
    """A same-shaped parameter container filled with zeros."""
    return replace(params, **{name: np.zeros_like(arr)
                              for name, arr in params.tensors()})


def glorot_uniform(rng: np.random.Generator, fan_out: int,
                   fan_in: int, *extra) -> np.ndarray:
    """Uniform(-r, r) with r = sqrt(6 / (fan_in + fan_out))."""
    r = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (*extra, fan_out, fan_in) if extra else (fan_out, fan_in)
    return rng.uniform(-r, r, size=shape)


def duration_bucket(duration) -> np.ndarray:
    """Log-scale duration bucket: floor(log2(d))."""
    return np.int64(np.floor(np.log2(np.asarray(duration, dtype=np.float64))))


def num_duration_buckets(max_duration: int) -> int:
    return int(max_duration).bit_length()


def init_fc_params(rng: np.random.Generator, num_labels: int, enc_dim: int,
                   max_duration: int) -> FcParams:
    L = num_labels
    return FcParams(
        clf_w=glorot_uniform(rng, L, enc_dim),
        clf_b=np.zeros(L),
        avg_w=glorot_uniform(rng, L, L),
        spl_w=glorot_uniform(rng, L, L),
        left_w=np.stack([glorot_uniform(rng, L, L) for _ in range(3)]),
        right_w=np.stack([glorot_uniform(rng, L, L) for _ in range(3)]),
        dur=rng.uniform(-0.1, 0.1, size=(L, max_duration)),
        bias=np.zeros(L),
    )


def init_srnn_params(rng: np.random.Generator, num_labels: int, enc_dim: int,
                     max_duration: int, label_dim: int = 32,
                     dur_dim: int = 5, hidden1: int = 64,
                     hidden2: int = 64) -> SrnnParams:
    in_dim = 2 * enc_dim + label_dim + dur_dim
    return SrnnParams(
        label_emb=rng.uniform(-0.1, 0.1, size=(num_labels, label_dim)),
        dur_emb=rng.uniform(-0.1, 0.1,
                            size=(num_duration_buckets(max_duration), dur_dim)),
        w1=glorot_uniform(rng, hidden1, in_dim),
        b1=np.zeros(hidden1),
        w2=glorot_uniform(rng, hidden2, hidden1),
        b2=np.zeros(hidden2),
        theta=glorot_uniform(rng, hidden2, 1)[:, 0],
    )


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def frame_log_probs(enc: EncoderOutputs, params: FcParams) -> np.ndarray:
    """Per-frame label log-probs from the FC classifier.

    Always recomputed from the current parameters (a stale cache would break
    finite-difference checks); the result is stashed on ``enc.z`` for
    consumers that want to inspect it.
    """
    enc.z = log_softmax(enc.h @ params.clf_w.T + params.clf_b)
    return enc.z


def sample_offsets(duration):
    """The three in-segment sample offsets relative to the start."""
    duration = np.asarray(duration, dtype=np.int64)
    return duration // 6, duration // 2, (5 * duration) // 6


def fc_score(enc: EncoderOutputs, edge: Edge, params: FcParams) -> float:
    """Reference per-edge FC score (sum of average, sample, boundary,
    duration, and bias terms)."""
    z = frame_log_probs(enc, params)
    t_max = z.shape[0]
    lab, s, t = edge.label, edge.start, edge.end
    dur = t - s
    score = float(np.mean(z[s:t] @ params.avg_w[lab]))
    for off in sample_offsets(dur):
        score += float(z[s + int(off)] @ params.spl_w[lab])
    for k, off in enumerate(LEFT_OFFSETS):
        idx = min(max(s + off, 0), t_max - 1)
        score += float(z[idx] @ params.left_w[k, lab])
    for k, off in enumerate(RIGHT_OFFSETS):
        idx = min(max(t + off, 0), t_max - 1)
        score += float(z[idx] @ params.right_w[k, lab])
    score += float(params.dur[lab, dur - 1]) + float(params.bias[lab])
    return score


def srnn_score(enc: EncoderOutputs, edge: Edge, params: SrnnParams) -> float:
    """Reference per-edge SRNN score."""
    enc_dim = enc.h.shape[1]
    hs = np.zeros(enc_dim) if edge.start == 0 else enc.h[edge.start - 1]
    ht = enc.h[edge.end - 1]
    v = np.concatenate([
        hs, ht, params.label_emb[edge.label],
        params.dur_emb[int(duration_bucket(edge.end - edge.start))]])
    z1 = np.maximum(params.w1 @ v + params.b1, 0.0)
    z2 = np.tanh(params.w2 @ z1 + params.b2)
    return float(params.theta @ z2)


def _fc_gather_indices(space: SearchSpace, t_max: int):
    s = space.edge_start
    t = space.edge_end
    dur = t - s
    samples = [s + off for off in sample_offsets(dur)]
    left = [np.clip(s + off, 0, t_max - 1) for off in LEFT_OFFSETS]
    right = [np.clip(t + off, 0, t_max - 1) for off in RIGHT_OFFSETS]
    return s, t, dur, samples, left, right


def _score_all_fc(space: SearchSpace, enc: EncoderOutputs,
                  params: FcParams) -> np.ndarray:
    z = frame_log_probs(enc, params)
    t_max = z.shape[0]
    lab = space.edge_label
    s, t, dur, samples, left, right = _fc_gather_indices(space, t_max)

    u_avg = z @ params.avg_w.T
    prefix = np.zeros((t_max + 1, params.num_labels))
    np.cumsum(u_avg, axis=0, out=prefix[1:])
    values = (prefix[t, lab] - prefix[s, lab]) / dur

    u_spl = z @ params.spl_w.T
    for pos in samples:
        values += u_spl[pos, lab]
    for k in range(3):
        values += (z @ params.left_w[k].T)[left[k], lab]
        values += (z @ params.right_w[k].T)[right[k], lab]
    values += params.dur[lab, dur - 1] + params.bias[lab]
    return values


def _score_all_srnn(space: SearchSpace, enc: EncoderOutputs,
                    params: SrnnParams) -> np.ndarray:
    v, _ = _srnn_inputs(space, enc, params, np.arange(space.num_edges))
    z1 = np.maximum(v @ params.w1.T + params.b1, 0.0)
    z2 = np.tanh(z1 @ params.w2.T + params.b2)
    return z2 @ params.theta


def _srnn_inputs(space: SearchSpace, enc: EncoderOutputs, params: SrnnParams,
                 edge_ids: np.ndarray):
    """Stacked [h_s; h_t; label emb; duration emb] rows for the given edges."""
    h_pad = np.vstack([np.zeros((1, enc.h.shape[1])), enc.h])
    s = space.edge_start[edge_ids]
    t = space.edge_end[edge_ids]
    lab = space.edge_label[edge_ids]
    buckets = duration_bucket(t - s)
    v = np.concatenate([h_pad[s], h_pad[t], params.label_emb[lab],
                        params.dur_emb[buckets]], axis=1)
    return v, (s, t, lab, buckets)


def score_all_edges(space: SearchSpace, enc: EncoderOutputs,
                    params) -> EdgeWeightTable:
    """Dense weight table for every edge of the space.

    The FC path precomputes the transformed log-prob tables and a prefix sum
    of the average term, so the cost is O(T L^2 + E) instead of O(E D).
    """
    if enc.num_frames != space.num_frames:
        raise ValueError(f"encoder has {enc.num_frames} frames, space expects "
                         f"{space.num_frames}")
    if isinstance(params, FcParams):
        values = _score_all_fc(space, enc, params)
    elif isinstance(params, SrnnParams):
        values = _score_all_srnn(space, enc, params)
    else:
        raise TypeError(f"unsupported weight function params: {type(params)}")
    return EdgeWeightTable.from_values(values)


def _backprop_fc(space, enc, params: FcParams, edge_grads):
    z = frame_log_probs(enc, params)
    t_max, num_labels = z.shape
    lab = space.edge_label
    s, t, dur, samples, left, right = _fc_gather_indices(space, t_max)
    g = edge_grads

    grads = zeros_like_params(params)
    dz = np.zeros_like(z)

    # average term: rows s..t-1 each receive g/dur; done with a difference
    # array so the cost stays O(E + T L)
    coeff = g / dur
    diff = np.zeros((t_max + 1, num_labels))
    np.add.at(diff, (s, lab), coeff)
    np.add.at(diff, (t, lab), -coeff)
    du_avg = np.cumsum(diff[:-1], axis=0)
    grads.avg_w += du_avg.T @ z
    dz += du_avg @ params.avg_w

    du_spl = np.zeros((t_max, num_labels))
    for pos in samples:
        np.add.at(du_spl, (pos, lab), g)
    grads.spl_w += du_spl.T @ z
    dz += du_spl @ params.spl_w

    for k in range(3):
        for idx, w, gw in ((left[k], params.left_w[k], grads.left_w[k]),
                           (right[k], params.right_w[k], grads.right_w[k])):
            du = np.zeros((t_max, num_labels))
            np.add.at(du, (idx, lab), g)
            gw += du.T @ z
            dz += du @ w

    np.add.at(grads.dur, (lab, dur - 1), g)
    np.add.at(grads.bias, lab, g)

    d_logits = dz - np.exp(z) * dz.sum(axis=1, keepdims=True)
    grads.clf_w += d_logits.T @ enc.h
    grads.clf_b += d_logits.sum(axis=0)
    dh = d_logits @ params.clf_w
    return grads, dh


def _backprop_srnn(space, enc, params: SrnnParams, edge_grads):
    grads = zeros_like_params(params)
    dh = np.zeros_like(enc.h)
    nz = np.nonzero(edge_grads)[0]
    if len(nz) == 0:
        return grads, dh
    g = edge_grads[nz]

    v, (s, t, lab, buckets) = _srnn_inputs(space, enc, params, nz)
    z1 = np.maximum(v @ params.w1.T + params.b1, 0.0)
    z2 = np.tanh(z1 @ params.w2.T + params.b2)

    grads.theta += z2.T @ g
    d_pre2 = (g[:, None] * params.theta) * (1.0 - z2 * z2)
    grads.w2 += d_pre2.T @ z1
    grads.b2 += d_pre2.sum(axis=0)
    d_pre1 = (d_pre2 @ params.w2) * (z1 > 0.0)
    grads.w1 += d_pre1.T @ v
    grads.b1 += d_pre1.sum(axis=0)
    dv = d_pre1 @ params.w1

    enc_dim = enc.h.shape[1]
    label_dim = params.label_emb.shape[1]
    dh_pad = np.zeros((enc.num_frames + 1, enc_dim))
    np.add.at(dh_pad, s, dv[:, :enc_dim])
    np.add.at(dh_pad, t, dv[:, enc_dim:2 * enc_dim])
    dh += dh_pad[1:]
    np.add.at(grads.label_emb, lab,
              dv[:, 2 * enc_dim:2 * enc_dim + label_dim])
    np.add.at(grads.dur_emb, buckets, dv[:, 2 * enc_dim + label_dim:])
    return grads, dh


def backprop_edges(space: SearchSpace, enc: EncoderOutputs, params,
                   edge_grads: np.ndarray):
    """Chain per-edge gradients into decoder-parameter gradients and
    encoder-output gradients.

    Returns ``(param_grads, enc_output_grads)``; the SRNN path only touches
    edges with a nonzero gradient.
    """
    edge_grads = np.asarray(edge_grads, dtype=np.float64)
    if edge_grads.shape != (space.num_edges,):
        raise ValueError("edge gradient buffer does not match the space")
    if isinstance(params, FcParams):
        return _backprop_fc(space, enc, params, edge_grads)
    if isinstance(params, SrnnParams):
        return _backprop_srnn(space, enc, params, edge_grads)
    raise TypeError(f"unsupported weight function params: {type(params)}")
