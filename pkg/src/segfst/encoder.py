"""Trainable multi-layer bidirectional LSTM encoder with optional pyramid
subsampling, a frame-classifier head, and an exact backward pass.

Each layer runs one LSTM per direction and combines the directional states
through per-layer projection matrices: out_t = Wf h^f_t + Wb h^b_t.  With the
pyramid enabled, the output of every layer after the first keeps only
even-indexed time steps, so a 3-layer encoder reduces T to ceil(ceil(T/2)/2).
Dropout (inverted, train time only) is applied to each layer's input and
output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .weights import EncoderOutputs, glorot_uniform, log_softmax


@dataclass
class EncoderConfig:
    input_dim: int
    hidden_dim: int = 24
    output_dim: int | None = None        # per-layer combined output size
    num_layers: int = 2
    pyramid: bool = False
    subsample_mode: str = "even"         # "even" keeps even steps, "concat"
                                         # stacks neighbor pairs
    dropout: float = 0.0
    num_classes: int = 0                 # 0 disables the classifier head

    def __post_init__(self):
        if self.output_dim is None:
            self.output_dim = self.hidden_dim
        if self.subsample_mode not in ("even", "concat"):
            raise ValueError(f"unknown subsample mode {self.subsample_mode!r}")


def _layer_subsamples(config: EncoderConfig, layer: int) -> bool:
    # the first layer's output keeps full resolution; with a pyramid every
    # later layer halves time (layers two and three of a 3-layer stack)
    return config.pyramid and layer >= 1


def layer_input_dims(config: EncoderConfig) -> list[int]:
    dims = [config.input_dim]
    for layer in range(1, config.num_layers):
        d = config.output_dim
        if _layer_subsamples(config, layer - 1) and \
                config.subsample_mode == "concat":
            d *= 2
        dims.append(d)
    return dims


def encoder_output_dim(config: EncoderConfig) -> int:
    d = config.output_dim
    if _layer_subsamples(config, config.num_layers - 1) and \
            config.subsample_mode == "concat":
        d *= 2
    return d


def encoded_length(num_frames: int, config: EncoderConfig) -> int:
    t = num_frames
    for layer in range(config.num_layers):
        if _layer_subsamples(config, layer):
            t = (t + 1) // 2
    return t


def subsample_frame_labels(labels: np.ndarray,
                           config: EncoderConfig) -> np.ndarray:
    """Ground-truth frame labels reduced by the same even-index rule."""
    labels = np.asarray(labels)
    for layer in range(config.num_layers):
        if _layer_subsamples(config, layer):
            labels = labels[::2]
    return labels


@dataclass
class LstmDirParams:
    wx: np.ndarray      # (4H, in_dim), gates packed [input; forget; cand; out]
    wh: np.ndarray      # (4H, H)
    b: np.ndarray       # (4H,)


@dataclass
class LstmLayerParams:
    fwd: LstmDirParams
    bwd: LstmDirParams
    comb_f: np.ndarray  # (out_dim, H)
    comb_b: np.ndarray  # (out_dim, H)


@dataclass
class EncoderParams:
    layers: list[LstmLayerParams]
    head_w: np.ndarray | None = None    # (num_classes, enc_out_dim)
    head_b: np.ndarray | None = None

    def tensors(self):
        for i, layer in enumerate(self.layers):
            for direction in ("fwd", "bwd"):
                dp = getattr(layer, direction)
                yield f"layer{i}.{direction}.wx", dp.wx
                yield f"layer{i}.{direction}.wh", dp.wh
                yield f"layer{i}.{direction}.b", dp.b
            yield f"layer{i}.comb_f", layer.comb_f
            yield f"layer{i}.comb_b", layer.comb_b
        if self.head_w is not None:
            yield "head.w", self.head_w
            yield "head.b", self.head_b


def init_encoder_params(rng: np.random.Generator,
                        config: EncoderConfig) -> EncoderParams:
    h = config.hidden_dim
    layers = []
    for in_dim in layer_input_dims(config):
        layers.append(LstmLayerParams(
            fwd=LstmDirParams(wx=glorot_uniform(rng, 4 * h, in_dim),
                              wh=glorot_uniform(rng, 4 * h, h),
                              b=np.zeros(4 * h)),
            bwd=LstmDirParams(wx=glorot_uniform(rng, 4 * h, in_dim),
                              wh=glorot_uniform(rng, 4 * h, h),
                              b=np.zeros(4 * h)),
            comb_f=glorot_uniform(rng, config.output_dim, h),
            comb_b=glorot_uniform(rng, config.output_dim, h),
        ))
    head_w = head_b = None
    if config.num_classes:
        head_w = glorot_uniform(rng, config.num_classes,
                                encoder_output_dim(config))
        head_b = np.zeros(config.num_classes)
    return EncoderParams(layers=layers, head_w=head_w, head_b=head_b)


def zeros_like_encoder(params: EncoderParams) -> EncoderParams:
    layers = [LstmLayerParams(
        fwd=LstmDirParams(np.zeros_like(l.fwd.wx), np.zeros_like(l.fwd.wh),
                          np.zeros_like(l.fwd.b)),
        bwd=LstmDirParams(np.zeros_like(l.bwd.wx), np.zeros_like(l.bwd.wh),
                          np.zeros_like(l.bwd.b)),
        comb_f=np.zeros_like(l.comb_f),
        comb_b=np.zeros_like(l.comb_b),
    ) for l in params.layers]
    return EncoderParams(
        layers=layers,
        head_w=None if params.head_w is None else np.zeros_like(params.head_w),
        head_b=None if params.head_b is None else np.zeros_like(params.head_b),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class _DirCache:
    x: np.ndarray
    gates: np.ndarray    # (T, 4H) activated: [i, f, g, o]
    c: np.ndarray        # (T, H)
    tc: np.ndarray       # (T, H) tanh of the cell
    h: np.ndarray        # (T, H)


@dataclass
class _LayerCache:
    in_mask: np.ndarray | None
    inp: np.ndarray                  # layer input after dropout
    fwd: _DirCache
    bwd: _DirCache                   # stored in reversed time
    out_mask: np.ndarray | None
    pre_subsample_len: int


@dataclass
class ForwardCache:
    """Everything needed to rerun the forward pass backwards exactly."""

    config: EncoderConfig
    layers: list[_LayerCache] = field(default_factory=list)
    input_len: int = 0


def _run_direction(x: np.ndarray, p: LstmDirParams) -> _DirCache:
    t_max = x.shape[0]
    h_dim = p.wh.shape[1]
    gates = np.empty((t_max, 4 * h_dim))
    c = np.empty((t_max, h_dim))
    tc = np.empty((t_max, h_dim))
    h = np.empty((t_max, h_dim))
    pre_x = x @ p.wx.T + p.b
    h_prev = np.zeros(h_dim)
    c_prev = np.zeros(h_dim)
    for t in range(t_max):
        pre = pre_x[t] + p.wh @ h_prev
        i = _sigmoid(pre[:h_dim])
        f = _sigmoid(pre[h_dim:2 * h_dim])
        g = np.tanh(pre[2 * h_dim:3 * h_dim])
        o = _sigmoid(pre[3 * h_dim:])
        c_prev = f * c_prev + i * g
        tc_t = np.tanh(c_prev)
        h_prev = o * tc_t
        gates[t, :h_dim] = i
        gates[t, h_dim:2 * h_dim] = f
        gates[t, 2 * h_dim:3 * h_dim] = g
        gates[t, 3 * h_dim:] = o
        c[t] = c_prev
        tc[t] = tc_t
        h[t] = h_prev
    return _DirCache(x=x, gates=gates, c=c, tc=tc, h=h)


def _direction_backward(cache: _DirCache, p: LstmDirParams,
                        dh_out: np.ndarray, grads: LstmDirParams) -> np.ndarray:
    t_max, h_dim = cache.h.shape
    dx = np.zeros_like(cache.x)
    dh_rec = np.zeros(h_dim)
    dc_next = np.zeros(h_dim)
    da = np.empty(4 * h_dim)
    for t in range(t_max - 1, -1, -1):
        i = cache.gates[t, :h_dim]
        f = cache.gates[t, h_dim:2 * h_dim]
        g = cache.gates[t, 2 * h_dim:3 * h_dim]
        o = cache.gates[t, 3 * h_dim:]
        dh = dh_out[t] + dh_rec
        do = dh * cache.tc[t]
        dc = dh * o * (1.0 - cache.tc[t] ** 2) + dc_next
        c_prev = cache.c[t - 1] if t > 0 else np.zeros(h_dim)
        h_prev = cache.h[t - 1] if t > 0 else np.zeros(h_dim)
        da[:h_dim] = dc * g * i * (1.0 - i)
        da[h_dim:2 * h_dim] = dc * c_prev * f * (1.0 - f)
        da[2 * h_dim:3 * h_dim] = dc * i * (1.0 - g * g)
        da[3 * h_dim:] = do * o * (1.0 - o)
        dc_next = dc * f
        grads.wx += np.outer(da, cache.x[t])
        grads.wh += np.outer(da, h_prev)
        grads.b += da
        dx[t] = da @ p.wx
        dh_rec = da @ p.wh
    return dx


def _subsample(out: np.ndarray, mode: str) -> np.ndarray:
    if mode == "even":
        return out[::2]
    half = (out.shape[0] + 1) // 2
    padded = np.vstack([out, np.zeros((2 * half - out.shape[0],
                                       out.shape[1]))])
    return padded.reshape(half, 2 * out.shape[1])


def _subsample_backward(d_out: np.ndarray, pre_len: int,
                        mode: str) -> np.ndarray:
    if mode == "even":
        d_pre = np.zeros((pre_len, d_out.shape[1]))
        d_pre[::2] = d_out
        return d_pre
    dim = d_out.shape[1] // 2
    flat = d_out.reshape(-1, dim)
    return flat[:pre_len]


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


def encode(x: np.ndarray, params: EncoderParams, config: EncoderConfig,
           train: bool = False,
           rng: np.random.Generator | None = None
           ) -> tuple[EncoderOutputs, ForwardCache]:
    """Run the encoder over a T x input_dim feature matrix.

    Returns the encoder outputs (T~ x enc_out_dim) and the cache needed for
    the exact backward pass.  Dropout masks require ``rng`` and are drawn
    only when ``train`` is set and the rate is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected a non-empty T x d matrix, got {x.shape}")
    if x.shape[1] != config.input_dim:
        raise ValueError(f"feature dim {x.shape[1]} != configured "
                         f"{config.input_dim}")
    use_dropout = train and config.dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("training-time dropout needs an rng")

    cache = ForwardCache(config=config, input_len=x.shape[0])
    seq = x
    for layer_idx, layer in enumerate(params.layers):
        in_mask = out_mask = None
        if use_dropout:
            in_mask = _dropout_mask(rng, seq.shape, config.dropout)
            seq = seq * in_mask
        fwd = _run_direction(seq, layer.fwd)
        bwd = _run_direction(seq[::-1], layer.bwd)
        out = fwd.h @ layer.comb_f.T + bwd.h[::-1] @ layer.comb_b.T
        if use_dropout:
            out_mask = _dropout_mask(rng, out.shape, config.dropout)
            out = out * out_mask
        pre_len = out.shape[0]
        if _layer_subsamples(config, layer_idx):
            out = _subsample(out, config.subsample_mode)
        cache.layers.append(_LayerCache(
            in_mask=in_mask, inp=seq, fwd=fwd, bwd=bwd, out_mask=out_mask,
            pre_subsample_len=pre_len))
        seq = out
    return EncoderOutputs(h=seq), cache


def encoder_backward(params: EncoderParams, cache: ForwardCache,
                     d_out: np.ndarray
                     ) -> tuple[EncoderParams, np.ndarray]:
    """Exact gradients of a scalar loss w.r.t. all encoder parameters and the
    input features, given the gradient at the encoder outputs."""
    config = cache.config
    grads = zeros_like_encoder(params)
    d_seq = np.asarray(d_out, dtype=np.float64)
    for layer_idx in range(config.num_layers - 1, -1, -1):
        layer = params.layers[layer_idx]
        lgrads = grads.layers[layer_idx]
        lcache = cache.layers[layer_idx]
        if d_seq.shape[0] != encoded_length_after(cache, layer_idx):
            raise ValueError("gradient shape does not match the cache")
        if _layer_subsamples(config, layer_idx):
            d_seq = _subsample_backward(d_seq, lcache.pre_subsample_len,
                                        config.subsample_mode)
        if lcache.out_mask is not None:
            d_seq = d_seq * lcache.out_mask
        lgrads.comb_f += d_seq.T @ lcache.fwd.h
        lgrads.comb_b += d_seq.T @ lcache.bwd.h[::-1]
        d_hf = d_seq @ layer.comb_f
        d_hb = (d_seq @ layer.comb_b)[::-1]
        dx = _direction_backward(lcache.fwd, layer.fwd, d_hf, lgrads.fwd)
        dx += _direction_backward(lcache.bwd, layer.bwd, d_hb,
                                  lgrads.bwd)[::-1]
        if lcache.in_mask is not None:
            dx = dx * lcache.in_mask
        d_seq = dx
    return grads, d_seq


def encoded_length_after(cache: ForwardCache, layer_idx: int) -> int:
    t = cache.layers[layer_idx].pre_subsample_len
    if _layer_subsamples(cache.config, layer_idx):
        t = (t + 1) // 2
    return t


def classifier_head(enc: EncoderOutputs, head_w: np.ndarray,
                    head_b: np.ndarray) -> np.ndarray:
    """Per-frame log-probs: logsoftmax(W h_i + b) rows."""
    return log_softmax(enc.h @ head_w.T + head_b)


def head_backward(enc: EncoderOutputs, head_w: np.ndarray,
                  d_logits: np.ndarray):
    """Chain per-frame logit gradients into (dW, db, dh)."""
    dw = d_logits.T @ enc.h
    db = d_logits.sum(axis=0)
    dh = d_logits @ head_w
    return dw, db, dh
