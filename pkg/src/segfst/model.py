"""Per-utterance model assembly: encoder + weight function + search space.

A model is the parameter pair (encoder params, decoder params) plus its
configuration.  Losses produced here return a value and a flat dict of named
parameter gradients ("enc.*" / "dec.*"), which is the currency the training
loop and the optimizer work in.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .dp import EdgeWeightTable, Path, max_path
from .encoder import (
    EncoderConfig,
    EncoderParams,
    classifier_head,
    encode,
    encoder_backward,
    encoder_output_dim,
    head_backward,
    init_encoder_params,
    subsample_frame_labels,
)
from .lattice import build_ctc_space, build_label_chain, build_segmental_space
from .losses import (
    CostFunction,
    UnrepresentableSupervisionError,
    ctc_loss,
    frame_cross_entropy,
    hinge_loss,
    log_loss,
    marginal_log_loss,
)
from .weights import (
    EncoderOutputs,
    backprop_edges,
    init_fc_params,
    init_srnn_params,
    score_all_edges,
)

@dataclass
class ModelConfig:
    num_labels: int
    input_dim: int
    kind: str = "segmental"            # "segmental" or "ctc"
    weightfn: str = "srnn"             # "fc" or "srnn" (segmental only)
    head: str = "none"                 # "none", "ce", or "ctc"
    max_duration: int = 8
    hidden_dim: int = 24
    num_layers: int = 2
    pyramid: bool = False
    subsample_mode: str = "even"
    dropout: float = 0.0
    label_dim: int = 32
    dur_dim: int = 5
    srnn_hidden: int = 64
    cost_scale: float = 1.0
    ctc_strict_repeats: bool = False

    def __post_init__(self):
        if self.kind not in ("segmental", "ctc", "frame"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "ctc":
            self.head = "ctc"
        elif self.kind == "frame":
            self.head = "ce"
        if self.kind == "segmental" and self.weightfn not in ("fc", "srnn"):
            raise ValueError(f"unknown weight function {self.weightfn!r}")

    @property
    def blank(self) -> int:
        return self.num_labels

    def head_classes(self) -> int:
        if self.head == "ce":
            return self.num_labels
        if self.head == "ctc":
            return self.num_labels + 1
        return 0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_dim=self.input_dim,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            pyramid=self.pyramid,
            subsample_mode=self.subsample_mode,
            dropout=self.dropout,
            num_classes=self.head_classes(),
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Model:
    config: ModelConfig
    enc: EncoderParams
    dec: object | None = None          # FcParams | SrnnParams

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = [(f"enc.{name}", arr) for name, arr in self.enc.tensors()]
        if self.dec is not None:
            items += [(f"dec.{name}", arr) for name, arr in self.dec.tensors()]
        return items


@dataclass
class LossBundle:
    """Scalar loss plus named parameter gradients."""

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    enc_config = config.encoder_config()
    enc = init_encoder_params(rng, enc_config)
    dec = None
    if config.kind == "segmental":
        enc_dim = encoder_output_dim(enc_config)
        if config.weightfn == "fc":
            dec = init_fc_params(rng, config.num_labels, enc_dim,
                                 config.max_duration)
        else:
            dec = init_srnn_params(rng, config.num_labels, enc_dim,
                                   config.max_duration,
                                   label_dim=config.label_dim,
                                   dur_dim=config.dur_dim,
                                   hidden1=config.srnn_hidden,
                                   hidden2=config.srnn_hidden)
    return Model(config=config, enc=enc, dec=dec)


def frame_labels_from_segments(segments, num_frames: int) -> np.ndarray:
    """Per-frame labels from a (label, start, end) tiling of [0, T)."""
    out = np.full(num_frames, -1, dtype=np.int64)
    for lab, s, t in segments:
        out[s:t] = lab
    if np.any(out < 0):
        raise ValueError("segmentation does not tile the utterance")
    return out


def collapse_segments(frame_labels: np.ndarray):
    """Merge runs of equal frame labels into (label, start, end) segments."""
    segments = []
    start = 0
    for i in range(1, len(frame_labels) + 1):
        if i == len(frame_labels) or frame_labels[i] != frame_labels[start]:
            segments.append((int(frame_labels[start]), start, i))
            start = i
    return segments


def truth_path(model: Model, space, utt) -> Path:
    """Ground-truth path at the encoder's time resolution.

    Frame labels are subsampled with the same even-index rule as the encoder
    outputs; supervision that no longer fits the space (a vanished segment, a
    duration above the cap) raises UnrepresentableSupervisionError.
    """
    if utt.segments is None:
        raise UnrepresentableSupervisionError(
            f"{utt.utt_id}: loss needs a ground-truth segmentation")
    frame_labels = frame_labels_from_segments(utt.segments,
                                              utt.features.shape[0])
    sub = subsample_frame_labels(frame_labels, model.config.encoder_config())
    segments = collapse_segments(sub)
    if [lab for lab, _, _ in segments] != list(utt.labels):
        raise UnrepresentableSupervisionError(
            f"{utt.utt_id}: subsampling destroyed the segmentation")
    edges = []
    for lab, s, t in segments:
        e = space.find_edge(lab, s, t)
        if e < 0:
            raise UnrepresentableSupervisionError(
                f"{utt.utt_id}: segment duration {t - s} not in the space")
        edges.append(e)
    return Path.from_edges(space, edges)


def _segmental_edge_loss(model: Model, space, table, utt, loss_kind):
    if loss_kind == "mll":
        constraint = build_label_chain(utt.labels, model.config.num_labels)
        return marginal_log_loss(space, table, constraint)
    truth = truth_path(model, space, utt)
    if loss_kind == "hinge":
        cost = CostFunction.from_path(truth, space.num_frames,
                                      scale=model.config.cost_scale)
        return hinge_loss(space, table, truth, cost)
    if loss_kind == "log":
        return log_loss(space, table, truth)
    raise ValueError(f"unknown segmental loss {loss_kind!r}")


def _enc_frame_loss(model: Model, enc_out: EncoderOutputs, utt, loss_kind):
    """Frame-level loss on the classifier head (gradients w.r.t. logits)."""
    log_probs = classifier_head(enc_out, model.enc.head_w, model.enc.head_b)
    if loss_kind == "ce":
        if utt.segments is None:
            raise UnrepresentableSupervisionError(
                f"{utt.utt_id}: frame cross entropy needs a segmentation")
        frame_labels = frame_labels_from_segments(utt.segments,
                                                  utt.features.shape[0])
        sub = subsample_frame_labels(frame_labels,
                                     model.config.encoder_config())
        if len(sub) != enc_out.num_frames:
            raise UnrepresentableSupervisionError(
                f"{utt.utt_id}: label subsampling mismatch")
        res = frame_cross_entropy(log_probs, sub)
    elif loss_kind == "ctc":
        res = ctc_loss(log_probs, utt.labels, blank=model.config.blank,
                       strict_repeats=model.config.ctc_strict_repeats)
    else:
        raise ValueError(f"unknown encoder loss {loss_kind!r}")
    return res


def compute_loss(model: Model, utt, *, seg_loss: str | None = None,
                 enc_loss: str | None = None, lam: float = 1.0,
                 train: bool = False,
                 rng: np.random.Generator | None = None,
                 need_grads: bool = True,
                 trainable: tuple[str, ...] = ("enc", "dec")) -> LossBundle:
    """Loss and named gradients for one utterance.

    With both ``seg_loss`` and ``enc_loss`` given, the two are combined as
    lam * segmental + (1 - lam) * encoder over a shared encoder forward pass,
    with the two gradient sets assembled separately and combined exactly.
    """
    if seg_loss is None and enc_loss is None:
        raise ValueError("need at least one loss")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"interpolation weight {lam} outside [0, 1]")
    config = model.config
    enc_config = config.encoder_config()
    enc_out, cache = encode(utt.features, model.enc, enc_config,
                            train=train, rng=rng)

    bundles = []
    if seg_loss is not None:
        if model.dec is None:
            raise ValueError("segmental loss needs decoder parameters")
        space = build_segmental_space(enc_out.num_frames, config.num_labels,
                                      config.max_duration)
        table = score_all_edges(space, enc_out, model.dec)
        res = _segmental_edge_loss(model, space, table, utt, seg_loss)
        bundle = LossBundle(value=res.value)
        if need_grads:
            dec_grads, dh = backprop_edges(space, enc_out, model.dec,
                                           res.grads)
            if "dec" in trainable:
                bundle.grads.update(
                    (f"dec.{n}", a) for n, a in dec_grads.tensors())
            if "enc" in trainable:
                enc_grads, _ = encoder_backward(model.enc, cache, dh)
                bundle.grads.update(
                    (f"enc.{n}", a) for n, a in enc_grads.tensors())
        bundles.append(bundle)
    if enc_loss is not None:
        res = _enc_frame_loss(model, enc_out, utt, enc_loss)
        bundle = LossBundle(value=res.value)
        if need_grads and "enc" in trainable:
            dw, db, dh = head_backward(enc_out, model.enc.head_w, res.grads)
            enc_grads, _ = encoder_backward(model.enc, cache, dh)
            grads = {f"enc.{n}": a for n, a in enc_grads.tensors()}
            grads["enc.head.w"] = grads["enc.head.w"] + dw
            grads["enc.head.b"] = grads["enc.head.b"] + db
            bundle.grads.update(grads)
        bundles.append(bundle)

    if len(bundles) == 1:
        return bundles[0]
    from .training import multitask_loss
    return multitask_loss(lam, bundles[0], bundles[1])


def collapse_ctc_output(labels, blank: int) -> list[int]:
    """Best-path postprocessing: merge duplicates, then drop blanks."""
    out = []
    prev = None
    for lab in labels:
        if lab != prev:
            out.append(int(lab))
        prev = lab
    return [lab for lab in out if lab != blank]


def decode_utterance(model: Model, features: np.ndarray) -> list[int]:
    """Best-path decode to a label sequence (CTC outputs are collapsed)."""
    config = model.config
    enc_out, _ = encode(features, model.enc, config.encoder_config(),
                        train=False)
    if config.kind == "ctc":
        log_probs = classifier_head(enc_out, model.enc.head_w,
                                    model.enc.head_b)
        space = build_ctc_space(enc_out.num_frames, config.num_labels + 1)
        path, _ = max_path(space, EdgeWeightTable.from_values(
            log_probs.ravel()))
        return collapse_ctc_output(path.labels, config.blank)
    if config.kind == "frame":
        log_probs = classifier_head(enc_out, model.enc.head_w,
                                    model.enc.head_b)
        frames = log_probs.argmax(axis=1)
        return [lab for i, lab in enumerate(frames)
                if i == 0 or lab != frames[i - 1]]
    space = build_segmental_space(enc_out.num_frames, config.num_labels,
                                  config.max_duration)
    table = score_all_edges(space, enc_out, model.dec)
    path, _ = max_path(space, table)
    return path.labels


def save_model(path, model: Model, extra_meta: dict | None = None,
               extra_tensors: dict | None = None) -> None:
    """Checkpoint the model: every named tensor plus the config snapshot.

    ``extra_tensors`` (e.g. optimizer accumulators under an "opt." prefix)
    ride along in the same container and are ignored by :func:`load_model`.
    """
    from .data import save_checkpoint
    meta = {"model_config": model.config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    tensors = dict(model.param_items())
    if extra_tensors:
        tensors.update(extra_tensors)
    save_checkpoint(path, tensors, meta)


def load_model(path) -> Model:
    from .data import load_checkpoint
    tensors, meta = load_checkpoint(path)
    model = init_model(ModelConfig(**meta["model_config"]), seed=0)
    for name, arr in model.param_items():
        arr[...] = tensors[name]
    return model


def warm_start_encoder(model: Model, checkpoint_path) -> None:
    """Copy matching encoder tensors from a pretrained checkpoint.

    When the new model uses the FC weight function and the checkpoint carries
    a frame-classifier head of matching shape, the FC classifier is seeded
    from it as well (the usual second-stage initialization).
    """
    from .data import load_checkpoint
    from .weights import FcParams
    tensors, _ = load_checkpoint(checkpoint_path)
    for name, arr in model.param_items():
        if name.startswith("enc.") and name in tensors \
                and tensors[name].shape == arr.shape:
            arr[...] = tensors[name]
    if isinstance(model.dec, FcParams) and "enc.head.w" in tensors \
            and tensors["enc.head.w"].shape == model.dec.clf_w.shape:
        model.dec.clf_w[...] = tensors["enc.head.w"]
        model.dec.clf_b[...] = tensors["enc.head.b"]
