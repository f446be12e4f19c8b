"""On-disk formats and synthetic data.

Features are stored per utterance as binary "SEGF" files (little-endian
float32, row-major).  Transcripts, segmentations, the label alphabet, and the
evaluation collapse map are plain text sidecar files.  Checkpoints are
single-file "SEGC" containers of named float64 tensors plus a JSON header
(config snapshot, RNG state, optimizer scalars); load/save round trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

FEATURE_MAGIC = b"SEGF"
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b"SEGC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def write_features(path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError(f"features must be T x d, got shape {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features contain non-finite values")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<HII", FEATURE_VERSION, feats.shape[0],
                            feats.shape[1]))
        f.write(feats.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: not a feature file (magic {magic!r})")
        version, t, d = struct.unpack("<HII", f.read(10))
        if version != FEATURE_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        payload = f.read(4 * t * d)
        if len(payload) != 4 * t * d:
            raise ValueError(f"{path}: truncated payload")
        feats = np.frombuffer(payload, dtype="<f4").reshape(t, d)
    if not np.all(np.isfinite(feats)):
        raise ValueError(f"{path}: features contain non-finite values")
    return feats.copy()


# ---------------------------------------------------------------------------
# alphabet, transcripts, segmentations, collapse map
# ---------------------------------------------------------------------------

@dataclass
class Alphabet:
    labels: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {lab: i for i, lab in enumerate(self.labels)}
        if len(self.index) != len(self.labels):
            raise ValueError("duplicate labels in alphabet")

    def __len__(self) -> int:
        return len(self.labels)

    def id(self, label: str) -> int:
        if label not in self.index:
            raise ValueError(f"label {label!r} not in alphabet")
        return self.index[label]

    @classmethod
    def load(cls, path) -> "Alphabet":
        with open(path) as f:
            labels = [line.strip() for line in f if line.strip()]
        return cls(labels=labels)

    def save(self, path) -> None:
        with open(path, "w") as f:
            for lab in self.labels:
                f.write(lab + "\n")


def write_transcripts(path, transcripts: dict[str, list[str]]) -> None:
    with open(path, "w") as f:
        for utt_id, tokens in transcripts.items():
            f.write(f"{utt_id}\t{' '.join(tokens)}\n")


def read_transcripts(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, _, rest = line.partition("\t")
            out[utt_id] = rest.split()
    return out


def write_segments(path, segments: dict[str, list[tuple[str, int, int]]]) -> None:
    with open(path, "w") as f:
        for utt_id, segs in segments.items():
            for lab, s, t in segs:
                f.write(f"{utt_id} {lab} {s} {t}\n")


def read_segments(path) -> dict[str, list[tuple[str, int, int]]]:
    out: dict[str, list[tuple[str, int, int]]] = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"bad segmentation line: {line!r}")
            utt_id, lab, s, t = parts
            out.setdefault(utt_id, []).append((lab, int(s), int(t)))
    return out


def check_tiling(segments: list[tuple[str, int, int]], num_frames: int,
                 utt_id: str = "?") -> None:
    """Reject segmentations with gaps or overlaps."""
    expected = 0
    for lab, s, t in segments:
        if s != expected or t <= s:
            raise ValueError(f"{utt_id}: segmentation has a gap or overlap "
                             f"at ({lab}, {s}, {t})")
        expected = t
    if expected != num_frames:
        raise ValueError(f"{utt_id}: segmentation covers {expected} of "
                         f"{num_frames} frames")


def write_collapse_map(path, mapping: dict[str, str]) -> None:
    with open(path, "w") as f:
        for src, dst in mapping.items():
            f.write(f"{src} {dst}\n")


def load_collapse_map(path, alphabet: Alphabet) -> np.ndarray:
    """Label-id collapse array for evaluation (identity for unnamed labels)."""
    mapping = np.arange(len(alphabet), dtype=np.int64)
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            src, dst = parts
            mapping[alphabet.id(src)] = alphabet.id(dst)
    return mapping


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize_features(feats: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Per-sequence, per-dimension mean/variance normalization.

    Zero-variance dimensions pass through unchanged.
    """
    feats = np.asarray(feats, dtype=np.float64)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    live = std > eps
    out = feats.copy()
    out[:, live] = (feats[:, live] - mean[live]) / std[live]
    return out


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    labels: list[int]
    segments: list[tuple[int, int, int]] | None = None   # (label, start, end)


@dataclass
class Dataset:
    alphabet: Alphabet
    utterances: list[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)


def load_dataset(root, split: str, normalize: bool = True) -> Dataset:
    root = FsPath(root)
    alphabet = Alphabet.load(root / "alphabet.txt")
    split_dir = root / split
    transcripts = read_transcripts(split_dir / "transcripts.txt")
    seg_path = split_dir / "segments.txt"
    segments = read_segments(seg_path) if seg_path.exists() else {}
    utterances = []
    for utt_id, tokens in transcripts.items():
        feats = read_features(split_dir / "features" / f"{utt_id}.segf")
        if normalize:
            feats = normalize_features(feats)
        segs = None
        if utt_id in segments:
            check_tiling(segments[utt_id], feats.shape[0], utt_id)
            segs = [(alphabet.id(lab), s, t)
                    for lab, s, t in segments[utt_id]]
        utterances.append(Utterance(
            utt_id=utt_id,
            features=feats,
            labels=[alphabet.id(tok) for tok in tokens],
            segments=segs,
        ))
    return Dataset(alphabet=alphabet, utterances=utterances)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    num_train: int = 200
    num_dev: int = 50
    alphabet_size: int = 5
    feature_dim: int = 8
    min_segments: int = 2
    max_segments: int = 4
    min_duration: int = 3
    max_duration: int = 6
    mean_separation: float = 1.0
    noise_std: float = 0.2
    seed: int = 0
    bayes_samples: int = 200_000


def _label_means(config: SynthConfig) -> np.ndarray:
    if config.feature_dim < config.alphabet_size:
        raise ValueError("feature_dim must be >= alphabet_size for "
                         "orthogonal class means")
    means = np.zeros((config.alphabet_size, config.feature_dim))
    for i in range(config.alphabet_size):
        means[i, i] = config.mean_separation
    return means


def estimate_bayes_frame_error(means: np.ndarray, noise_std: float,
                               priors: np.ndarray, rng: np.random.Generator,
                               num_samples: int) -> float:
    """Monte-Carlo estimate of the optimal per-frame classification error."""
    if noise_std == 0.0:
        return 0.0
    labels = rng.choice(len(priors), size=num_samples, p=priors)
    x = means[labels] + noise_std * rng.normal(
        size=(num_samples, means.shape[1]))
    # optimal rule under shared isotropic noise
    scores = (x @ means.T) / (noise_std ** 2) \
        - 0.5 * (means ** 2).sum(axis=1) / (noise_std ** 2) \
        + np.log(priors)
    pred = scores.argmax(axis=1)
    return float(np.mean(pred != labels))


def synth_dataset(config: SynthConfig, out_dir) -> dict:
    """Generate a separable synthetic corpus on disk and return its metadata.

    Labels follow a self-transition-free Markov bigram, durations are uniform
    in [min_duration, max_duration], and frames are Gaussian around per-label
    means.  Writes features, transcripts, ground-truth segmentations, an
    identity collapse map, and the generator's Bayes frame-error estimate.
    """
    out_dir = FsPath(out_dir)
    rng = np.random.default_rng(config.seed)
    means = _label_means(config)
    n = config.alphabet_size
    alphabet = Alphabet(labels=[f"l{i}" for i in range(n)])

    # uniform bigram over the other labels
    transition = np.full((n, n), 1.0 / max(n - 1, 1))
    np.fill_diagonal(transition, 0.0)
    if n == 1:
        transition[:] = 1.0

    frame_counts = np.zeros(n)
    splits: dict[str, list] = {"train": [], "dev": []}
    for split, count in (("train", config.num_train), ("dev", config.num_dev)):
        for i in range(count):
            utt_id = f"{split}_{i:04d}"
            k = int(rng.integers(config.min_segments,
                                 config.max_segments + 1))
            labels = [int(rng.integers(n))]
            while len(labels) < k:
                labels.append(int(rng.choice(n, p=transition[labels[-1]])))
            durations = rng.integers(config.min_duration,
                                     config.max_duration + 1, size=k)
            segments, frames, pos = [], [], 0
            for lab, dur in zip(labels, durations):
                segments.append((alphabet.labels[lab], pos, pos + int(dur)))
                frames.append(means[lab]
                              + config.noise_std * rng.normal(
                                  size=(int(dur), config.feature_dim)))
                frame_counts[lab] += int(dur)
                pos += int(dur)
            feats = np.vstack(frames)
            splits[split].append((utt_id, feats, labels, segments))

    priors = frame_counts / frame_counts.sum()
    bayes_error = estimate_bayes_frame_error(
        means, config.noise_std, priors, rng, config.bayes_samples)

    out_dir.mkdir(parents=True, exist_ok=True)
    alphabet.save(out_dir / "alphabet.txt")
    write_collapse_map(out_dir / "collapse.txt",
                       {lab: lab for lab in alphabet.labels})
    for split, utts in splits.items():
        split_dir = out_dir / split
        (split_dir / "features").mkdir(parents=True, exist_ok=True)
        transcripts = {}
        segments = {}
        for utt_id, feats, labels, segs in utts:
            write_features(split_dir / "features" / f"{utt_id}.segf", feats)
            transcripts[utt_id] = [alphabet.labels[lab] for lab in labels]
            segments[utt_id] = segs
        write_transcripts(split_dir / "transcripts.txt", transcripts)
        write_segments(split_dir / "segments.txt", segments)

    meta = {
        "config": config.__dict__.copy(),
        "label_means": means.tolist(),
        "frame_label_priors": priors.tolist(),
        "bayes_frame_error": bayes_error,
    }
    with open(out_dir / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return meta


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, tensors: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write a versioned container of named float64 tensors plus metadata."""
    meta = dict(meta or {})
    names = sorted(tensors)
    manifest = [[name, list(tensors[name].shape)] for name in names]
    header = json.dumps({"meta": meta, "tensors": manifest},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for name in names:
            f.write(np.ascontiguousarray(tensors[name],
                                         dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        version, header_len = struct.unpack("<HI", f.read(6))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        header = json.loads(f.read(header_len))
        tensors = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8")
            tensors[name] = data.reshape(shape).copy()
    return tensors, header["meta"]


# ---------------------------------------------------------------------------
# debugging serialization
# ---------------------------------------------------------------------------

def lattice_to_text(space, weights=None) -> str:
    """Human-readable dump of a search space, one vertex/edge per line."""
    lines = [f"# frames={space.num_frames} labels={space.num_labels} "
             f"vertices={space.num_vertices} edges={space.num_edges}"]
    for v in range(space.num_vertices):
        lines.append(f"v {v} {int(space.vertex_time[v])}")
    lines.append(f"I {space.initial}")
    lines.append(f"F {space.final}")
    for e in range(space.num_edges):
        row = (f"e {e} {int(space.edge_tail[e])} {int(space.edge_head[e])} "
               f"{int(space.edge_label[e])} {int(space.edge_start[e])} "
               f"{int(space.edge_end[e])}")
        if weights is not None:
            row += f" {float(weights.values[e]):.17g}"
        lines.append(row)
    return "\n".join(lines) + "\n"
