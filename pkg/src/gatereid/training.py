"""Siamese training loop: pair sampling, augmentation, normalization, Adam.

Each batch draws positive pairs (same identity under the two cameras) and
negative pairs (different identities), takes a fixed-length consecutive
subsequence from every clip, applies one crop+flip decision per clip, and
normalizes the five channels by training-set statistics.  The batch gradient
is the mean of the per-pair joint-loss gradients.

Every epoch draws from its own seed stream derived from (seed, epoch), so a
run resumed from a checkpoint at an epoch boundary replays the remaining
epochs bit-identically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .losses import ClassifierParams, total_loss
from .network import NetworkConfig, NetworkParams, init_network_params, sequence_forward
from .synth import VideoClip, crop_clip, flip_clip
from .tensor import NonFiniteError, Tape, Tensor


class TrainingDiverged(RuntimeError):
    """The joint loss or a gradient stopped being finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    margin: float = 2.0
    pos_pairs_per_batch: int = 10
    neg_pairs_per_batch: int = 10
    subseq_len: int = 16
    crop_height: int = 56
    crop_width: int = 28
    flip_probability: float = 0.5
    epochs: int = 100
    rng_seed: int = 0
    use_gate_regularizer: bool = True

    def validate(self, frame_hw: tuple[int, int] | None = None) -> None:
        if not 0.0 < self.learning_rate:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.adam_epsilon <= 0:
            raise ValueError("adam_epsilon must be positive")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.pos_pairs_per_batch < 1 or self.neg_pairs_per_batch < 0:
            raise ValueError("need at least one positive pair per batch")
        if self.subseq_len < 1 or self.epochs < 1:
            raise ValueError("subseq_len and epochs must be positive")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")
        if self.crop_height % 4 or self.crop_width % 4:
            # two clean pooling stages before the odd-extent ceil case
            raise ValueError("crop extents must be divisible by 4")
        if frame_hw is not None:
            if self.crop_height > frame_hw[0] or self.crop_width > frame_hw[1]:
                raise ValueError(f"crop {self.crop_height}x{self.crop_width} exceeds frame {frame_hw}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# channel statistics

@dataclass
class ChannelStats:
    """Population mean/std of the five input channels (3 color + 2 flow)."""

    mean: np.ndarray  # [5] float64
    std: np.ndarray   # [5] float64


def compute_channel_stats(clips) -> ChannelStats:
    """Exact two-pass population statistics over all frames of all clips."""
    if not clips:
        raise ValueError("no clips")
    count = np.zeros(2)
    total = np.zeros((2, 3))
    for c in clips:
        total[0, :3] += c.frames.sum(axis=(0, 1, 2), dtype=np.float64)
        total[1, :2] += c.flow.sum(axis=(0, 1, 2), dtype=np.float64)
        count[0] += c.frames[..., 0].size
        count[1] += c.flow[..., 0].size
    mean = np.concatenate([total[0, :3] / count[0], total[1, :2] / count[1]])
    sq = np.zeros(5)
    for c in clips:
        sq[:3] += ((c.frames - mean[:3]) ** 2).sum(axis=(0, 1, 2), dtype=np.float64)
        sq[3:] += ((c.flow - mean[3:]) ** 2).sum(axis=(0, 1, 2), dtype=np.float64)
    var = sq / np.concatenate([np.full(3, count[0]), np.full(2, count[1])])
    std = np.sqrt(var)
    if std.min() < 1e-12:
        raise ValueError(f"degenerate channel with zero variance: std={std}")
    return ChannelStats(mean, std)


def normalize_clip(clip: VideoClip, stats: ChannelStats) -> VideoClip:
    """Per-channel (x - mean) / std in the clip's own dtype."""
    dt = clip.frames.dtype
    cm, cs = stats.mean[:3].astype(dt), stats.std[:3].astype(dt)
    fm, fs = stats.mean[3:].astype(dt), stats.std[3:].astype(dt)
    return VideoClip(clip.person_id, clip.camera_id,
                     (clip.frames - cm) / cs, (clip.flow - fm) / fs,
                     clip.owner, clip.has_occluder)


# ---------------------------------------------------------------------------
# sampling and augmentation

def sample_subsequence(clip: VideoClip, length: int, rng: np.random.Generator) -> VideoClip:
    """Consecutive frames of the requested length (whole clip when shorter).

    The cut keeps the flow arrays of the retained frames except the first,
    whose predecessor is gone, so it is zeroed like a clip start.
    """
    t = clip.num_frames
    if t == 0:
        raise ValueError("empty clip")
    if length >= t:
        return clip
    start = int(rng.integers(0, t - length + 1))
    frames = clip.frames[start:start + length]
    flow = clip.flow[start:start + length].copy()
    flow[0] = 0.0
    owner = clip.owner[start:start + length] if clip.owner is not None else None
    return VideoClip(clip.person_id, clip.camera_id, frames, flow, owner, clip.has_occluder)


def augment(clip: VideoClip, crop_hw: tuple[int, int], flip_probability: float,
            rng: np.random.Generator) -> VideoClip:
    """One random crop offset and one flip decision applied to a whole clip.

    Always consumes exactly three draws (crop y, crop x, flip), so the rng
    stream stays aligned regardless of geometry.
    """
    h, w = clip.frame_hw
    ch, cw = crop_hw
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    do_flip = bool(rng.random() < flip_probability)
    out = crop_clip(clip, oy, ox, ch, cw)
    if do_flip:
        out = flip_clip(out)
    return out


def build_batch(train_clips, config: TrainConfig, rng: np.random.Generator):
    """Sample (clip_a, clip_b, same_person) pairs across the two cameras."""
    by_key: dict[tuple, list] = {}
    for c in train_clips:
        by_key.setdefault((c.person_id, c.camera_id), []).append(c)
    ids = sorted({c.person_id for c in train_clips})
    cams = sorted({c.camera_id for c in train_clips})
    if len(ids) < 2:
        raise ValueError("need at least two identities to form negative pairs")
    if len(cams) < 2:
        raise ValueError("need two cameras to form cross-view pairs")
    cam_a, cam_b = cams[0], cams[1]

    def pick(pid, cam):
        group = by_key.get((pid, cam))
        if not group:
            raise ValueError(f"identity {pid} has no clip under camera {cam}")
        return group[int(rng.integers(len(group)))]

    pairs = []
    for _ in range(config.pos_pairs_per_batch):
        pid = ids[int(rng.integers(len(ids)))]
        pairs.append((pick(pid, cam_a), pick(pid, cam_b), True))
    for _ in range(config.neg_pairs_per_batch):
        i = int(rng.integers(len(ids)))
        j = int(rng.integers(len(ids) - 1))
        if j >= i:
            j += 1
        pairs.append((pick(ids[i], cam_a), pick(ids[j], cam_b), False))
    return pairs


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def fresh(cls, named_params: dict) -> "AdamState":
        return cls(m={n: np.zeros_like(t.data) for n, t in named_params.items()},
                   v={n: np.zeros_like(t.data) for n, t in named_params.items()},
                   step=0)


def adam_step(named_params: dict, grads: dict, state: AdamState,
              config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in named_params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / corr1) / (np.sqrt(v / corr2) + config.adam_epsilon)
        p.data = p.data - config.learning_rate * update


# ---------------------------------------------------------------------------
# the loop

_LOG_COLUMNS = ("epoch", "batch", "ident_i", "ident_j", "verif", "gate_i", "gate_j",
                "total", "id_accuracy", "mean_gate", "gate_min", "gate_max",
                "raw_gate_min", "raw_gate_max")


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    ident_i: float
    ident_j: float
    verif: float
    gate_i: float
    gate_j: float
    total: float
    id_accuracy: float
    mean_gate: float
    gate_min: float
    gate_max: float
    raw_gate_min: float
    raw_gate_max: float

    def row(self) -> str:
        vals = [str(self.epoch), str(self.batch)]
        vals += [f"{getattr(self, c):.10g}" for c in _LOG_COLUMNS[2:]]
        return "\t".join(vals)


def write_log(records, path) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(_LOG_COLUMNS) + "\n")
        for r in records:
            fh.write(r.row() + "\n")


def read_log(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split("\t")
        if tuple(header) != _LOG_COLUMNS:
            raise ValueError(f"unexpected log header in {path}")
        for line in fh:
            parts = line.strip().split("\t")
            rows.append(BatchRecord(int(parts[0]), int(parts[1]),
                                    *[float(v) for v in parts[2:]]))
    return rows


@dataclass
class TrainResult:
    params: NetworkParams
    classifier: ClassifierParams
    adam: AdamState
    stats: ChannelStats
    records: list = field(default_factory=list)
    epochs_run: int = 0
    id_to_class: dict = field(default_factory=dict)


def trainable_dict(params: NetworkParams, classifier: ClassifierParams) -> dict:
    named = dict(params.tensors)
    named["classifier_weight"] = classifier.weight
    return named


def init_training(train_clips, net_config: NetworkConfig, train_config: TrainConfig,
                  dtype=np.float32):
    """Fresh parameters, classifier and optimizer state for a training run."""
    ids = sorted({c.person_id for c in train_clips})
    rng = np.random.default_rng([train_config.rng_seed, 0])
    params = init_network_params(net_config,
                                 (train_config.crop_height, train_config.crop_width),
                                 rng, dtype)
    classifier = ClassifierParams.init(len(ids), net_config.feature_dim, rng, dtype)
    adam = AdamState.fresh(trainable_dict(params, classifier))
    return params, classifier, adam


def train(train_clips, net_config: NetworkConfig, train_config: TrainConfig,
          dtype=np.float32, stats: ChannelStats | None = None,
          resume: TrainResult | None = None, log_path: str | None = None) -> TrainResult:
    """Run (or continue) training and return parameters plus the batch log.

    ``resume`` continues a previous result from its epoch boundary; thanks to
    the per-epoch seed streams the combined run is bit-identical to an
    uninterrupted one.
    """
    net_config.validate()
    frame_hw = train_clips[0].frame_hw if train_clips else None
    train_config.validate(frame_hw)
    if not train_clips:
        raise ValueError("no training clips")
    ids = sorted({c.person_id for c in train_clips})
    id_to_class = {pid: k for k, pid in enumerate(ids)}

    if stats is None:
        stats = compute_channel_stats(train_clips)
    if resume is None:
        params, classifier, adam = init_training(train_clips, net_config, train_config, dtype)
        records: list[BatchRecord] = []
        start_epoch = 0
    else:
        params, classifier, adam = resume.params, resume.classifier, resume.adam
        records = list(resume.records)
        start_epoch = resume.epochs_run
        if classifier.num_identities != len(ids):
            raise ValueError("resume checkpoint was trained on a different identity count")

    named = trainable_dict(params, classifier)
    batches_per_epoch = math.ceil(len(ids) / train_config.pos_pairs_per_batch)
    gated = net_config.gate_mode != "none"

    for epoch in range(start_epoch, train_config.epochs):
        rng = np.random.default_rng([train_config.rng_seed, 1, epoch])
        for batch_idx in range(batches_per_epoch):
            pairs = build_batch(train_clips, train_config, rng)
            for p in named.values():
                p.grad = None
            sums = {k: 0.0 for k in ("ident_i", "ident_j", "verif", "gate_i", "gate_j", "total")}
            hits = 0
            gate_sum = 0.0
            gate_frames = 0
            gate_min, gate_max = np.inf, -np.inf
            raw_min, raw_max = np.inf, -np.inf
            for clip_a, clip_b, same in pairs:
                ca = _prepare(clip_a, train_config, stats, rng)
                cb = _prepare(clip_b, train_config, stats, rng)
                with Tape() as tape:
                    feat_a, gates_a = sequence_forward(ca, params, net_config)
                    feat_b, gates_b = sequence_forward(cb, params, net_config)
                    fused_a = [g["fused"] for g in gates_a] if gated else None
                    fused_b = [g["fused"] for g in gates_b] if gated else None
                    reg_a = fused_a if train_config.use_gate_regularizer else None
                    reg_b = fused_b if train_config.use_gate_regularizer else None
                    breakdown = total_loss(
                        feat_a, feat_b,
                        (id_to_class[clip_a.person_id], id_to_class[clip_b.person_id]),
                        reg_a, reg_b, classifier, train_config.margin)
                vals = breakdown.floats()
                if not np.isfinite(vals["total"]):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} batch {batch_idx}: {vals}")
                tape.backward(breakdown.total)
                for k in sums:
                    sums[k] += vals[k]
                hits += int(_predicted_class(classifier, feat_a) == id_to_class[clip_a.person_id])
                hits += int(_predicted_class(classifier, feat_b) == id_to_class[clip_b.person_id])
                if gated:
                    for gates, frame_gates in ((fused_a, gates_a), (fused_b, gates_b)):
                        for g in gates:
                            v = g.values.data
                            gate_sum += float(v.mean())
                            gate_frames += 1
                            gate_min = min(gate_min, float(v.min()))
                            gate_max = max(gate_max, float(v.max()))
                        for fg in frame_gates:
                            for kind in ("color", "flow"):
                                if kind in fg:
                                    rv = fg[kind].values.data
                                    raw_min = min(raw_min, float(rv.min()))
                                    raw_max = max(raw_max, float(rv.max()))
            n_pairs = len(pairs)
            grads = {}
            for name, p in named.items():
                if p.grad is None:
                    grads[name] = np.zeros_like(p.data)
                else:
                    grads[name] = p.grad / n_pairs
            adam_step(named, grads, adam, train_config)
            records.append(BatchRecord(
                epoch=epoch, batch=batch_idx,
                ident_i=sums["ident_i"] / n_pairs, ident_j=sums["ident_j"] / n_pairs,
                verif=sums["verif"] / n_pairs,
                gate_i=sums["gate_i"] / n_pairs, gate_j=sums["gate_j"] / n_pairs,
                total=sums["total"] / n_pairs,
                id_accuracy=hits / (2.0 * n_pairs),
                mean_gate=gate_sum / gate_frames if gate_frames else 0.0,
                gate_min=gate_min if gate_frames else 0.0,
                gate_max=gate_max if gate_frames else 0.0,
                raw_gate_min=raw_min if np.isfinite(raw_min) else 0.0,
                raw_gate_max=raw_max if np.isfinite(raw_max) else 0.0,
            ))
    result = TrainResult(params, classifier, adam, stats, records,
                         train_config.epochs, id_to_class)
    if log_path is not None:
        write_log(records, log_path)
    return result


def _prepare(clip, config: TrainConfig, stats: ChannelStats, rng) -> VideoClip:
    sub = sample_subsequence(clip, config.subseq_len, rng)
    aug = augment(sub, (config.crop_height, config.crop_width),
                  config.flip_probability, rng)
    return normalize_clip(aug, stats)


def _predicted_class(classifier: ClassifierParams, feature: Tensor) -> int:
    return int(np.argmax(classifier.weight.data @ feature.data))
