"""Cross-camera retrieval evaluation with a cumulative match curve.

Probe clips come from the first camera, gallery clips from the second.  Every
clip is summarized by sixteen feature vectors (eight fixed crop offsets, each
also flipped); the distance between two clips is the sum of the sixteen
per-variant Euclidean distances.  The CMC value at rank r is the percentage
of probes whose correct gallery identity appears within the r closest
gallery entries.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .network import NetworkConfig, NetworkParams, sequence_forward
from .synth import VideoClip, crop_clip, flip_clip, truncate_clip
from .training import ChannelStats, normalize_clip

MAX_TEST_FRAMES = 128


def eight_crop_offsets(frame_hw: tuple[int, int], crop_hw: tuple[int, int]):
    """Four corners plus four edge midpoints of the valid offset grid."""
    my = frame_hw[0] - crop_hw[0]
    mx = frame_hw[1] - crop_hw[1]
    if my < 0 or mx < 0:
        raise ValueError(f"crop {crop_hw} larger than frame {frame_hw}")
    return [
        (0, 0), (0, mx), (my, 0), (my, mx),
        (0, mx // 2), (my, mx // 2), (my // 2, 0), (my // 2, mx),
    ]


def extract_test_feature(clip: VideoClip, params: NetworkParams, config: NetworkConfig,
                         stats: ChannelStats, crop_offset=(0, 0), flipped: bool = False,
                         max_frames: int = MAX_TEST_FRAMES) -> np.ndarray:
    """Clip feature under one crop/flip variant, on at most ``max_frames`` frames."""
    ch, cw = params.input_hw
    work = truncate_clip(clip, max_frames)
    work = crop_clip(work, crop_offset[0], crop_offset[1], ch, cw)
    if flipped:
        work = flip_clip(work)
    work = normalize_clip(work, stats)
    feat, _ = sequence_forward(work, params, config)
    return np.array(feat.data, copy=True)


def clip_variant_features(clip: VideoClip, params: NetworkParams, config: NetworkConfig,
                          stats: ChannelStats, max_frames: int = MAX_TEST_FRAMES) -> np.ndarray:
    """[16, feature_dim]: the eight offsets unflipped, then the same flipped."""
    offsets = eight_crop_offsets(clip.frame_hw, params.input_hw)
    rows = [extract_test_feature(clip, params, config, stats, off, False, max_frames)
            for off in offsets]
    rows += [extract_test_feature(clip, params, config, stats, off, True, max_frames)
             for off in offsets]
    return np.stack(rows)


def multi_crop_distance(probe: VideoClip, gallery: VideoClip, params: NetworkParams,
                        config: NetworkConfig, stats: ChannelStats,
                        max_frames: int = MAX_TEST_FRAMES) -> float:
    """Sum of per-variant Euclidean distances; symmetric in its arguments."""
    fp = clip_variant_features(probe, params, config, stats, max_frames)
    fg = clip_variant_features(gallery, params, config, stats, max_frames)
    return float(np.linalg.norm(fp - fg, axis=1).sum())


def variant_distance_matrix(probe_feats: np.ndarray, gallery_feats: np.ndarray) -> np.ndarray:
    """[P, G] summed distances from [P, V, D] and [G, V, D] variant features."""
    p, v, d = probe_feats.shape
    g = gallery_feats.shape[0]
    out = np.zeros((p, g))
    for k in range(v):
        a = probe_feats[:, k, :].astype(np.float64)
        b = gallery_feats[:, k, :].astype(np.float64)
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
        out += np.sqrt(np.maximum(sq, 0.0))
    return out


@dataclass
class CMCCurve:
    """Match percentages by rank; non-decreasing and ending at 100."""

    percentages: np.ndarray

    def rank(self, r: int) -> float:
        if not 1 <= r <= len(self.percentages):
            raise IndexError(f"rank {r} outside 1..{len(self.percentages)}")
        return float(self.percentages[r - 1])

    def as_table(self, ranks=None) -> str:
        if ranks is None:
            ranks = [r for r in (1, 5, 10, 20) if r <= len(self.percentages)]
        lines = ["rank\tmatch_pct"]
        lines += [f"{r}\t{self.rank(r):.2f}" for r in ranks]
        return "\n".join(lines) + "\n"


def cmc_from_distances(distances: np.ndarray, probe_ids, gallery_ids) -> CMCCurve:
    """Curve from a [P, G] distance matrix; ties break toward the lower index."""
    distances = np.asarray(distances)
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    p, g = distances.shape
    if len(probe_ids) != p or len(gallery_ids) != g:
        raise ValueError("identity lists do not match the distance matrix")
    missing = set(probe_ids.tolist()) - set(gallery_ids.tolist())
    if missing:
        raise ValueError(f"probe identities absent from the gallery: {sorted(missing)}")
    hits = np.zeros(g)
    for i in range(p):
        order = np.argsort(distances[i], kind="stable")
        ranked = gallery_ids[order] == probe_ids[i]
        first = int(np.nonzero(ranked)[0][0])
        hits[first:] += 1.0
    return CMCCurve(100.0 * hits / p)


def compute_cmc(test_clips, params: NetworkParams, config: NetworkConfig,
                stats: ChannelStats, max_frames: int = MAX_TEST_FRAMES,
                threads: int = 1) -> CMCCurve:
    """Full protocol: first camera probes the second camera's gallery."""
    cams = sorted({c.camera_id for c in test_clips})
    if len(cams) < 2:
        raise ValueError("evaluation needs clips from two cameras")
    probes = [c for c in test_clips if c.camera_id == cams[0]]
    gallery = [c for c in test_clips if c.camera_id == cams[1]]
    if not probes or not gallery:
        raise ValueError("empty probe or gallery set")

    def featurize(clip):
        return clip_variant_features(clip, params, config, stats, max_frames)

    clips = probes + gallery
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            feats = list(pool.map(featurize, clips))
    else:
        feats = [featurize(c) for c in clips]
    pf = np.stack(feats[:len(probes)])
    gf = np.stack(feats[len(probes):])
    dist = variant_distance_matrix(pf, gf)
    return cmc_from_distances(dist,
                              [c.person_id for c in probes],
                              [c.person_id for c in gallery])
