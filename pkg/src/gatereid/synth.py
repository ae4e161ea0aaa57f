"""Synthetic two-camera walking-person videos with exact optical flow.

Each identity is a small articulated sprite: a torso rectangle plus two limb
rectangles whose horizontal offsets oscillate in antiphase, bouncing back and
forth over a per-camera noise background.  All motion is rendered at integer
positions, so the backward flow channels are exact by construction: flow[t]
holds, for every pixel owned by a moving part at time t, the displacement of
that part from frame t-1 (u horizontal, v vertical), and zero elsewhere.

Cameras differ by background texture, an additive color shift, and mirroring;
a configurable fraction of clips also contains an occluding rectangle that
crosses the scene with its own velocity.  Per-pixel layer codes are kept for
every frame, which gives the diagnostics a ground-truth person mask.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

OWNER_BACKGROUND = 0
OWNER_TORSO = 1
OWNER_LIMB_A = 2
OWNER_LIMB_B = 3
OWNER_OCCLUDER = 4

_MANIFEST_NAME = "manifest.txt"
_DATASET_MAGIC = "gatereid-dataset"
_CLIP_MAGIC = "gatereid-clip"


@dataclass
class SyntheticIdentity:
    """Per-person appearance and gait parameters, shared across cameras."""

    ident: int
    torso_color: np.ndarray  # [3] in [0.15, 0.85]
    limb_color: np.ndarray
    torso_h: int
    torso_w: int
    limb_h: int
    limb_w: int
    swing_px: int        # limb oscillation amplitude
    gait_freq: float     # cycles per frame
    gait_phase: float
    bob_phase: float
    speed: float         # px per frame, applied with a per-clip direction


@dataclass
class CameraSpec:
    camera: int
    background_seed: tuple
    color_shift: np.ndarray  # [3] additive, in [-0.1, 0.1]
    mirrored: bool
    occluder_density: float


@dataclass
class VideoClip:
    """One identity seen by one camera.

    frames: [T, H, W, 3] float32 in [0, 1] (before channel normalization).
    flow:   [T, H, W, 2] float32; flow[t] maps frame t-1 to t, flow[0] = 0.
    owner:  [T, H, W] uint8 layer codes, or None for clips without labels.
    """

    person_id: int
    camera_id: int
    frames: np.ndarray
    flow: np.ndarray
    owner: np.ndarray | None = None
    has_occluder: bool = False

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_hw(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class SyntheticDataset:
    clips: list
    frame_hw: tuple[int, int]
    seed: int
    identities: list = field(default_factory=list)
    cameras: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# generation

def _sample_identity(ident: int, rng: np.random.Generator, h: int, w: int) -> SyntheticIdentity:
    torso_h = int(rng.integers(round(0.28 * h), round(0.42 * h) + 1))
    torso_w = int(rng.integers(max(3, round(0.18 * w)), max(4, round(0.32 * w)) + 1))
    limb_h = int(rng.integers(round(0.18 * h), round(0.28 * h) + 1))
    limb_w = max(2, torso_w // 3)
    swing = max(1, round(0.09 * w))
    ident_spec = SyntheticIdentity(
        ident=ident,
        torso_color=rng.uniform(0.15, 0.85, 3),
        limb_color=rng.uniform(0.15, 0.85, 3),
        torso_h=torso_h,
        torso_w=torso_w,
        limb_h=limb_h,
        limb_w=limb_w,
        swing_px=swing,
        gait_freq=float(rng.uniform(0.08, 0.25)),
        gait_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        bob_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        speed=float(rng.uniform(0.6, 1.6)),
    )
    if ident_spec.torso_h + ident_spec.limb_h + 3 > h:
        raise ValueError(f"frame height {h} too small for the sprite")
    if ident_spec.torso_w + 2 * swing + 2 > w:
        raise ValueError(f"frame width {w} too small for the sprite")
    return ident_spec


def _paint(frame, owner, y0, x0, hh, ww, color, code, h, w):
    """Fill a clipped rectangle and stamp its layer code."""
    ya, yb = max(0, y0), min(h, y0 + hh)
    xa, xb = max(0, x0), min(w, x0 + ww)
    if ya >= yb or xa >= xb:
        return
    frame[ya:yb, xa:xb, :] = color
    owner[ya:yb, xa:xb] = code


def _bounce_positions(x0: float, v: float, lo: float, hi: float, steps: int) -> np.ndarray:
    """Track a point bouncing in [lo, hi] (constant speed, sign flips at walls)."""
    xs = np.empty(steps)
    x = x0
    for t in range(steps):
        xs[t] = x
        x += v
        if x < lo:
            x = lo + (lo - x)
            v = -v
        elif x > hi:
            x = hi - (x - hi)
            v = -v
    return xs


def _render_clip(ident: SyntheticIdentity, cam: CameraSpec, steps: int,
                 h: int, w: int, rng: np.random.Generator,
                 with_occluder: bool) -> VideoClip:
    bg_rng = np.random.default_rng(cam.background_seed)
    background = bg_rng.uniform(0.1, 0.9, (h, w, 3)).astype(np.float32)
    shift = cam.color_shift.astype(np.float32)
    base = background + shift
    torso_color = (ident.torso_color + cam.color_shift).astype(np.float32)
    limb_color = (ident.limb_color + cam.color_shift).astype(np.float32)

    sprite_h = ident.torso_h + ident.limb_h
    y_top = (h - sprite_h) // 2
    x_lo, x_hi = 0.0, float(w - ident.torso_w)
    x_start = float(rng.uniform(x_lo, x_hi))
    direction = 1.0 if rng.random() < 0.5 else -1.0
    xs = _bounce_positions(x_start, direction * ident.speed, x_lo, x_hi, steps)
    torso_x = np.round(xs).astype(int)

    t_axis = np.arange(steps)
    swing = np.round(ident.swing_px
                     * np.sin(2.0 * np.pi * ident.gait_freq * t_axis + ident.gait_phase)
                     ).astype(int)
    bob = np.round(np.sin(2.0 * np.pi * ident.gait_freq * t_axis + ident.bob_phase)).astype(int)
    torso_y = y_top + bob
    limb_y = torso_y + ident.torso_h
    limb_a_x = torso_x + swing
    limb_b_x = torso_x + ident.torso_w - ident.limb_w - swing

    if with_occluder:
        occ_color = rng.uniform(0.1, 0.9, 3).astype(np.float32) + shift
        occ_w = max(3, round(float(rng.uniform(0.18, 0.35)) * w))
        occ_h = round(0.85 * h)
        occ_speed = -direction * float(rng.uniform(1.3, 2.2))
        occ_vy = float(rng.uniform(-0.4, 0.4))
        # start beyond one edge so the crossing happens inside the clip
        occ_x0 = float(w) if occ_speed < 0 else float(-occ_w)
        occ_xs = np.round(occ_x0 + occ_speed * t_axis).astype(int)
        occ_ys = np.round((h - occ_h) / 2.0 + occ_vy * t_axis).astype(int)
    frames = np.empty((steps, h, w, 3), dtype=np.float32)
    flow = np.zeros((steps, h, w, 2), dtype=np.float32)
    owner = np.empty((steps, h, w), dtype=np.uint8)

    for t in range(steps):
        fr = base.copy()
        ow = np.zeros((h, w), dtype=np.uint8)
        _paint(fr, ow, int(torso_y[t]), int(torso_x[t]), ident.torso_h, ident.torso_w,
               torso_color, OWNER_TORSO, h, w)
        _paint(fr, ow, int(limb_y[t]), int(limb_a_x[t]), ident.limb_h, ident.limb_w,
               limb_color, OWNER_LIMB_A, h, w)
        _paint(fr, ow, int(limb_y[t]), int(limb_b_x[t]), ident.limb_h, ident.limb_w,
               limb_color, OWNER_LIMB_B, h, w)
        if with_occluder:
            _paint(fr, ow, int(occ_ys[t]), int(occ_xs[t]), occ_h, occ_w,
                   occ_color, OWNER_OCCLUDER, h, w)
        frames[t] = fr
        owner[t] = ow
        if t > 0:
            dy = int(torso_y[t] - torso_y[t - 1])
            moves = {
                OWNER_TORSO: (int(torso_x[t] - torso_x[t - 1]), dy),
                OWNER_LIMB_A: (int(limb_a_x[t] - limb_a_x[t - 1]), dy),
                OWNER_LIMB_B: (int(limb_b_x[t] - limb_b_x[t - 1]), dy),
            }
            if with_occluder:
                moves[OWNER_OCCLUDER] = (int(occ_xs[t] - occ_xs[t - 1]),
                                         int(occ_ys[t] - occ_ys[t - 1]))
            for code, (du, dv) in moves.items():
                mask = ow == code
                flow[t, mask, 0] = du
                flow[t, mask, 1] = dv

    if cam.mirrored:
        frames = frames[:, :, ::-1, :].copy()
        owner = owner[:, :, ::-1].copy()
        flow = flow[:, :, ::-1, :].copy()
        flow[:, :, :, 0] *= -1.0
    return VideoClip(ident.ident, cam.camera, frames, flow, owner, with_occluder)


def generate_dataset(num_identities: int, clips_per_camera: int = 1,
                     frame_count_range: tuple[int, int] = (20, 60),
                     frame_hw: tuple[int, int] = (64, 32),
                     occluder_density: float = 0.0,
                     seed: int = 0) -> SyntheticDataset:
    """Render the full two-camera benchmark.

    Deterministic in ``seed``: every clip draws from its own seed stream
    derived from (seed, identity, camera, clip index), so the output is
    byte-identical across runs and insensitive to generation order.
    """
    if num_identities < 2:
        raise ValueError("need at least two identities")
    if clips_per_camera < 1:
        raise ValueError("clips_per_camera must be positive")
    lo, hi = frame_count_range
    if lo < 2 or hi < lo:
        raise ValueError(f"bad frame count range {frame_count_range}")
    if not 0.0 <= occluder_density <= 1.0:
        raise ValueError("occluder_density must lie in [0, 1]")
    h, w = frame_hw

    master = np.random.default_rng([seed, 0])
    identities = [_sample_identity(i, master, h, w) for i in range(num_identities)]
    cameras = []
    for cam_id in range(2):
        cameras.append(CameraSpec(
            camera=cam_id,
            background_seed=(seed, 1, cam_id),
            color_shift=master.uniform(-0.1, 0.1, 3),
            mirrored=cam_id == 1,
            occluder_density=occluder_density,
        ))

    clips = []
    for ident in identities:
        for cam in cameras:
            for v in range(clips_per_camera):
                crng = np.random.default_rng([seed, 2, ident.ident, cam.camera, v])
                steps = int(crng.integers(lo, hi + 1))
                with_occ = bool(crng.random() < occluder_density)
                clips.append(_render_clip(ident, cam, steps, h, w, crng, with_occ))
    return SyntheticDataset(clips, (h, w), seed, identities, cameras)


# ---------------------------------------------------------------------------
# clip transforms shared by training and evaluation

def crop_clip(clip: VideoClip, oy: int, ox: int, ch: int, cw: int) -> VideoClip:
    h, w = clip.frame_hw
    if not (0 <= oy and oy + ch <= h and 0 <= ox and ox + cw <= w):
        raise ValueError(f"crop {ch}x{cw} at ({oy}, {ox}) leaves the {h}x{w} frame")
    owner = clip.owner[:, oy:oy + ch, ox:ox + cw] if clip.owner is not None else None
    return VideoClip(clip.person_id, clip.camera_id,
                     clip.frames[:, oy:oy + ch, ox:ox + cw, :],
                     clip.flow[:, oy:oy + ch, ox:ox + cw, :],
                     owner, clip.has_occluder)


def flip_clip(clip: VideoClip) -> VideoClip:
    """Mirror horizontally; the u flow channel changes sign."""
    flow = clip.flow[:, :, ::-1, :].copy()
    flow[:, :, :, 0] *= -1.0
    owner = clip.owner[:, :, ::-1].copy() if clip.owner is not None else None
    return VideoClip(clip.person_id, clip.camera_id,
                     clip.frames[:, :, ::-1, :].copy(), flow, owner, clip.has_occluder)


def truncate_clip(clip: VideoClip, max_frames: int) -> VideoClip:
    if clip.num_frames <= max_frames:
        return clip
    owner = clip.owner[:max_frames] if clip.owner is not None else None
    return VideoClip(clip.person_id, clip.camera_id, clip.frames[:max_frames],
                     clip.flow[:max_frames], owner, clip.has_occluder)


def ground_truth_gate(clip: VideoClip) -> np.ndarray:
    """Boolean [T, H/2, W/2] person mask at gate resolution.

    A gate cell counts as person if any pixel of its 2x2 block belongs to a
    visible sprite part (occluder pixels are not the person).
    """
    if clip.owner is None:
        raise ValueError("clip carries no layer annotations")
    t, h, w = clip.owner.shape
    if h % 2 or w % 2:
        raise ValueError("gate mask needs even extents")
    person = (clip.owner >= OWNER_TORSO) & (clip.owner <= OWNER_LIMB_B)
    return person.reshape(t, h // 2, 2, w // 2, 2).any(axis=(2, 4))


def train_test_split(clips, fraction: float = 0.5, seed: int = 0):
    """Split identities (not clips) into disjoint train/test sets."""
    if isinstance(clips, SyntheticDataset):
        clips = clips.clips
    ids = sorted({c.person_id for c in clips})
    if len(ids) < 2:
        raise ValueError("need at least two identities to split")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ids)
    k = int(round(len(ids) * fraction))
    k = max(1, min(len(ids) - 1, k))
    train_ids = set(int(i) for i in perm[:k])
    train = [c for c in clips if c.person_id in train_ids]
    test = [c for c in clips if c.person_id not in train_ids]
    return train, test


# ---------------------------------------------------------------------------
# disk layout: one directory per clip, raw little-endian arrays + manifest

def _array_spec(name, arr):
    code = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8",
            np.dtype(np.uint8): "u1"}[arr.dtype]
    dims = " ".join(str(d) for d in arr.shape)
    return f"array = {name} {code} {dims}"


def _write_array(path, arr):
    dt = arr.dtype.newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _read_array(path, code, shape):
    with open(path, "rb") as fh:
        raw = fh.read()
    arr = np.frombuffer(raw, dtype=np.dtype(code).newbyteorder("<")).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("="))


def clip_dir_name(person_id: int, camera_id: int, variant: int = 0) -> str:
    name = f"id{person_id:04d}_cam{camera_id}"
    return name if variant == 0 else f"{name}_v{variant}"


def save_dataset(dataset: SyntheticDataset, root: str) -> None:
    os.makedirs(root, exist_ok=True)
    h, w = dataset.frame_hw
    with open(os.path.join(root, _MANIFEST_NAME), "w") as fh:
        fh.write(f"format = {_DATASET_MAGIC}\n")
        fh.write(f"seed = {dataset.seed}\n")
        fh.write(f"height = {h}\n")
        fh.write(f"width = {w}\n")
        fh.write(f"clips = {len(dataset.clips)}\n")
    counters: dict[tuple, int] = {}
    for clip in dataset.clips:
        key = (clip.person_id, clip.camera_id)
        variant = counters.get(key, 0)
        counters[key] = variant + 1
        cdir = os.path.join(root, clip_dir_name(clip.person_id, clip.camera_id, variant))
        os.makedirs(cdir, exist_ok=True)
        lines = [
            f"format = {_CLIP_MAGIC}",
            f"identity = {clip.person_id}",
            f"camera = {clip.camera_id}",
            f"frames = {clip.num_frames}",
            f"height = {clip.frames.shape[1]}",
            f"width = {clip.frames.shape[2]}",
            f"has_occluder = {str(clip.has_occluder).lower()}",
            _array_spec("frames", clip.frames),
            _array_spec("flow", clip.flow),
        ]
        _write_array(os.path.join(cdir, "frames.bin"), clip.frames)
        _write_array(os.path.join(cdir, "flow.bin"), clip.flow)
        if clip.owner is not None:
            lines.append(_array_spec("owner", clip.owner))
            _write_array(os.path.join(cdir, "owner.bin"), clip.owner)
        with open(os.path.join(cdir, _MANIFEST_NAME), "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _parse_manifest(path):
    pairs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            pairs.append((key.strip(), value.strip()))
    return pairs


def load_clip(cdir: str) -> VideoClip:
    """Read one clip directory written by save_dataset."""
    mpath = os.path.join(cdir, _MANIFEST_NAME)
    if not os.path.isfile(mpath):
        raise FileNotFoundError(f"no clip manifest under {cdir!r}")
    pairs = _parse_manifest(mpath)
    fields_ = {k: v for k, v in pairs if k != "array"}
    if fields_.get("format") != _CLIP_MAGIC:
        raise ValueError(f"{mpath} is not a clip manifest")
    arrays = {}
    for k, v in pairs:
        if k != "array":
            continue
        parts = v.split()
        name, code = parts[0], parts[1]
        shape = tuple(int(d) for d in parts[2:])
        arrays[name] = _read_array(os.path.join(cdir, f"{name}.bin"), code, shape)
    return VideoClip(
        person_id=int(fields_["identity"]),
        camera_id=int(fields_["camera"]),
        frames=arrays["frames"],
        flow=arrays["flow"],
        owner=arrays.get("owner"),
        has_occluder=fields_.get("has_occluder") == "true",
    )


def load_dataset(root: str) -> SyntheticDataset:
    top = os.path.join(root, _MANIFEST_NAME)
    if not os.path.isfile(top):
        raise FileNotFoundError(f"no dataset manifest under {root!r}")
    meta = dict(_parse_manifest(top))
    if meta.get("format") != _DATASET_MAGIC:
        raise ValueError(f"{top} is not a dataset manifest")
    clips = []
    for entry in sorted(os.listdir(root)):
        cdir = os.path.join(root, entry)
        if os.path.isdir(cdir) and os.path.isfile(os.path.join(cdir, _MANIFEST_NAME)):
            clips.append(load_clip(cdir))
    if not clips:
        raise ValueError(f"dataset under {root!r} contains no clips")
    return SyntheticDataset(clips, (int(meta["height"]), int(meta["width"])),
                            int(meta["seed"]))
