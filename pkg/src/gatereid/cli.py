"""Command line front end: generate / train / eval / visualize-gates / gradcheck.

Configuration is a flat key = value text file; any key can be overridden on
the command line with --set, and the output directory and thread count also
honor the GATEREID_OUT_DIR and GATEREID_THREADS environment variables.  The
fully resolved configuration is echoed into the output directory before any
long-running work starts, and suffices to reproduce the run.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tensor_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import CMCCurve, compute_cmc
from .network import NetworkConfig, frame_forward, gate_bounds, initial_state
from .synth import (
    crop_clip,
    generate_dataset,
    ground_truth_gate,
    load_clip,
    load_dataset,
    save_dataset,
    train_test_split,
)
from .tensor import NonFiniteError, Tensor, no_recording
from .training import ChannelStats, TrainConfig, TrainingDiverged, TrainResult, normalize_clip, train
from .verify import DEFAULT_TOLERANCE, run_verification


class ConfigError(ValueError):
    """Bad configuration file, key, value, or command usage."""


@dataclass
class RunConfig:
    """Everything a run needs beyond the two model/training configs."""

    num_identities: int = 8
    clips_per_camera: int = 1
    min_frames: int = 20
    max_frames: int = 60
    occluder_density: float = 0.0
    dataset_seed: int = 0
    train_fraction: float = 0.5
    split_seed: int = 0
    repeats: int = 1
    max_test_frames: int = 128
    threads: int = 1
    precision: str = "float32"
    out_dir: str = "gatereid_run"
    data_dir: str = ""  # empty: <out_dir>/dataset

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ConfigError("num_identities must be at least 2")
        if not 2 <= self.min_frames <= self.max_frames:
            raise ConfigError("need 2 <= min_frames <= max_frames")
        if not 0.0 <= self.occluder_density <= 1.0:
            raise ConfigError("occluder_density must lie in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")
        if self.repeats < 1 or self.threads < 1 or self.max_test_frames < 1:
            raise ConfigError("repeats, threads and max_test_frames must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def resolved_data_dir(self) -> str:
        return self.data_dir or os.path.join(self.out_dir, "dataset")


_RUN_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_NET_FIELDS = {f.name for f in fields(NetworkConfig)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
assert not (_RUN_FIELDS.keys() & _NET_FIELDS), "key spaces must stay disjoint"
assert not (_RUN_FIELDS.keys() & _TRAIN_FIELDS), "key spaces must stay disjoint"
assert not (_NET_FIELDS & _TRAIN_FIELDS), "key spaces must stay disjoint"


@dataclass
class ResolvedConfig:
    run: RunConfig
    network: NetworkConfig
    training: TrainConfig

    def lines(self) -> list[str]:
        out = []
        for section in (self.run, self.network, self.training):
            for f in fields(section):
                out.append(f"{f.name} = {getattr(section, f.name)}")
        return out


def _coerce(key: str, value: str, current):
    kind = type(current)
    try:
        if kind is bool:
            if value not in ("true", "false", "True", "False"):
                raise ValueError
            return value in ("true", "True")
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {value!r} as {kind.__name__}") from None


def _read_config_file(path: str) -> dict[str, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path!r} does not exist")
    pairs: dict[str, str] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise ConfigError(f"{path}:{ln}: expected key = value, got {line!r}")
            pairs[key.strip()] = value.strip()
    return pairs


def resolve_config(config_path: str | None, overrides: list[str],
                   env: dict | None = None) -> ResolvedConfig:
    """Defaults < config file < environment < --set overrides."""
    env = os.environ if env is None else env
    resolved = ResolvedConfig(RunConfig(), NetworkConfig(), TrainConfig())

    pairs: list[tuple[str, str]] = []
    if config_path is not None:
        pairs += _read_config_file(config_path).items()
    if env.get("GATEREID_OUT_DIR"):
        pairs.append(("out_dir", env["GATEREID_OUT_DIR"]))
    if env.get("GATEREID_THREADS"):
        pairs.append(("threads", env["GATEREID_THREADS"]))
    for item in overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set wants key=value, got {item!r}")
        pairs.append((key.strip(), value.strip()))

    for key, value in pairs:
        if key in _RUN_FIELDS:
            section = resolved.run
        elif key in _NET_FIELDS:
            section = resolved.network
        elif key in _TRAIN_FIELDS:
            section = resolved.training
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
        setattr(section, key, _coerce(key, value, getattr(section, key)))

    resolved.run.validate()
    try:
        resolved.network.validate()
        resolved.training.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return resolved


def _echo_config(cfg: ResolvedConfig, command: str) -> None:
    os.makedirs(cfg.run.out_dir, exist_ok=True)
    path = os.path.join(cfg.run.out_dir, "resolved_config.txt")
    with open(path, "w") as fh:
        fh.write(f"command = {command}\n")
        fh.write("\n".join(cfg.lines()) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(cfg: ResolvedConfig) -> int:
    _echo_config(cfg, "generate")
    run = cfg.run
    dataset = generate_dataset(
        num_identities=run.num_identities,
        clips_per_camera=run.clips_per_camera,
        frame_count_range=(run.min_frames, run.max_frames),
        frame_hw=(cfg.network.height, cfg.network.width),
        occluder_density=run.occluder_density,
        seed=run.dataset_seed,
    )
    out = run.resolved_data_dir()
    save_dataset(dataset, out)
    print(f"wrote {len(dataset.clips)} clips to {out}")
    return 0


def _load_split(cfg: ResolvedConfig, seed: int | None = None):
    dataset = load_dataset(cfg.run.resolved_data_dir())
    split_seed = cfg.run.split_seed if seed is None else seed
    return train_test_split(dataset.clips, cfg.run.train_fraction, split_seed)


def cmd_train(cfg: ResolvedConfig, resume_path: str | None) -> int:
    _echo_config(cfg, "train")
    train_clips, _ = _load_split(cfg)

    resume = None
    stats = None
    if resume_path is not None:
        bundle = load_checkpoint(resume_path)
        if bundle.config != cfg.network:
            raise ConfigError("checkpoint architecture disagrees with the configuration")
        if bundle.adam is None or bundle.stats is None or bundle.classifier is None:
            raise ConfigError("checkpoint lacks optimizer state; cannot resume")
        stats = bundle.stats
        resume = TrainResult(bundle.params, bundle.classifier, bundle.adam,
                             bundle.stats, [], bundle.epoch, {})

    log_path = os.path.join(cfg.run.out_dir, "training_log.tsv")
    result = train(train_clips, cfg.network, cfg.training, dtype=cfg.run.dtype,
                   stats=stats, resume=resume, log_path=log_path)
    ckpt_dir = os.path.join(cfg.run.out_dir, "checkpoint")
    save_checkpoint(ckpt_dir, result.params, result.classifier, result.adam,
                    result.stats, epoch=result.epochs_run)
    last = result.records[-1] if result.records else None
    if last is not None:
        print(f"trained {result.epochs_run} epochs; final total loss {last.total:.6g}, "
              f"identification accuracy {last.id_accuracy:.3f}")
    print(f"checkpoint at {ckpt_dir}")
    return 0


def cmd_eval(cfg: ResolvedConfig, checkpoint_path: str) -> int:
    _echo_config(cfg, "eval")
    bundle = load_checkpoint(checkpoint_path)
    if bundle.stats is None:
        raise ConfigError("checkpoint lacks channel statistics; evaluate needs them")
    curves = []
    for r in range(cfg.run.repeats):
        _, test_clips = _load_split(cfg, seed=cfg.run.split_seed + r)
        curves.append(compute_cmc(test_clips, bundle.params, bundle.config,
                                  bundle.stats, max_frames=cfg.run.max_test_frames,
                                  threads=cfg.run.threads))
    mean = CMCCurve(np.mean([c.percentages for c in curves], axis=0))
    table = mean.as_table()
    with open(os.path.join(cfg.run.out_dir, "cmc.txt"), "w") as fh:
        fh.write(table)
    sys.stdout.write(table)
    return 0


def _write_pgm(path: str, values: np.ndarray, lo: float, hi: float) -> None:
    """Binary grayscale raster; values mapped linearly from [lo, hi] to 0..255."""
    scaled = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
    px = np.rint(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (px.shape[1], px.shape[0]))
        fh.write(px.tobytes())


def cmd_visualize_gates(cfg: ResolvedConfig, checkpoint_path: str, clip_path: str) -> int:
    _echo_config(cfg, "visualize-gates")
    bundle = load_checkpoint(checkpoint_path)
    clip = load_clip(clip_path)
    net = bundle.config

    ch, cw = bundle.params.input_hw
    h, w = clip.frame_hw
    if h < ch or w < cw:
        raise ConfigError(f"clip frames {h}x{w} smaller than network input {ch}x{cw}")
    cropped = crop_clip(clip, (h - ch) // 2, (w - cw) // 2, ch, cw)
    stats = bundle.stats if bundle.stats is not None else ChannelStats(
        np.zeros(5), np.ones(5))
    work = normalize_clip(cropped, stats)

    truth = ground_truth_gate(cropped) if cropped.owner is not None else None
    out_dir = cfg.run.out_dir
    sidecar = [f"checkpoint = {checkpoint_path}", f"clip = {clip_path}",
               f"frames = {cropped.num_frames}",
               f"normalized = {bundle.stats is not None}"]
    overlaps = []
    images = 0
    dtype = bundle.params.dtype
    state = initial_state(net, dtype)
    with no_recording():
        for t in range(cropped.num_frames):
            frame = Tensor(work.frames[t].astype(dtype, copy=False))
            flow = Tensor(work.flow[t].astype(dtype, copy=False))
            _, state, gates = frame_forward(frame, flow, state, bundle.params, net)
            luma = cropped.frames[t] @ np.array([0.299, 0.587, 0.114])
            _write_pgm(os.path.join(out_dir, f"frame{t:03d}_input.pgm"), luma, 0.0, 1.0)
            images += 1
            for kind in ("color", "flow", "fused"):
                if kind not in gates:
                    continue
                lo, hi = gate_bounds(kind, net.fusion_mode)
                _write_pgm(os.path.join(out_dir, f"frame{t:03d}_gate_{kind}.pgm"),
                           gates[kind].values.data[:, :, 0], lo, hi)
                images += 1
                sidecar.append(f"range_{kind} = {lo} {hi}")
            if truth is not None:
                g = gates["fused"].values.data[:, :, 0].astype(np.float64)
                total = g.sum()
                overlap = float((g * truth[t]).sum() / total) if total > 0 else 0.0
                overlaps.append(overlap)
                sidecar.append(f"overlap_frame_{t:03d} = {overlap:.6f}")
    if overlaps:
        sidecar.append(f"overlap_mean = {float(np.mean(overlaps)):.6f}")
        print(f"mean gate/person overlap: {np.mean(overlaps):.4f}")
    with open(os.path.join(out_dir, "gate_images.txt"), "w") as fh:
        fh.write("\n".join(dict.fromkeys(sidecar)) + "\n")
    print(f"wrote {images} images to {out_dir}")
    return 0


def cmd_gradcheck(cfg: ResolvedConfig, seed: int, epsilon: float, tolerance: float,
                  inject: str | None) -> int:
    _echo_config(cfg, "gradcheck")
    if inject is not None:
        op, _, scale = inject.partition(":")
        if not scale:
            raise ConfigError("--inject-adjoint-error wants op:scale")
        tensor_mod._ADJOINT_CORRUPTION = {"op": op, "scale": float(scale)}
    try:
        rows, worst, passed = run_verification(seed=seed, epsilon=epsilon,
                                               tolerance=tolerance)
    finally:
        tensor_mod._ADJOINT_CORRUPTION = None
    width = max(len(label) for label, _ in rows)
    for label, err in rows:
        print(f"{label:<{width}}  {err:.3e}")
    print(f"worst = {worst:.3e}  tolerance = {tolerance:.1e}  "
          f"status = {'pass' if passed else 'FAIL'}")
    return 0 if passed else 2


# ---------------------------------------------------------------------------
# argument plumbing

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with status 2
        raise ConfigError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gatereid",
                     description="Gated two-stream recurrent video features "
                                 "for cross-camera person matching.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic two-camera dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train on the training split of a dataset")
    _add_common(p)
    p.add_argument("--resume", metavar="CHECKPOINT",
                   help="continue from a checkpoint directory")

    p = sub.add_parser("eval", help="report the cross-camera match curve")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--repeats", type=int, help="average over this many split seeds")

    p = sub.add_parser("visualize-gates", help="write per-frame gate images")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="one clip directory")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--inject-adjoint-error", metavar="OP:SCALE",
                   help="corrupt one operator's adjoints (negative control)")

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = list(args.set)
        if getattr(args, "repeats", None) is not None:
            overrides.append(f"repeats={args.repeats}")
        cfg = resolve_config(args.config, overrides)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "visualize-gates":
            return cmd_visualize_gates(cfg, args.checkpoint, args.clip)
        return cmd_gradcheck(cfg, args.seed, args.epsilon, args.tolerance,
                             args.inject_adjoint_error)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, NonFiniteError, OSError, ValueError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
