"""Two-stream gated convolutional-recurrent feature extractor.

Each frame enters as a color cube [H, W, 3] plus a backward optical-flow cube
[H, W, 2].  Both streams pass a conv/pool/tanh stage, a sigmoid gate map is
computed per stream (conditioned on the previous recurrent state), the two
maps are fused, and the fused gate multiplies both activation cubes before
two more conv/pool/tanh stages.  A single recurrent layer mixes the flattened
cube with the previous state; the per-frame feature is the pre-tanh recurrent
output and a clip feature is the mean over frames.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add_broadcast_vector,
    concat_channels,
    concat_vec,
    conv2d_same,
    dense,
    elementwise_max,
    flatten,
    maxpool_2x2,
    mul,
    mul_broadcast_gate,
    sigmoid_act,
    stop_gradient,
    sub,
    tanh_act,
)
from .tensor import add as t_add
from .tensor import mean_stack

FUSION_MODES = ("f1", "f2", "f3", "f4")
GATE_MODES = ("fused", "color_only", "flow_only", "concat_single", "none")
FEATURE_SOURCES = ("rnn_output", "rnn_state")

# which gate branches exist per gate mode; "cat" sees both streams concatenated
_BRANCHES = {
    "fused": ("color", "flow"),
    "color_only": ("color",),
    "flow_only": ("flow",),
    "concat_single": ("cat",),
    "none": (),
}


@dataclass
class NetworkConfig:
    """Architecture hyperparameters.

    ``height``/``width`` describe the full generated frame; the tensors
    actually fed to the network (training and evaluation crops) may be
    smaller, see ``init_network_params``.
    """

    height: int = 64
    width: int = 32
    color_channels: int = 3
    flow_channels: int = 2
    conv1_out: int = 12
    conv1_of_out: int = 12
    gate_hidden: int = 32
    state_dim: int = 128
    conv2_out: int = 24
    conv3_out: int = 32
    kernel_size: int = 5
    fusion_mode: str = "f4"
    gate_mode: str = "fused"
    use_prev_state: bool = True
    feature_dim: int = 128
    feature_source: str = "rnn_output"

    def validate(self) -> None:
        if self.height % 8 or self.width % 8:
            raise ValueError(f"frame extents must be divisible by 8, got {self.height}x{self.width}")
        if self.state_dim != self.feature_dim:
            raise ValueError("state_dim and feature_dim must match (the state feeds the feature)")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.feature_source not in FEATURE_SOURCES:
            raise ValueError(f"feature_source must be one of {FEATURE_SOURCES}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        for name in ("color_channels", "flow_channels", "conv1_out", "conv1_of_out",
                     "gate_hidden", "state_dim", "conv2_out", "conv3_out", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _ceil_half(v: int) -> int:
    return (v + 1) // 2


def conv3_flat_size(config: NetworkConfig, input_hw: tuple[int, int]) -> int:
    """Length of the flattened third-stage cube for a given input geometry."""
    h, w = input_hw
    for _ in range(3):
        h, w = _ceil_half(h), _ceil_half(w)
    return h * w * config.conv3_out


def gate_grid(input_hw: tuple[int, int]) -> tuple[int, int]:
    """Spatial extents of the gate maps (after the first pooling stage)."""
    return _ceil_half(input_hw[0]), _ceil_half(input_hw[1])


@dataclass
class GateMap:
    """One [h, w, 1] gating map with values in a bounded range.

    ``kind`` is "color" or "flow" for raw sigmoid maps and "fused" for the
    map that actually multiplies the activation cubes.
    """

    values: Tensor
    kind: str


@dataclass
class HiddenState:
    """Recurrent state carried between frames."""

    h: Tensor


def initial_state(config: NetworkConfig, dtype=np.float32) -> HiddenState:
    return HiddenState(Tensor(np.zeros(config.state_dim, dtype=dtype)))


class NetworkParams:
    """Named learnable tensors, sized for one network-input geometry.

    ``input_hw`` is the spatial extent of the cubes fed to ``frame_forward``;
    with the standard protocol that is the crop size, not the full frame.
    """

    def __init__(self, config: NetworkConfig, input_hw: tuple[int, int], tensors: dict):
        self.config = config
        self.input_hw = (int(input_hw[0]), int(input_hw[1]))
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def num_values(self) -> int:
        return sum(t.size for t in self.tensors.values())


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_network_params(config: NetworkConfig, input_hw=None,
                        rng: np.random.Generator | None = None,
                        dtype=np.float32) -> NetworkParams:
    """Create freshly initialized parameters (uniform Glorot, zero biases).

    ``input_hw`` defaults to the full frame extents; pass the crop extents
    when the training protocol feeds crops.
    """
    config.validate()
    if input_hw is None:
        input_hw = (config.height, config.width)
    h, w = input_hw
    if h < 1 or w < 1 or h > config.height or w > config.width:
        raise ValueError(f"input extents {input_hw} must fit inside the frame")
    if rng is None:
        rng = np.random.default_rng(0)
    k = config.kernel_size
    dt = np.dtype(dtype)
    tensors: dict[str, Tensor] = {}

    def conv_pair(name, cin, cout):
        fan_in = k * k * cin
        fan_out = k * k * cout
        tensors[f"{name}_kernel"] = _glorot(rng, (k, k, cin, cout), fan_in, fan_out, dt)
        tensors[f"{name}_bias"] = _zeros(cout, dt)

    conv_pair("conv1", config.color_channels, config.conv1_out)
    conv_pair("conv1_of", config.flow_channels, config.conv1_of_out)

    branch_cin = {
        "color": config.conv1_out,
        "flow": config.conv1_of_out,
        "cat": config.conv1_out + config.conv1_of_out,
    }
    for branch in _BRANCHES[config.gate_mode]:
        conv_pair(f"gate1_{branch}", branch_cin[branch], config.gate_hidden)
        if config.use_prev_state:
            tensors[f"gate1_{branch}_state_weight"] = _glorot(
                rng, (config.gate_hidden, config.state_dim),
                config.state_dim, config.gate_hidden, dt)
            tensors[f"gate1_{branch}_state_bias"] = _zeros(config.gate_hidden, dt)
        conv_pair(f"gate2_{branch}", config.gate_hidden, 1)

    conv_pair("conv2", config.conv1_out + config.conv1_of_out, config.conv2_out)
    conv_pair("conv3", config.conv2_out, config.conv3_out)

    flat = conv3_flat_size(config, input_hw)
    joint = flat + config.state_dim
    tensors["rnn_weight"] = _glorot(rng, (config.state_dim, joint), joint, config.state_dim, dt)
    tensors["rnn_bias"] = _zeros(config.state_dim, dt)
    return NetworkParams(config, input_hw, tensors)


def shared_conv(stream: str, input: Tensor, params: NetworkParams) -> Tensor:
    """First stage of one stream: same conv, 2x2 max pool, tanh."""
    if stream == "color":
        k, b = params["conv1_kernel"], params["conv1_bias"]
    elif stream == "flow":
        k, b = params["conv1_of_kernel"], params["conv1_of_bias"]
    else:
        raise ValueError(f"unknown stream {stream!r}")
    return tanh_act(maxpool_2x2(conv2d_same(input, k, b)))


def compute_gate(stream_cube: Tensor, prev_state: HiddenState, branch: str,
                 params: NetworkParams, use_prev_state: bool) -> GateMap:
    """Sigmoid gate map for one stream.

    A gate-conv over the cube plus (optionally) a broadcast projection of the
    previous recurrent state, then tanh, then a 1-channel conv and sigmoid.
    """
    z = conv2d_same(stream_cube, params[f"gate1_{branch}_kernel"], params[f"gate1_{branch}_bias"])
    if use_prev_state:
        proj = dense(prev_state.h,
                     params[f"gate1_{branch}_state_weight"],
                     params[f"gate1_{branch}_state_bias"])
        z = add_broadcast_vector(z, proj)
    g = sigmoid_act(conv2d_same(tanh_act(z),
                                params[f"gate2_{branch}_kernel"],
                                params[f"gate2_{branch}_bias"]))
    kind = branch if branch in ("color", "flow") else "fused"
    return GateMap(g, kind)


def fuse_gates(gate_color: GateMap, gate_flow: GateMap, mode: str) -> GateMap:
    """Combine the two stream gates into the map that multiplies the cubes.

    f1: sum (range [0, 2]).
    f2: elementwise max.
    f3: sum minus product (probabilistic-or, range [0, 1]).
    f4: like f3, but the product term is held constant during backprop, so
        each raw gate sees a pass-through adjoint.
    """
    a, b = gate_color.values, gate_flow.values
    if mode == "f1":
        v = t_add(a, b)
    elif mode == "f2":
        v = elementwise_max(a, b)
    elif mode == "f3":
        v = sub(t_add(a, b), mul(a, b))
    elif mode == "f4":
        v = sub(t_add(a, b), stop_gradient(mul(a, b)))
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return GateMap(v, "fused")


def gate_bounds(kind: str, fusion_mode: str) -> tuple[float, float]:
    """Valid closed value range for a gate map."""
    if kind == "fused" and fusion_mode == "f1":
        return 0.0, 2.0
    return 0.0, 1.0


def _check_gates(gates: dict, config: NetworkConfig) -> None:
    for gmap in gates.values():
        lo, hi = gate_bounds(gmap.kind, config.fusion_mode)
        v = gmap.values.data
        if not (v.min() >= lo and v.max() <= hi):  # also trips on NaN
            raise NonFiniteError(
                f"{gmap.kind} gate left [{lo}, {hi}]: min {v.min()}, max {v.max()}")


def frame_forward(frame: Tensor, flow: Tensor, prev: HiddenState,
                  params: NetworkParams, config: NetworkConfig,
                  forced_gate: GateMap | None = None):
    """One time step.

    Returns ``(feature, next_state, gates)`` where ``gates`` maps "color",
    "flow", "fused" to the available :class:`GateMap` objects ("fused" is
    always the map that was applied, whatever branch produced it).
    ``forced_gate`` substitutes an externally supplied map for the computed
    one; diagnostics use it to replay a clip under a ground-truth gate.
    """
    if frame.shape[:2] != params.input_hw or flow.shape[:2] != params.input_hw:
        raise ShapeError(
            f"network was sized for {params.input_hw} inputs, "
            f"got frame {frame.shape} / flow {flow.shape}")
    ccube = shared_conv("color", frame, params)
    fcube = shared_conv("flow", flow, params)
    mode = config.gate_mode

    gates: dict[str, GateMap] = {}
    if forced_gate is not None:
        applied = GateMap(forced_gate.values, "fused")
        gates["fused"] = applied
    elif mode == "none":
        applied = None
    elif mode == "fused":
        gc = compute_gate(ccube, prev, "color", params, config.use_prev_state)
        gf = compute_gate(fcube, prev, "flow", params, config.use_prev_state)
        fused = fuse_gates(gc, gf, config.fusion_mode)
        gates = {"color": gc, "flow": gf, "fused": fused}
        applied = fused
    elif mode == "color_only":
        gc = compute_gate(ccube, prev, "color", params, config.use_prev_state)
        gates = {"color": gc, "fused": gc}
        applied = gc
    elif mode == "flow_only":
        gf = compute_gate(fcube, prev, "flow", params, config.use_prev_state)
        gates = {"flow": gf, "fused": gf}
        applied = gf
    elif mode == "concat_single":
        g = compute_gate(concat_channels(ccube, fcube), prev, "cat", params,
                         config.use_prev_state)
        gates = {"fused": g}
        applied = g
    else:
        raise ValueError(f"unknown gate mode {mode!r}")

    both = concat_channels(ccube, fcube)
    if applied is None:
        x = both
    else:
        if forced_gate is None:
            _check_gates(gates, config)
        x = mul_broadcast_gate(applied.values, both)

    x = tanh_act(maxpool_2x2(conv2d_same(x, params["conv2_kernel"], params["conv2_bias"])))
    x = tanh_act(maxpool_2x2(conv2d_same(x, params["conv3_kernel"], params["conv3_bias"])))
    joint = concat_vec(flatten(x), prev.h)
    o = dense(joint, params["rnn_weight"], params["rnn_bias"])
    if not np.isfinite(o.data).all():
        raise NonFiniteError("non-finite recurrent output")
    nxt = HiddenState(tanh_act(o))
    feature = nxt.h if config.feature_source == "rnn_state" else o
    return feature, nxt, gates


def sequence_forward(clip, params: NetworkParams, config: NetworkConfig,
                     forced_gates=None):
    """Run a whole clip and mean-pool the per-frame features.

    ``clip`` needs ``frames`` [T, H, W, 3] and ``flow`` [T, H, W, 2] arrays.
    Returns ``(clip_feature, per_frame_gates)``; a single-frame clip yields
    its frame feature unchanged.
    """
    frames = np.asarray(clip.frames)
    flows = np.asarray(clip.flow)
    if frames.ndim != 4 or flows.ndim != 4 or frames.shape[0] != flows.shape[0]:
        raise ShapeError(f"clip arrays disagree: {frames.shape} vs {flows.shape}")
    steps = frames.shape[0]
    if steps == 0:
        raise ShapeError("empty clip")
    if forced_gates is not None and len(forced_gates) != steps:
        raise ShapeError("forced_gates must supply one map per frame")
    dt = params.dtype
    state = initial_state(config, dt)
    feats = []
    all_gates = []
    for t in range(steps):
        f = Tensor(np.ascontiguousarray(frames[t], dtype=dt))
        fl = Tensor(np.ascontiguousarray(flows[t], dtype=dt))
        forced = forced_gates[t] if forced_gates is not None else None
        feat, state, gates = frame_forward(f, fl, state, params, config, forced_gate=forced)
        feats.append(feat)
        all_gates.append(gates)
    return mean_stack(feats), all_gates
