"""Gradient verification against central differences.

Two layers of checking: every differentiable op in isolation on small random
float64 inputs, and one end-to-end pass through the full pair objective with
every parameter treated as an input.  Both report the worst hybrid
absolute/relative error, so a clean run prints numbers near machine epsilon
for the step size (about 1e-10 for eps = 1e-5)."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import tensor as T
from .losses import ClassifierParams, total_loss, gate_regularizer, verification_loss
from .network import NetworkConfig, init_network_params, sequence_forward
from .synth import VideoClip
from .tensor import Tensor, grad_check

DEFAULT_TOLERANCE = 1e-4


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def op_checks(seed: int = 0, epsilon: float = 1e-5) -> list[tuple[str, float]]:
    """Worst finite-difference error per op, as ``(label, error)`` pairs.

    Inputs avoid non-differentiable points: relu and hinge corners are kept
    away from zero, max inputs are separated, sqrt inputs stay positive.
    """
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, float]] = []

    x = _t(rng, 5, 4, 3)
    k = _t(rng, 3, 3, 3, 4)
    b = _t(rng, 4)
    checks.append(("conv2d_same", grad_check(
        lambda x, k, b: T.mean_all(T.conv2d_same(x, k, b)), [x, k, b], epsilon)))

    x = _t(rng, 5, 4, 3)
    checks.append(("maxpool_2x2", grad_check(
        lambda x: T.mean_all(T.maxpool_2x2(x)), [x], epsilon)))

    x, w, b = _t(rng, 6), _t(rng, 4, 6), _t(rng, 4)
    checks.append(("dense", grad_check(
        lambda x, w, b: T.mean_all(T.dense(x, w, b)), [x, w, b], epsilon)))

    w, x = _t(rng, 4, 6), _t(rng, 6)
    checks.append(("matvec", grad_check(
        lambda w, x: T.mean_all(T.matvec(w, x)), [w, x], epsilon)))

    c, v = _t(rng, 4, 3, 5), _t(rng, 5)
    checks.append(("add_broadcast_vector", grad_check(
        lambda c, v: T.mean_all(T.add_broadcast_vector(c, v)), [c, v], epsilon)))

    g, c = _t(rng, 4, 3, 1, lo=0.1, hi=0.9), _t(rng, 4, 3, 5)
    checks.append(("mul_broadcast_gate", grad_check(
        lambda g, c: T.mean_all(T.mul_broadcast_gate(g, c)), [g, c], epsilon)))

    a, b2 = _t(rng, 4, 3, 2), _t(rng, 4, 3, 5)
    checks.append(("concat_channels", grad_check(
        lambda a, b: T.mean_all(T.concat_channels(a, b)), [a, b2], epsilon)))

    a, b2 = _t(rng, 5), _t(rng, 3)
    checks.append(("concat_vec", grad_check(
        lambda a, b: T.mean_all(T.concat_vec(a, b)), [a, b2], epsilon)))

    x = _t(rng, 3, 2, 4)
    checks.append(("flatten", grad_check(
        lambda x: T.mean_all(T.flatten(x)), [x], epsilon)))

    for label, fn in (("tanh", T.tanh_act), ("sigmoid", T.sigmoid_act)):
        x = _t(rng, 4, 5, lo=-3.0, hi=3.0)
        checks.append((label, grad_check(
            lambda x, fn=fn: T.mean_all(fn(x)), [x], epsilon)))

    x = Tensor(rng.uniform(0.3, 2.0, (4, 5)) * rng.choice([-1.0, 1.0], (4, 5)),
               requires_grad=True)
    checks.append(("relu", grad_check(
        lambda x: T.mean_all(T.relu(x)), [x], epsilon)))

    x = _t(rng, 1, lo=0.5, hi=2.0)
    checks.append(("sqrt", grad_check(lambda x: T.sqrt(x), [x], epsilon)))

    a = _t(rng, 4, 5)
    b2 = Tensor(a.data + rng.choice([-1.0, 1.0], (4, 5)) * rng.uniform(0.2, 1.0, (4, 5)),
                requires_grad=True)
    checks.append(("elementwise_max", grad_check(
        lambda a, b: T.mean_all(T.elementwise_max(a, b)), [a, b2], epsilon)))

    xs = [_t(rng, 6) for _ in range(3)]
    checks.append(("mean_stack", grad_check(
        lambda *xs: T.mean_all(T.mean_stack(list(xs))), xs, epsilon)))

    x = _t(rng, 7, lo=-2.0, hi=2.0)
    checks.append(("softmax_nll", grad_check(
        lambda x: T.softmax_nll(x, 3), [x], epsilon)))

    # gradient-stopped product: forward keeps the product term, backward must
    # see only the two pass-through paths.  freeze_stops pins the product
    # during probing so the differences measure the same partial function.
    a, b2 = _t(rng, 4, 3, lo=0.1, hi=0.9), _t(rng, 4, 3, lo=0.1, hi=0.9)
    checks.append(("sum_minus_stopped_product", grad_check(
        lambda a, b: T.mean_all(T.sub(T.add(a, b), T.stop_gradient(T.mul(a, b)))),
        [a, b2], epsilon, freeze_stops=True)))

    g = _t(rng, 4, 3, lo=0.05, hi=0.45)  # active region of the hinge
    checks.append(("gate_regularizer", grad_check(
        lambda g: gate_regularizer(g), [g], epsilon)))

    fa, fb = _t(rng, 8), _t(rng, 8)
    checks.append(("verification_same", grad_check(
        lambda a, b: verification_loss(a, b, True), [fa, fb], epsilon)))
    fa = _t(rng, 8, lo=0.0, hi=0.2)
    fb = Tensor(fa.data + 0.1, requires_grad=True)  # inside the margin
    checks.append(("verification_diff", grad_check(
        lambda a, b: verification_loss(a, b, False), [fa, fb], epsilon)))
    return checks


def _tiny_config() -> NetworkConfig:
    return NetworkConfig(height=16, width=8, conv1_out=2, conv1_of_out=2,
                         gate_hidden=4, state_dim=8, feature_dim=8,
                         conv2_out=3, conv3_out=4, kernel_size=3)


def _random_clip(rng, config: NetworkConfig, person_id: int, camera_id: int,
                 frames: int = 2) -> VideoClip:
    h, w = config.height, config.width
    clip_frames = rng.uniform(0, 1, (frames, h, w, 3)).astype(np.float64)
    flow = rng.uniform(-1, 1, (frames, h, w, 2)).astype(np.float64)
    flow[0] = 0.0
    return VideoClip(person_id, camera_id, clip_frames, flow)


def end_to_end_check(seed: int = 0, epsilon: float = 1e-5,
                     config: NetworkConfig | None = None,
                     frames: int = 2) -> float:
    """Worst error over every network and classifier parameter for the full
    pair objective (two identification terms, verification, two gate terms).

    Stop-gradient values are frozen during probing, so the check is exact for
    the gradient-stopped fusion as well as the fully differentiable modes.
    """
    if config is None:
        config = _tiny_config()
    rng = np.random.default_rng(seed)
    params = init_network_params(config, rng=rng, dtype=np.float64)
    classifier = ClassifierParams.init(3, config.feature_dim, rng, dtype=np.float64)
    clip_i = _random_clip(rng, config, person_id=0, camera_id=0, frames=frames)
    clip_j = _random_clip(rng, config, person_id=1, camera_id=1, frames=frames)

    names = list(params.names())
    inputs = [params[n] for n in names] + [classifier.weight]

    def objective(*_unused):
        feat_i, gates_i = sequence_forward(clip_i, params, config)
        feat_j, gates_j = sequence_forward(clip_j, params, config)
        breakdown = total_loss(feat_i, feat_j, (0, 1),
                               [g["fused"] for g in gates_i],
                               [g["fused"] for g in gates_j],
                               classifier)
        return breakdown.total

    return grad_check(objective, inputs, epsilon, freeze_stops=True)


def run_verification(seed: int = 0, epsilon: float = 1e-5,
                     tolerance: float = DEFAULT_TOLERANCE):
    """All op checks plus end-to-end checks across the fusion modes.

    Returns ``(rows, worst, passed)`` where rows are ``(label, error)``.
    """
    rows = op_checks(seed, epsilon)
    base = _tiny_config()
    for mode in ("f1", "f2", "f3", "f4"):
        cfg = replace(base, fusion_mode=mode)
        rows.append((f"end_to_end_pair_loss[{mode}]",
                     end_to_end_check(seed, epsilon, config=cfg)))
    worst = max(err for _, err in rows)
    return rows, worst, worst < tolerance
