"""Training objectives: identification, pairwise verification, and the gate
floor regularizer, combined into one joint scalar."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import GateMap
from .tensor import (
    Tensor,
    add,
    matvec,
    mean_all,
    mean_stack,
    mul,
    relu,
    scale,
    softmax_nll,
    sqrt,
    sub,
    sum_all,
)


@dataclass
class ClassifierParams:
    """Bias-free softmax head used only while training: weight [num_ids, feature_dim]."""

    weight: Tensor

    @classmethod
    def init(cls, num_identities: int, feature_dim: int,
             rng: np.random.Generator, dtype=np.float32):
        if num_identities < 2:
            raise ValueError("need at least two identities to classify")
        limit = np.sqrt(6.0 / (feature_dim + num_identities))
        w = rng.uniform(-limit, limit, size=(num_identities, feature_dim)).astype(dtype)
        return cls(Tensor(w, requires_grad=True))

    @property
    def num_identities(self) -> int:
        return self.weight.shape[0]


@dataclass
class LossBreakdown:
    """The joint loss and its five summands, all scalar tensors."""

    ident_i: Tensor
    ident_j: Tensor
    verif: Tensor
    gate_i: Tensor
    gate_j: Tensor
    total: Tensor

    def floats(self) -> dict:
        return {
            "ident_i": float(self.ident_i.data),
            "ident_j": float(self.ident_j.data),
            "verif": float(self.verif.data),
            "gate_i": float(self.gate_i.data),
            "gate_j": float(self.gate_j.data),
            "total": float(self.total.data),
        }


def _const(value: float, dtype) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def identification_loss(feature: Tensor, true_id: int, classifier: ClassifierParams) -> Tensor:
    """Negative log softmax probability of the true identity."""
    true_id = int(true_id)
    if not 0 <= true_id < classifier.num_identities:
        raise IndexError(f"identity {true_id} outside [0, {classifier.num_identities})")
    return softmax_nll(matvec(classifier.weight, feature), true_id)


def verification_loss(feat_i: Tensor, feat_j: Tensor, same_person: bool,
                      margin: float = 2.0) -> Tensor:
    """Contrastive pair loss on clip features.

    Same identity: half squared distance.  Different identities: half squared
    hinge of (margin - distance); beyond the margin the loss and its
    gradient are exactly zero.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    d = sub(feat_i, feat_j)
    sq = sum_all(mul(d, d))
    if same_person:
        return scale(sq, 0.5)
    dist = sqrt(sq)
    gap = relu(sub(_const(margin, dist.dtype), dist))
    return scale(mul(gap, gap), 0.5)


def gate_regularizer(gate) -> Tensor:
    """Penalty that props up collapsing gates: max(0, 0.5 - mean) * (1 - mean).

    Active only while the map's mean sits below one half; by then the second
    factor is at least one half, so the push back up is strong exactly where
    collapse is worst.  Accepts a GateMap or a raw tensor.
    """
    values = gate.values if isinstance(gate, GateMap) else gate
    m = mean_all(values)
    low = relu(sub(_const(0.5, m.dtype), m))
    return mul(low, sub(_const(1.0, m.dtype), m))


def total_loss(feat_i: Tensor, feat_j: Tensor, ids: tuple[int, int],
               gates_i, gates_j, classifier: ClassifierParams,
               margin: float = 2.0) -> LossBreakdown:
    """Joint objective for one clip pair.

    ``gates_i``/``gates_j`` are per-frame lists of applied gate maps (their
    regularizers are averaged over the clip) or None to drop the term, e.g.
    for ungated networks or regularizer-off ablations.
    """
    li = identification_loss(feat_i, ids[0], classifier)
    lj = identification_loss(feat_j, ids[1], classifier)
    lv = verification_loss(feat_i, feat_j, ids[0] == ids[1], margin)

    def gate_term(gates):
        if gates is None:
            return _const(0.0, feat_i.dtype)
        if len(gates) == 0:
            raise ValueError("gate list is empty; pass None to disable the term")
        return mean_stack([gate_regularizer(g) for g in gates])

    gi = gate_term(gates_i)
    gj = gate_term(gates_j)
    total = add(add(add(add(li, lj), lv), gi), gj)
    return LossBreakdown(li, lj, lv, gi, gj, total)
