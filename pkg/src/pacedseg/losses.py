"""Supervised, mask-gated unsupervised, and total training objectives.

Each loss exists once, as a tape-graph builder; the float-returning
wrappers run the same builder on a throwaway tape, so reported values
and training gradients can never drift apart.

Mask gating is subset reduction: the gated loss is literally the loss of
the voxel subset where the mask is true, not a multiply-then-average
over the full grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape
from .grids import BoolMask, LabelMap, ProbMap

DICE_EPS = 1e-5
CE_PROB_FLOOR = 1e-7


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return np.eye(n_classes)[labels]


def dice_loss(pred_channel, target, eps=DICE_EPS) -> float:
    """Soft Dice for one class channel: 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps)."""
    p = np.asarray(getattr(pred_channel, "data", pred_channel), dtype=np.float64)
    g = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    inter = float((p * g).sum())
    return 1.0 - (2.0 * inter + eps) / (float(p.sum()) + float(g.sum()) + eps)


def _scalar(tape: Tape, node: Node) -> Node:
    return tape.reshape(node, ())


def dice_node(tape: Tape, probs_flat: Node, onehot: np.ndarray, n_classes: int) -> Node:
    """Soft Dice over foreground classes on (N, C) probabilities."""
    onehot = np.asarray(onehot, dtype=tape.dtype)
    g_sums = onehot.sum(axis=0)
    pg = tape.mul_const(probs_flat, onehot)
    inter_cols = tape.sum_axis(pg, axis=0, keepdims=False)
    p_cols = tape.sum_axis(probs_flat, axis=0, keepdims=False)
    terms = []
    for c in range(1, n_classes):
        inter_c = tape.take_rows(inter_cols, np.array([c]))
        p_c = tape.take_rows(p_cols, np.array([c]))
        num = tape.add_const(tape.scale(inter_c, 2.0), DICE_EPS)
        den = tape.add_const(p_c, float(g_sums[c]) + DICE_EPS)
        terms.append(tape.add_const(tape.scale(tape.div(num, den), -1.0), 1.0))
    total = terms[0] if len(terms) == 1 else tape.concat(terms, axis=0)
    return _scalar(tape, tape.scale(tape.sum(total), 1.0 / (n_classes - 1)))


def ce_node(tape: Tape, probs_flat: Node, labels: np.ndarray) -> Node:
    """Mean -log p[target] with probabilities floored at 1e-7 before the log."""
    picked = tape.select_class(probs_flat, labels)
    logp = tape.log(tape.clamp_min(picked, CE_PROB_FLOOR))
    return _scalar(tape, tape.scale(tape.sum(logp), -1.0 / labels.shape[0]))


def dice_ce_node(tape: Tape, prob_node: Node, target_labels: np.ndarray,
                 n_classes: int, gate_idx: np.ndarray | None = None) -> Node:
    """Dice + CE on the full grid, or on the gated voxel subset."""
    n_vox = int(np.prod(prob_node.value.shape[:3]))
    flat = tape.reshape(prob_node, (n_vox, n_classes))
    labels = np.asarray(target_labels).ravel()
    if gate_idx is not None:
        if gate_idx.size == 0:
            return tape.input(0.0)
        flat = tape.take_rows(flat, gate_idx)
        labels = labels[gate_idx]
    onehot = _one_hot(labels, n_classes)
    return tape.add(dice_node(tape, flat, onehot, n_classes), ce_node(tape, flat, labels))


# ---------------------------------------------------------------------------
# float-returning wrappers over the graph builders
# ---------------------------------------------------------------------------

def _check_pair(pred: ProbMap, target: LabelMap):
    if pred.dims != target.dims:
        raise ValueError(f"dims mismatch: {pred.dims} vs {target.dims}")
    if pred.n_classes != target.n_classes:
        raise ValueError("class count mismatch")


def _run(pred: ProbMap, target: LabelMap, gate_idx) -> float:
    tape = Tape(np.float64)
    node = dice_ce_node(tape, tape.input(pred.data), target.data, pred.n_classes, gate_idx)
    return float(node.value)


def ce_loss(pred: ProbMap, target: LabelMap, gate: BoolMask | None = None) -> float:
    """Mean cross-entropy over (optionally gated) voxels; empty gate -> 0."""
    _check_pair(pred, target)
    labels = target.data.ravel()
    flat = pred.data.reshape(-1, pred.n_classes)
    if gate is not None:
        if gate.dims != pred.dims:
            raise ValueError("gate dims mismatch")
        idx = np.flatnonzero(gate.data.ravel())
        if idx.size == 0:
            return 0.0
        labels, flat = labels[idx], flat[idx]
    tape = Tape(np.float64)
    return float(ce_node(tape, tape.input(flat), labels).value)


def multiclass_dice(pred: ProbMap, target: LabelMap, gate: BoolMask | None = None) -> float:
    """Soft Dice averaged over foreground classes."""
    _check_pair(pred, target)
    flat = pred.data.reshape(-1, pred.n_classes)
    labels = target.data.ravel()
    if gate is not None:
        idx = np.flatnonzero(gate.data.ravel())
        if idx.size == 0:
            return 0.0
        flat, labels = flat[idx], labels[idx]
    tape = Tape(np.float64)
    node = dice_node(tape, tape.input(flat), _one_hot(labels, pred.n_classes), pred.n_classes)
    return float(node.value)


def supervised_loss(pred: ProbMap, fused: LabelMap) -> float:
    """Ungated Dice + CE against the fused pseudo label."""
    _check_pair(pred, fused)
    return _run(pred, fused, None)


def unsupervised_loss(pred: ProbMap, pseudo: LabelMap, mask: BoolMask) -> float:
    """Dice + CE restricted to mask-true voxels; empty mask -> 0."""
    _check_pair(pred, pseudo)
    if mask.dims != pred.dims:
        raise ValueError("mask dims mismatch")
    return _run(pred, pseudo, np.flatnonzero(mask.data.ravel()))


@dataclass
class LossReport:
    """Per-iteration loss decomposition and the selection stats behind it.

    ``total`` is always computed as (l_s + l_u) + l_bf in that order, so
    the decomposition is bit-reproducible across runs.
    """

    t: int
    l_s: float
    l_u: float
    l_bf: float
    mask_count: int
    r_conf: float
    branch: str
    v: float | None
    lam: float
    lr: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = (self.l_s + self.l_u) + self.l_bf

    CSV_HEADER = "t,L_s,L_u,L_bf,L_total,R_conf,K,lambda,v,branch,lr"

    def csv_row(self) -> str:
        v_str = "" if self.v is None else repr(self.v)
        return (
            f"{self.t},{self.l_s!r},{self.l_u!r},{self.l_bf!r},{self.total!r},"
            f"{self.r_conf!r},{self.mask_count},{self.lam!r},{v_str},{self.branch},{self.lr!r}"
        )
