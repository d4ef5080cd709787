"""Evaluation metrics: MPJPE/MPVPE, DTW, Gaussian Frechet distance, per-frame pose statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from ._validation import ShapeError, as_float_array
from .kinematics import KinematicTree, VertexRegressor, forward_kinematics, proxy_vertices
from .params import ParamSequence

REGIONS = ("body", "left_hand", "right_hand")


def mpjpe(pred, truth) -> float:
    """Mean over frames and joints of the Euclidean joint error."""
    pred = as_float_array(pred, name="pred")
    truth = as_float_array(truth, name="truth")
    if pred.shape != truth.shape or pred.shape[-1] != 3:
        raise ShapeError(f"pred {pred.shape} and truth {truth.shape} must match and end in 3")
    return float(np.linalg.norm(pred - truth, axis=-1).mean())


mpvpe = mpjpe


def dtw(seq_a, seq_b) -> float:
    """Classic DTW cost: Euclidean frame distance, match/insert/delete steps, no window."""
    a = as_float_array(seq_a, name="seq_a")
    b = as_float_array(seq_b, name="seq_b")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ShapeError("sequences must have the same per-frame dimension")
    cost = cdist(a, b)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    # cells on one anti-diagonal only depend on the previous two
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        best = np.minimum(np.minimum(acc[i - 1, j - 1], acc[i - 1, j]), acc[i, j - 1])
        acc[i, j] = cost[i - 1, j - 1] + best
    return float(acc[n, m])


@dataclass(frozen=True, eq=False)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_samples(cls, X) -> "GaussianFit":
        X = as_float_array(X, ndim=2, name="features")
        if len(X) < 2:
            raise ValueError("need at least two samples to estimate a covariance")
        return cls(X.mean(axis=0), np.atleast_2d(np.cov(X, rowvar=False)))

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=np.float64)
        if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(self.mean)):
            raise ValueError("non-finite Gaussian statistics")
        if not np.allclose(cov, cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")


def frechet_distance(a: GaussianFit, b: GaussianFit, eps: float = 1e-6) -> float:
    """``|m_a - m_b|^2 + Tr(C_a + C_b - 2 (C_a C_b)^(1/2))`` with ``eps`` added to both diagonals."""
    D = a.mean.shape[0]
    ca = a.cov + eps * np.eye(D)
    cb = b.cov + eps * np.eye(D)
    covmean = linalg.sqrtm(ca @ cb)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    if not np.all(np.isfinite(covmean)):
        raise ValueError("matrix square root failed")
    diff = a.mean - b.mean
    val = diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(covmean)
    return float(max(val, 0.0))


def fid(set_a, set_b, eps: float = 1e-6) -> float:
    return frechet_distance(GaussianFit.from_samples(set_a), GaussianFit.from_samples(set_b), eps)


def frame_pose_stats(sequences: Sequence, channels=None):
    """Per frame index: mean and std of ``|value|`` over all channels of all sequences long enough.

    Returns ``(mean, std, count)`` arrays of length ``max F``.
    """
    seqs = [np.asarray(s.state() if isinstance(s, ParamSequence) else s, dtype=np.float64) for s in sequences]
    if not seqs:
        raise ValueError("need at least one sequence")
    if channels is not None:
        seqs = [s[:, channels] for s in seqs]
    F = max(len(s) for s in seqs)
    mean, std, count = np.zeros(F), np.zeros(F), np.zeros(F, dtype=int)
    for f in range(F):
        live = [s[f] for s in seqs if len(s) > f]
        vals = np.abs(np.concatenate(live))
        mean[f], std[f], count[f] = vals.mean(), vals.std(), len(live)
    return mean, std, count


def pose_channels(seq: ParamSequence) -> np.ndarray:
    return np.concatenate([seq.body_pose, seq.hand_pose], axis=1)


def region_joints(tree: KinematicTree) -> dict[str, tuple[int, ...]]:
    return {"body": tree.body_joints, "left_hand": tree.left_hand_joints, "right_hand": tree.right_hand_joints}


def evaluate(
    preds: Sequence[ParamSequence],
    truths: Sequence[ParamSequence],
    tree: KinematicTree,
    regressor: VertexRegressor,
) -> dict:
    """Per-region MPVPE/MPJPE (mm), pose-space FID and mean DTW.

    Paired sequences of unequal length are compared on their common prefix
    for the position errors; DTW and FID use full sequences.
    """
    if len(preds) != len(truths) or not preds:
        raise ValueError("need matching, non-empty prediction and truth lists")
    layout = truths[0].layout
    channels = layout.region_channels(tree)
    joints = region_joints(tree)
    verts = {r: regressor.region_vertices(r) for r in REGIONS}

    pos_err = {r: {"MPJPE": [], "MPVPE": []} for r in REGIONS}
    dtws = {r: [] for r in REGIONS}
    for p, t in zip(preds, truths):
        n = min(p.n_frames, t.n_frames)
        jp = forward_kinematics(tree, p)[:n]
        jt = forward_kinematics(tree, t)[:n]
        vp, vt = proxy_vertices(regressor, jp), proxy_vertices(regressor, jt)
        sp, st = p.state(), t.state()
        for r in REGIONS:
            pos_err[r]["MPJPE"].append(mpjpe(jp[:, list(joints[r])], jt[:, list(joints[r])]))
            pos_err[r]["MPVPE"].append(mpvpe(vp[:, verts[r]], vt[:, verts[r]]))
            dtws[r].append(dtw(sp[:, channels[r]], st[:, channels[r]]))

    pred_frames = np.concatenate([p.state() for p in preds])
    true_frames = np.concatenate([t.state() for t in truths])
    report = {"units": {"MPVPE": "mm", "MPJPE": "mm", "FID": "pose-space", "DTW": "pose-space"}}
    for r in REGIONS:
        report[r] = {
            "MPVPE": 1000.0 * float(np.mean(pos_err[r]["MPVPE"])),
            "MPJPE": 1000.0 * float(np.mean(pos_err[r]["MPJPE"])),
            "FID": fid(pred_frames[:, channels[r]], true_frames[:, channels[r]]),
            "DTW": float(np.mean(dtws[r])),
        }
    return report


def frame_std_distance(preds: Sequence[ParamSequence], truths: Sequence[ParamSequence], channels=None) -> float:
    """L1 distance between the per-frame ``|pose|`` std curves of two sets, over their common frames."""
    _, sp, _ = frame_pose_stats(preds, channels)
    _, st, _ = frame_pose_stats(truths, channels)
    n = min(len(sp), len(st))
    return float(np.abs(sp[:n] - st[:n]).sum())


def summary_row(
    preds: Sequence[ParamSequence],
    truths: Sequence[ParamSequence],
    tree: KinematicTree,
    regressor: VertexRegressor,
) -> dict:
    """Whole-skeleton MPVPE/MPJPE (mm), FID and mean DTW over all state channels, plus the frame-std gap."""
    if len(preds) != len(truths) or not preds:
        raise ValueError("need matching, non-empty prediction and truth lists")
    joint_err, vert_err, dtws = [], [], []
    for p, t in zip(preds, truths):
        n = min(p.n_frames, t.n_frames)
        jp, jt = forward_kinematics(tree, p)[:n], forward_kinematics(tree, t)[:n]
        joint_err.append(mpjpe(jp, jt))
        vert_err.append(mpvpe(proxy_vertices(regressor, jp), proxy_vertices(regressor, jt)))
        dtws.append(dtw(p.state(), t.state()))
    pose = np.arange(truths[0].layout.pose_dim)
    return {
        "MPVPE": 1000.0 * float(np.mean(vert_err)),
        "MPJPE": 1000.0 * float(np.mean(joint_err)),
        "FID": fid(np.concatenate([p.state() for p in preds]), np.concatenate([t.state() for t in truths])),
        "DTW": float(np.mean(dtws)),
        "frame_std_l1": frame_std_distance(preds, truths, pose),
    }
