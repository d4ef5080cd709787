"""Articulated skeleton, rigid forward kinematics, proxy vertices and pinhole projection.

Rotations are axis-angle vectors (radians). The torch functions are the
differentiable core used by fitting; the numpy wrappers are what the rest of
the package and the CLI call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
import scipy.sparse as sp
import torch

from ._validation import ShapeError, check_points

if TYPE_CHECKING:
    from .params import ParamSequence


class BehindCameraError(ValueError):
    """A point handed to the projection has non-positive depth."""


@dataclass(frozen=True, eq=False)
class KinematicTree:
    """Joint hierarchy in topological order (``parents[i] < i``, root has -1)."""

    parents: tuple[int, ...]
    offsets: np.ndarray
    names: tuple[str, ...]
    hand_joints: tuple[int, ...] = ()
    arm_joints: tuple[int, ...] = ()

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "hand_joints", tuple(sorted(int(i) for i in self.hand_joints)))
        object.__setattr__(self, "arm_joints", tuple(sorted(int(i) for i in self.arm_joints)))
        offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)

        n = len(parents)
        if n == 0:
            raise ValueError("kinematic tree needs at least one joint")
        if len(offsets) != n or len(self.names) != n:
            raise ShapeError(f"parents/offsets/names lengths differ: {n}, {len(offsets)}, {len(self.names)}")
        if parents[0] != -1 or sum(p < 0 for p in parents) != 1:
            raise ValueError("joint 0 must be the unique root (parent -1)")
        for i, p in enumerate(parents[1:], start=1):
            if not 0 <= p < i:
                raise ValueError(f"joint {i} has parent {p}; joints must be topologically ordered")
        for label, subset in (("hand_joints", self.hand_joints), ("arm_joints", self.arm_joints)):
            if any(not 0 <= j < n for j in subset):
                raise ValueError(f"{label} contains an index outside 0..{n - 1}")
        if set(self.hand_joints) & set(self.arm_joints):
            raise ValueError("a joint cannot be both a hand joint and an arm joint")

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @cached_property
    def body_joints(self) -> tuple[int, ...]:
        hand = set(self.hand_joints)
        return tuple(i for i in range(self.joint_count) if i not in hand)

    @cached_property
    def state_joint_order(self) -> np.ndarray:
        """Tree indices in the order their rotations appear in ``[body_pose || hand_pose]``."""
        return np.array(self.body_joints + self.hand_joints, dtype=np.int64)

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids: list[list[int]] = [[] for _ in range(self.joint_count)]
        for i, p in enumerate(self.parents):
            if p >= 0:
                kids[p].append(i)
        return tuple(tuple(k) for k in kids)

    def neighbors(self, i: int) -> tuple[int, ...]:
        p = self.parents[i]
        return ((p,) if p >= 0 else ()) + self.children[i]

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed message edges ``(src, dst)``; each undirected bone appears twice."""
        src, dst = [], []
        for i in range(self.joint_count):
            for j in self.neighbors(i):
                src.append(j)
                dst.append(i)
        return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)

    def _side(self, prefixes: Sequence[str]) -> tuple[int, ...]:
        return tuple(i for i in self.hand_joints if self.names[i].lower().startswith(tuple(prefixes)))

    @cached_property
    def left_hand_joints(self) -> tuple[int, ...]:
        return self._side(("l_", "left"))

    @cached_property
    def right_hand_joints(self) -> tuple[int, ...]:
        return self._side(("r_", "right"))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_dict(self) -> dict:
        return {
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "names": list(self.names),
            "hand_joints": list(self.hand_joints),
            "arm_joints": list(self.arm_joints),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KinematicTree":
        missing = {"parents", "offsets", "names", "hand_joints", "arm_joints"} - set(data)
        if missing:
            raise ValueError(f"skeleton definition is missing keys: {sorted(missing)}")
        return cls(
            parents=tuple(data["parents"]),
            offsets=np.asarray(data["offsets"], dtype=np.float64),
            names=tuple(data["names"]),
            hand_joints=tuple(data["hand_joints"]),
            arm_joints=tuple(data["arm_joints"]),
        )


def load_skeleton(path) -> KinematicTree:
    with open(path) as fh:
        return KinematicTree.from_dict(json.load(fh))


def save_skeleton(tree: KinematicTree, path) -> None:
    Path(path).write_text(json.dumps(tree.to_dict(), indent=2))


# 8 body joints, 4 per hand. y is up, x points to the signer's left, z forward.
_DEFAULT_JOINTS = [
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("spine", 0, (0.0, 0.25, 0.0)),
    ("neck", 1, (0.0, 0.25, 0.0)),
    ("head", 2, (0.0, 0.15, 0.02)),
    ("l_shoulder", 2, (0.18, -0.02, 0.0)),
    ("l_elbow", 4, (0.28, 0.0, 0.0)),
    ("r_shoulder", 2, (-0.18, -0.02, 0.0)),
    ("r_elbow", 6, (-0.28, 0.0, 0.0)),
    ("l_wrist", 5, (0.25, 0.0, 0.0)),
    ("l_thumb", 8, (0.03, 0.0, 0.04)),
    ("l_index", 8, (0.09, 0.0, 0.01)),
    ("l_index_tip", 10, (0.045, 0.0, 0.0)),
    ("r_wrist", 7, (-0.25, 0.0, 0.0)),
    ("r_thumb", 12, (-0.03, 0.0, 0.04)),
    ("r_index", 12, (-0.09, 0.0, 0.01)),
    ("r_index_tip", 14, (-0.045, 0.0, 0.0)),
]


def default_tree() -> KinematicTree:
    names, parents, offsets = zip(*_DEFAULT_JOINTS)
    return KinematicTree(
        parents=parents,
        offsets=np.array(offsets),
        names=names,
        hand_joints=tuple(range(8, 16)),
        arm_joints=(4, 5, 6, 7),
    )


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole intrinsics ``K`` (pixels)."""

    K: np.ndarray = field(default_factory=lambda: np.array([[500.0, 0, 320], [0, 500, 240], [0, 0, 1]]))

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        if K.shape != (3, 3):
            raise ShapeError(f"intrinsics must be 3x3, got {K.shape}")
        if np.any(np.tril(K, -1) != 0) or np.any(np.diag(K) <= 0):
            raise ValueError("intrinsics must be upper-triangular with a positive diagonal")
        K.setflags(write=False)
        object.__setattr__(self, "K", K)

    @classmethod
    def from_params(cls, fx: float, fy: float, cx: float, cy: float) -> "Camera":
        return cls(np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]))

    @classmethod
    def from_json(cls, path) -> "Camera":
        with open(path) as fh:
            d = json.load(fh)
        return cls.from_params(d["fx"], d["fy"], d["cx"], d["cy"])

    def to_dict(self) -> dict:
        K = self.K
        return {"fx": K[0, 0], "fy": K[1, 1], "cx": K[0, 2], "cy": K[1, 2]}


@dataclass(frozen=True, eq=False)
class VertexRegressor:
    """Sparse convex-combination map from joint positions to proxy surface points."""

    weights: sp.csr_matrix
    regions: tuple[str, ...] = ()

    def __post_init__(self):
        W = sp.csr_matrix(self.weights, dtype=np.float64)
        if W.nnz and W.data.min() < 0:
            raise ValueError("regressor weights must be non-negative")
        if not np.allclose(np.asarray(W.sum(axis=1)).ravel(), 1.0, atol=1e-12):
            raise ValueError("every regressor row must sum to 1")
        object.__setattr__(self, "weights", W)
        if self.regions and len(self.regions) != W.shape[0]:
            raise ShapeError("one region label per proxy vertex is required")

    @property
    def vertex_count(self) -> int:
        return self.weights.shape[0]

    def region_vertices(self, region: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.regions) if r == region], dtype=np.int64)

    def dense_torch(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.weights.toarray(), dtype=dtype)


def joint_region(tree: KinematicTree, j: int) -> str:
    if j in tree.left_hand_joints:
        return "left_hand"
    if j in tree.right_hand_joints:
        return "right_hand"
    return "body"


def default_regressor(tree: KinematicTree, points_per_bone: int = 2) -> VertexRegressor:
    """One vertex per joint plus ``points_per_bone`` evenly spaced points on every bone."""
    rows, cols, vals, regions = [], [], [], []
    m = 0
    for j in range(tree.joint_count):
        rows.append(m)
        cols.append(j)
        vals.append(1.0)
        regions.append(joint_region(tree, j))
        m += 1
    for j in range(1, tree.joint_count):
        p = tree.parents[j]
        for k in range(1, points_per_bone + 1):
            a = k / (points_per_bone + 1)
            rows += [m, m]
            cols += [p, j]
            vals += [1.0 - a, a]
            regions.append(joint_region(tree, j))
            m += 1
    W = sp.csr_matrix((vals, (rows, cols)), shape=(m, tree.joint_count))
    return VertexRegressor(W, tuple(regions))


def axis_angle_to_matrix(aa: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula, ``(..., 3) -> (..., 3, 3)``; smooth through zero angle."""
    sq = (aa * aa).sum(-1, keepdim=True)[..., None]
    small = sq < 1e-6
    safe_sq = torch.where(small, torch.ones_like(sq), sq)
    theta = torch.sqrt(safe_sq)
    a = torch.where(small, 1 - sq / 6 + sq * sq / 120, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - sq / 24 + sq * sq / 720, (1 - torch.cos(theta)) / safe_sq)
    x, y, z = aa.unbind(-1)
    zero = torch.zeros_like(x)
    skew = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(aa.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand_as(skew)
    return eye + a * skew + b * (skew @ skew)


def fk_torch(tree: KinematicTree, rotations: torch.Tensor, transl: torch.Tensor | None = None):
    """Differentiable rigid FK.

    ``rotations`` is ``(..., J, 3)`` in tree order. Returns joint positions
    ``(..., J, 3)`` and accumulated global rotations ``(..., J, 3, 3)``.
    """
    if rotations.shape[-2:] != (tree.joint_count, 3):
        raise ShapeError(f"expected rotations (..., {tree.joint_count}, 3), got {tuple(rotations.shape)}")
    local = axis_angle_to_matrix(rotations)
    offsets = torch.tensor(tree.offsets, dtype=rotations.dtype, device=rotations.device)
    batch = rotations.shape[:-2]
    root = torch.zeros(batch + (3,), dtype=rotations.dtype) if transl is None else transl.expand(batch + (3,))
    pos = [root]
    glob = [local[..., 0, :, :]]
    for i in range(1, tree.joint_count):
        p = tree.parents[i]
        pos.append(pos[p] + (glob[p] @ offsets[i].unsqueeze(-1)).squeeze(-1))
        glob.append(glob[p] @ local[..., i, :, :])
    return torch.stack(pos, dim=-2), torch.stack(glob, dim=-3)


def forward_kinematics(tree: KinematicTree, seq: "ParamSequence") -> np.ndarray:
    """Joint track ``F x J x 3`` for a parameter sequence."""
    rot = torch.as_tensor(seq.joint_rotations(tree))
    transl = None if seq.transl is None else torch.as_tensor(seq.transl)
    with torch.no_grad():
        joints, _ = fk_torch(tree, rot, transl)
    return joints.numpy()


def proxy_vertices(regressor: VertexRegressor, joints) -> np.ndarray:
    """``F x J x 3`` joints to ``F x M x 3`` proxy vertices (X = W J per frame)."""
    joints = check_points(joints, "joints")
    if joints.shape[-2] != regressor.weights.shape[1]:
        raise ShapeError(f"regressor expects {regressor.weights.shape[1]} joints, got {joints.shape[-2]}")
    lead = joints.shape[:-2]
    J = joints.shape[-2]
    flat = np.moveaxis(joints.reshape((-1, J, 3)), 1, 0).reshape(J, -1)
    out = regressor.weights @ flat
    return np.moveaxis(out.reshape(-1, int(np.prod(lead, dtype=int)), 3), 0, 1).reshape(lead + (-1, 3))


def project_torch(K: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    cam = points @ K.transpose(-1, -2)
    return cam[..., :2] / cam[..., 2:3]


def project(camera: Camera, points) -> np.ndarray:
    """Pinhole projection of ``(..., 3)`` camera-space points to pixels."""
    pts = check_points(points)
    if np.any(pts[..., 2] <= 0):
        raise BehindCameraError("cannot project points with z <= 0")
    cam = pts @ camera.K.T
    return cam[..., :2] / cam[..., 2:3]
