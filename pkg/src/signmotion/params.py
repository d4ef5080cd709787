"""Per-frame pose/expression parameters, the diffusion state layout, and their file format."""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import ShapeError, as_float_array
from .kinematics import KinematicTree

FORMAT_MAGIC = "signmotion.params"
FORMAT_VERSION = 1
DEFAULT_EXPRESSION_DIM = 4
DEFAULT_SHAPE_DIM = 10


class FormatError(ValueError):
    """A parameter or checkpoint file does not follow the expected schema."""


@dataclass(frozen=True)
class StateLayout:
    """Channel layout of ``[body_pose || hand_pose || expression]``."""

    n_body_joints: int
    n_hand_joints: int
    n_expression: int

    @classmethod
    def from_tree(cls, tree: KinematicTree, n_expression: int = DEFAULT_EXPRESSION_DIM) -> "StateLayout":
        return cls(len(tree.body_joints), len(tree.hand_joints), n_expression)

    @property
    def body_dim(self) -> int:
        return 3 * self.n_body_joints

    @property
    def hand_dim(self) -> int:
        return 3 * self.n_hand_joints

    @property
    def pose_dim(self) -> int:
        return self.body_dim + self.hand_dim

    @property
    def dim(self) -> int:
        return self.pose_dim + self.n_expression

    @property
    def n_joints(self) -> int:
        return self.n_body_joints + self.n_hand_joints

    def hand_mask(self) -> np.ndarray:
        mask = np.zeros(self.dim, dtype=bool)
        mask[self.body_dim : self.pose_dim] = True
        return mask

    def joint_channels(self, tree: KinematicTree, joints) -> np.ndarray:
        """State channel indices holding the rotations of the given tree joints."""
        order = list(tree.state_joint_order)
        return np.array([3 * order.index(j) + k for j in joints for k in range(3)], dtype=np.int64)

    def region_channels(self, tree: KinematicTree) -> dict[str, np.ndarray]:
        """Channel subsets used for per-region metrics; expression counts as body."""
        hand = set(tree.hand_joints)
        body = self.joint_channels(tree, [j for j in tree.state_joint_order if j not in hand])
        expr = np.arange(self.pose_dim, self.dim)
        return {
            "body": np.concatenate([body, expr]),
            "left_hand": self.joint_channels(tree, tree.left_hand_joints),
            "right_hand": self.joint_channels(tree, tree.right_hand_joints),
        }


@dataclass
class ParamSequence:
    """Body pose, hand pose (axis-angle), expression per frame; static shape.

    ``transl`` is the optional root translation channel (``F x 3``); when
    absent the root sits at the origin.
    """

    body_pose: np.ndarray
    hand_pose: np.ndarray
    expression: np.ndarray
    shape: np.ndarray = field(default_factory=lambda: np.zeros(DEFAULT_SHAPE_DIM))
    fps: float = 30.0
    transl: np.ndarray | None = None

    def __post_init__(self):
        self.body_pose = as_float_array(self.body_pose, ndim=2, name="body_pose")
        F = self.body_pose.shape[0]
        self.hand_pose = as_float_array(self.hand_pose, ndim=2, name="hand_pose")
        self.expression = as_float_array(self.expression, ndim=2, name="expression", allow_empty=True)
        if self.expression.size == 0:
            self.expression = self.expression.reshape(F, 0)
        self.shape = as_float_array(self.shape, ndim=1, name="shape", allow_empty=True)
        if self.body_pose.shape[1] % 3 or self.hand_pose.shape[1] % 3:
            raise ShapeError("pose widths must be multiples of 3 (axis-angle per joint)")
        if self.hand_pose.shape[0] != F or self.expression.shape[0] != F:
            raise ShapeError("body_pose, hand_pose and expression must have the same frame count")
        if self.transl is not None:
            self.transl = as_float_array(self.transl, ndim=2, name="transl")
            if self.transl.shape != (F, 3):
                raise ShapeError(f"transl must be ({F}, 3), got {self.transl.shape}")
        self.fps = float(self.fps)
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    @property
    def n_frames(self) -> int:
        return self.body_pose.shape[0]

    @property
    def layout(self) -> StateLayout:
        return StateLayout(self.body_pose.shape[1] // 3, self.hand_pose.shape[1] // 3, self.expression.shape[1])

    def state(self) -> np.ndarray:
        return np.concatenate([self.body_pose, self.hand_pose, self.expression], axis=1)

    @classmethod
    def from_state(cls, state, layout: StateLayout, *, shape=None, fps: float = 30.0, transl=None) -> "ParamSequence":
        state = as_float_array(state, ndim=2, name="state")
        if state.shape[1] != layout.dim:
            raise ShapeError(f"state has {state.shape[1]} channels, layout expects {layout.dim}")
        return cls(
            body_pose=state[:, : layout.body_dim].copy(),
            hand_pose=state[:, layout.body_dim : layout.pose_dim].copy(),
            expression=state[:, layout.pose_dim :].copy(),
            shape=np.zeros(DEFAULT_SHAPE_DIM) if shape is None else shape,
            fps=fps,
            transl=transl,
        )

    def check_tree(self, tree: KinematicTree) -> None:
        lay = self.layout
        if (lay.n_body_joints, lay.n_hand_joints) != (len(tree.body_joints), len(tree.hand_joints)):
            raise ShapeError(
                f"sequence has {lay.n_body_joints} body / {lay.n_hand_joints} hand joints, "
                f"tree has {len(tree.body_joints)} / {len(tree.hand_joints)}"
            )

    def joint_rotations(self, tree: KinematicTree) -> np.ndarray:
        """``F x J x 3`` axis-angles in tree joint order."""
        self.check_tree(tree)
        stacked = np.concatenate([self.body_pose, self.hand_pose], axis=1).reshape(self.n_frames, -1, 3)
        out = np.empty_like(stacked)
        out[:, tree.state_joint_order] = stacked
        return out

    def with_joint_rotations(self, tree: KinematicTree, rotations) -> "ParamSequence":
        self.check_tree(tree)
        rot = np.asarray(rotations, dtype=np.float64)[:, tree.state_joint_order].reshape(self.n_frames, -1)
        nb = self.body_pose.shape[1]
        return ParamSequence(
            rot[:, :nb].copy(), rot[:, nb:].copy(), self.expression.copy(), self.shape.copy(), self.fps,
            None if self.transl is None else self.transl.copy(),
        )

    def copy(self) -> "ParamSequence":
        return ParamSequence(
            self.body_pose.copy(), self.hand_pose.copy(), self.expression.copy(), self.shape.copy(), self.fps,
            None if self.transl is None else self.transl.copy(),
        )

    def equals(self, other: "ParamSequence") -> bool:
        """Bit-exact equality of every field."""
        same_transl = (self.transl is None and other.transl is None) or (
            self.transl is not None and other.transl is not None and np.array_equal(self.transl, other.transl)
        )
        return (
            same_transl
            and self.fps == other.fps
            and all(
                a.shape == b.shape and np.array_equal(a, b)
                for a, b in zip(
                    (self.body_pose, self.hand_pose, self.expression, self.shape),
                    (other.body_pose, other.hand_pose, other.expression, other.shape),
                )
            )
        )

    def to_dict(self) -> dict:
        d = {
            "theta_b": self.body_pose.tolist(),
            "theta_h": self.hand_pose.tolist(),
            "psi": self.expression.tolist(),
            "beta": self.shape.tolist(),
            "fps": self.fps,
        }
        if self.transl is not None:
            d["transl"] = self.transl.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSequence":
        missing = {"theta_b", "theta_h", "psi", "beta", "fps"} - set(d)
        if missing:
            raise FormatError(f"parameter record is missing {sorted(missing)}")
        F = len(d["theta_b"])
        psi = np.asarray(d["psi"], dtype=np.float64).reshape(F, -1)
        return cls(d["theta_b"], d["theta_h"], psi, d["beta"], d["fps"], d.get("transl"))


def save_params(path, seq: ParamSequence) -> None:
    arrays = {
        "magic": np.array(FORMAT_MAGIC),
        "version": np.array(FORMAT_VERSION),
        "theta_b": seq.body_pose,
        "theta_h": seq.hand_pose,
        "psi": seq.expression,
        "beta": seq.shape,
        "fps": np.array(seq.fps),
    }
    if seq.transl is not None:
        arrays["transl"] = seq.transl
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_npz(path, magic: str) -> dict[str, np.ndarray]:
    """Load a named-array container after checking its zip signature and magic tag."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head != b"PK\x03\x04":
        raise FormatError(f"{path}: not an array container (bad magic bytes)")
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, OSError) as exc:
        raise FormatError(f"{path}: unreadable array container: {exc}") from exc
    if "magic" not in data or str(data["magic"]) != magic:
        raise FormatError(f"{path}: expected a '{magic}' file")
    if int(data.get("version", -1)) != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {data.get('version')}")
    return data


def load_params(path) -> ParamSequence:
    data = read_npz(path, FORMAT_MAGIC)
    missing = {"theta_b", "theta_h", "psi", "beta", "fps"} - set(data)
    if missing:
        raise FormatError(f"{path}: missing arrays {sorted(missing)}")
    try:
        return ParamSequence(
            data["theta_b"], data["theta_h"], data["psi"], data["beta"], float(data["fps"]), data.get("transl")
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def load_params_json(path) -> ParamSequence:
    with open(path) as fh:
        return ParamSequence.from_dict(json.load(fh))
