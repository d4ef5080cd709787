"""Refine per-frame arm and hand rotations against 2D detections.

The objective is reprojection (confidence-weighted L1 in pixels) plus a
weighted PCA prior term plus a weighted temporal smoothness term over
joints and proxy vertices. Only the rotation channels of the optimized
joints move; everything else is copied through untouched.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator

from ._validation import ShapeError, as_float_array
from .kinematics import (
    BehindCameraError,
    Camera,
    KinematicTree,
    VertexRegressor,
    default_regressor,
    default_tree,
    fk_torch,
    project_torch,
)
from .params import FORMAT_VERSION, FormatError, ParamSequence, read_npz
from .prior import PriorSet

logger = logging.getLogger(__name__)

DETECTIONS_MAGIC = "signmotion.detections"


class DegenerateInputError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class SingleFrameWarning(UserWarning):
    """Temporal loss requested for a one-frame sequence."""


@dataclass
class Detections:
    joints2d: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.joints2d = as_float_array(self.joints2d, ndim=3, name="joints2d")
        self.confidence = as_float_array(self.confidence, ndim=2, name="confidence")
        if self.joints2d.shape[-1] != 2 or self.joints2d.shape[:2] != self.confidence.shape:
            raise ShapeError(f"joints2d {self.joints2d.shape} and confidence {self.confidence.shape} disagree")
        if self.confidence.min() < 0 or self.confidence.max() > 1:
            raise ValueError("confidences must lie in [0, 1]")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                magic=np.array(DETECTIONS_MAGIC),
                version=np.array(FORMAT_VERSION),
                joints2d=self.joints2d,
                confidence=self.confidence,
            )

    @classmethod
    def load(cls, path) -> "Detections":
        data = read_npz(path, DETECTIONS_MAGIC)
        try:
            return cls(data["joints2d"], data["confidence"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: {exc}") from exc


@dataclass
class FitConfig:
    lambda_prior: float = 0.1
    lambda_temp: float = 1.0
    max_iters: int = 200
    step_size: float = 0.01
    convergence_tol: float = 1e-5
    optimized_joints: tuple[int, ...] | None = None
    max_backtracks: int = 20

    def __post_init__(self):
        if self.lambda_prior < 0 or self.lambda_temp < 0:
            raise ValueError("loss weights must be non-negative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        if self.optimized_joints is not None:
            self.optimized_joints = tuple(int(j) for j in self.optimized_joints)

    def joints_for(self, tree: KinematicTree) -> tuple[int, ...]:
        joints = self.optimized_joints
        if joints is None:
            joints = tuple(sorted(set(tree.arm_joints) | set(tree.hand_joints)))
        if any(not 0 <= j < tree.joint_count for j in joints):
            raise ValueError("optimized_joints must index joints of the tree")
        return tuple(sorted(set(joints)))

    @classmethod
    def from_json(cls, path) -> "FitConfig":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def reprojection_loss_torch(joints2d: torch.Tensor, confidence: torch.Tensor, joints3d: torch.Tensor, K: torch.Tensor):
    resid = (joints2d - project_torch(K, joints3d)).abs().sum(-1)
    return (confidence * resid).mean()


def reprojection_loss(detections: Detections, predicted_joints3d, camera: Camera) -> float:
    """Mean over frames and joints of ``confidence * |J - proj(J_hat)|_1``."""
    pred = as_float_array(predicted_joints3d, ndim=3, name="predicted_joints3d")
    if pred.shape[:2] != detections.confidence.shape:
        raise ShapeError(f"predictions {pred.shape[:2]} do not match detections {detections.confidence.shape}")
    if not detections.confidence.any():
        raise DegenerateInputError("all detection confidences are zero")
    if np.any(pred[..., 2] <= 0):
        raise BehindCameraError("predicted joints behind the camera")
    t = lambda a: torch.tensor(a, dtype=torch.float64)  # noqa: E731
    return float(reprojection_loss_torch(t(detections.joints2d), t(detections.confidence), t(pred), t(camera.K)))


def temporal_loss_torch(vertices: torch.Tensor, joints: torch.Tensor) -> torch.Tensor:
    dv = (vertices[1:] - vertices[:-1]).flatten(1)
    dj = (joints[1:] - joints[:-1]).flatten(1)
    return (torch.linalg.vector_norm(dv, dim=1) + torch.linalg.vector_norm(dj, dim=1)).mean()


def temporal_loss(vertices, joints) -> float:
    """Mean over adjacent frame pairs of flattened vertex and joint displacement norms."""
    v = as_float_array(vertices, ndim=3, name="vertices")
    j = as_float_array(joints, ndim=3, name="joints")
    if v.shape[0] != j.shape[0]:
        raise ShapeError("vertices and joints must share the frame axis")
    if v.shape[0] < 2:
        warnings.warn("temporal loss of a single frame is 0", SingleFrameWarning, stacklevel=2)
        return 0.0
    return float(temporal_loss_torch(torch.as_tensor(v), torch.as_tensor(j)))


def total_loss(rec, prior, temp, config: FitConfig):
    return rec + config.lambda_prior * prior + config.lambda_temp * temp


class _Objective:
    """Loss over the optimized rotation channels, everything else held fixed."""

    def __init__(self, init, detections, camera, tree, priors, regressor, config, opt_joints):
        self.tree = tree
        self.config = config
        self.priors = priors or PriorSet()
        self.opt = list(opt_joints)
        self.base = torch.as_tensor(init.joint_rotations(tree))
        self.transl = None if init.transl is None else torch.as_tensor(init.transl)
        self.j2d = torch.as_tensor(detections.joints2d)
        self.conf = torch.as_tensor(detections.confidence)
        self.K = torch.tensor(camera.K)
        self.W = regressor.dense_torch() if regressor is not None else None

    def terms(self, x: torch.Tensor):
        rot = self.base.clone()
        rot[:, self.opt] = x
        joints, grots = fk_torch(self.tree, rot, self.transl)
        rec = reprojection_loss_torch(self.j2d, self.conf, joints, self.K)
        prior = self.priors.total_torch(joints, grots) if self.priors else joints.new_zeros(())
        if joints.shape[0] > 1:
            verts = self.W @ joints if self.W is not None else joints[:, :0]
            temp = temporal_loss_torch(verts, joints)
        else:
            temp = joints.new_zeros(())
        return rec, prior, temp

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return total_loss(*self.terms(x), self.config)

    def value_and_grad(self, x: torch.Tensor):
        x = x.detach().requires_grad_(True)
        loss = self(x)
        (grad,) = torch.autograd.grad(loss, x)
        return loss.detach(), grad


@dataclass
class FitResult:
    params: ParamSequence
    loss_trace: list[float] = field(default_factory=list)
    n_iters: int = 0
    converged: bool = False

    def trace_json(self) -> str:
        return json.dumps({"loss": self.loss_trace, "iterations": self.n_iters, "converged": self.converged})


def fit_sequence(
    init: ParamSequence,
    detections: Detections,
    camera: Camera,
    tree: KinematicTree,
    priors: PriorSet | None,
    regressor: VertexRegressor | None,
    config: FitConfig | None = None,
) -> FitResult:
    """Adam-direction descent with a backtracking guard; the loss trace never increases."""
    config = config or FitConfig()
    init.check_tree(tree)
    if detections.joints2d.shape[:2] != (init.n_frames, tree.joint_count):
        raise ShapeError(
            f"detections cover {detections.joints2d.shape[:2]}, expected ({init.n_frames}, {tree.joint_count})"
        )
    if not detections.confidence.any():
        raise DegenerateInputError("all detection confidences are zero")
    opt_joints = config.joints_for(tree)
    objective = _Objective(init, detections, camera, tree, priors, regressor, config, opt_joints)

    x = objective.base[:, opt_joints].clone()
    loss, grad = objective.value_and_grad(x)
    if not torch.isfinite(loss) or not torch.isfinite(grad).all():
        raise DivergenceError(0)
    trace = [float(loss)]
    m = torch.zeros_like(x)
    v = torch.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    scale = 1.0
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        step = config.step_size * (m / (1 - b1**it)) / (torch.sqrt(v / (1 - b2**it)) + eps)
        accepted = None
        with torch.no_grad():
            for _ in range(config.max_backtracks):
                trial = x - scale * step
                trial_loss = objective(trial)
                if not torch.isfinite(trial_loss):
                    raise DivergenceError(it)
                if trial_loss <= loss:
                    accepted = trial
                    break
                scale *= 0.5
        if accepted is None:
            converged = True
            break
        rel = float((loss - trial_loss) / max(float(loss), 1e-12))
        x = accepted
        loss, grad = objective.value_and_grad(x)
        if not torch.isfinite(loss) or not torch.isfinite(grad).all():
            raise DivergenceError(it)
        trace.append(float(loss))
        scale = min(1.0, scale * 2.0)
        if rel < config.convergence_tol:
            converged = True
            break
    logger.debug("fit finished after %d iterations, loss %.6g -> %.6g", it, trace[0], trace[-1])

    rot = init.joint_rotations(tree)
    rot[:, opt_joints] = x.detach().numpy()
    return FitResult(init.with_joint_rotations(tree, rot), trace, it, converged)


class SequenceFitter(BaseEstimator):
    """Estimator wrapper around :func:`fit_sequence`.

    ``fit(detections, init)`` stores the refined sequence in ``params_`` and
    the per-iteration loss in ``loss_trace_``.
    """

    def __init__(
        self,
        tree: KinematicTree | None = None,
        camera: Camera | None = None,
        priors: PriorSet | None = None,
        regressor: VertexRegressor | None = None,
        lambda_prior: float = 0.1,
        lambda_temp: float = 1.0,
        max_iters: int = 200,
        step_size: float = 0.01,
        convergence_tol: float = 1e-5,
        optimized_joints=None,
    ):
        self.tree = tree
        self.camera = camera
        self.priors = priors
        self.regressor = regressor
        self.lambda_prior = lambda_prior
        self.lambda_temp = lambda_temp
        self.max_iters = max_iters
        self.step_size = step_size
        self.convergence_tol = convergence_tol
        self.optimized_joints = optimized_joints

    def _config(self) -> FitConfig:
        return FitConfig(
            self.lambda_prior, self.lambda_temp, self.max_iters, self.step_size, self.convergence_tol,
            self.optimized_joints,
        )

    def fit(self, detections: Detections, init: ParamSequence):
        tree = self.tree or default_tree()
        regressor = self.regressor or default_regressor(tree)
        result = fit_sequence(init, detections, self.camera or Camera(), tree, self.priors, regressor, self._config())
        self.params_ = result.params
        self.loss_trace_ = result.loss_trace
        self.n_iter_ = result.n_iters
        return self

    def transform(self, detections: Detections, init: ParamSequence) -> ParamSequence:
        return self.fit(detections, init).params_
