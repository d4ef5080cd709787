"""PCA subspace prior over posed joint positions.

A prior is fit on flattened positions of a joint subset expressed in the
frame of an anchor joint, so a hand prior does not care where the arm is.
The plausibility score of a pose is the distance between it and its
projection onto the principal subspace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ShapeError, check_samples
from .kinematics import KinematicTree, fk_torch
from .params import FORMAT_VERSION, FormatError, read_npz

PRIOR_MAGIC = "signmotion.prior"


class PosePrior(TransformerMixin, BaseEstimator):
    """Linear subspace prior.

    Parameters
    ----------
    n_components : int or float
        Number of principal directions kept. A float in (0, 1) keeps the
        smallest count reaching that fraction of explained variance.
    max_components : int
        Upper bound applied when ``n_components`` is a fraction.
    """

    def __init__(self, n_components=12, max_components: int = 12):
        self.n_components = n_components
        self.max_components = max_components

    def fit(self, X, y=None):
        X = check_samples(X, min_samples=2)
        K, D = X.shape
        mean = X.mean(axis=0)
        _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
        var = s**2
        ratio = var / var.sum() if var.sum() > 0 else np.zeros_like(var)
        if isinstance(self.n_components, float) and 0 < self.n_components < 1:
            d = int(np.searchsorted(np.cumsum(ratio), self.n_components - 1e-12) + 1)
            d = max(1, min(d, self.max_components, len(s)))
        else:
            d = int(self.n_components)
            if d < 1 or d > min(K, D):
                raise ValueError(f"invalid component count {d}: need 1 <= d <= min({K}, {D})")
        self.mean_ = mean
        self.components_ = vt[:d].copy()
        self.n_components_ = d
        self.explained_variance_ratio_ = ratio[:d]
        self.n_features_in_ = D
        self.threshold_ = float(np.percentile(self.score_samples(X), 99))
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "components_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise ShapeError(f"prior expects {self.n_features_in_} features, got {X.shape[-1]}")
        return X

    def transform(self, X):
        X = self._check(X)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        return np.asarray(Z, dtype=np.float64) @ self.components_ + self.mean_

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def prior_loss(self, x) -> float:
        x = self._check(x)
        if x.ndim != 1:
            raise ShapeError("prior_loss takes one flattened pose; use score_samples for batches")
        return float(np.linalg.norm(x - self.reconstruct(x)))

    def score_samples(self, X) -> np.ndarray:
        X = self._check(X)
        return np.linalg.norm(X - self.reconstruct(X), axis=-1)

    def is_feasible(self, X) -> np.ndarray:
        return self.score_samples(X) <= self.threshold_

    def torch_loss(self, X: torch.Tensor) -> torch.Tensor:
        """Per-row loss on a tensor, differentiable in ``X``."""
        check_is_fitted(self, "components_")
        mu = torch.as_tensor(self.mean_, dtype=X.dtype)
        U = torch.as_tensor(self.components_, dtype=X.dtype)
        centered = X - mu
        resid = centered - (centered @ U.T) @ U
        return torch.linalg.vector_norm(resid, dim=-1)


def fit_prior(samples, d) -> PosePrior:
    return PosePrior(n_components=d).fit(samples)


def prior_loss(prior: PosePrior, X) -> float:
    return prior.prior_loss(X)


@dataclass(frozen=True)
class PriorSpec:
    """Which joints a prior covers and in whose frame their positions are expressed."""

    name: str
    joints: tuple[int, ...]
    anchor: int


def default_prior_specs(tree: KinematicTree) -> list[PriorSpec]:
    specs = []
    for name, hand in (("left_hand", tree.left_hand_joints), ("right_hand", tree.right_hand_joints)):
        if hand:
            specs.append(PriorSpec(name, tuple(hand), tree.parents[min(hand)]))
    if tree.arm_joints:
        wrists = tuple(c for j in tree.arm_joints for c in tree.children[j] if c in tree.hand_joints)
        joints = tuple(sorted(set(tree.arm_joints) | set(wrists)))
        specs.append(PriorSpec("arms", joints, tree.parents[min(tree.arm_joints)]))
    return specs


def pose_features_torch(joints: torch.Tensor, global_rots: torch.Tensor, spec: PriorSpec) -> torch.Tensor:
    """``(..., J, 3)`` positions to ``(..., N*3)`` positions in the anchor frame."""
    rel = joints[..., list(spec.joints), :] - joints[..., spec.anchor : spec.anchor + 1, :]
    R = global_rots[..., spec.anchor, :, :]
    local = rel @ R
    return local.reshape(local.shape[:-2] + (-1,))


def pose_features(tree: KinematicTree, rotations, spec: PriorSpec) -> np.ndarray:
    """Prior features from ``(..., J, 3)`` axis-angle rotations in tree order."""
    with torch.no_grad():
        joints, rots = fk_torch(tree, torch.as_tensor(np.asarray(rotations, dtype=np.float64)))
        return pose_features_torch(joints, rots, spec).numpy()


class PriorSet(dict):
    """Named priors with their joint specs: ``{name: (PriorSpec, PosePrior)}``."""

    @classmethod
    def fit(cls, tree: KinematicTree, rotations, n_components=0.95, specs: Sequence[PriorSpec] | None = None):
        rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, tree.joint_count, 3)
        out = cls()
        for spec in specs or default_prior_specs(tree):
            feats = pose_features(tree, rotations, spec)
            nc = n_components
            if isinstance(nc, (int, np.integer)):
                nc = min(int(nc), *feats.shape)
            out[spec.name] = (spec, PosePrior(n_components=nc).fit(feats))
        return out

    def total_torch(self, joints: torch.Tensor, global_rots: torch.Tensor) -> torch.Tensor:
        """Sum over priors of the frame-averaged prior loss."""
        total = joints.new_zeros(())
        for spec, prior in self.values():
            total = total + prior.torch_loss(pose_features_torch(joints, global_rots, spec)).mean()
        return total

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, (spec, prior) in self.items():
            np.savez(
                directory / f"{name}.npz",
                magic=np.array(PRIOR_MAGIC),
                version=np.array(FORMAT_VERSION),
                mu=prior.mean_,
                U=prior.components_,
            )
            meta = {
                "d": prior.n_components_,
                "joint_subset": list(spec.joints),
                "anchor": spec.anchor,
                "threshold": prior.threshold_,
            }
            (directory / f"{name}.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory) -> "PriorSet":
        directory = Path(directory)
        out = cls()
        for sidecar in sorted(directory.glob("*.json")):
            name = sidecar.stem
            meta = json.loads(sidecar.read_text())
            data = read_npz(directory / f"{name}.npz", PRIOR_MAGIC)
            U, mu = data["U"], data["mu"]
            if U.shape != (meta["d"], mu.shape[0]):
                raise FormatError(f"{name}: basis shape {U.shape} disagrees with d={meta['d']}")
            prior = PosePrior(n_components=int(meta["d"]))
            prior.mean_, prior.components_ = mu, U
            prior.n_components_ = int(meta["d"])
            prior.n_features_in_ = mu.shape[0]
            prior.threshold_ = float(meta.get("threshold", np.inf))
            spec = PriorSpec(name, tuple(meta["joint_subset"]), int(meta["anchor"]))
            out[name] = (spec, prior)
        if not out:
            raise FormatError(f"{directory}: no prior files found")
        return out
