"""Synthetic pseudo-sign corpus, manifest persistence, and batch assembly.

Each lexicon token owns a fixed motion primitive: per-channel sinusoids
around a token-specific base pose. A sentence is its tokens' primitives
chained with short linear cross-fades.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kinematics import KinematicTree, default_tree
from .params import (
    DEFAULT_EXPRESSION_DIM,
    FormatError,
    ParamSequence,
    StateLayout,
    load_params,
    load_params_json,
    save_params,
)

MANIFEST_VERSION = 1
CROSSFADE_FRAMES = 4
SPLITS = ("train", "val", "test")

_WORDS = (
    "hello you name what where who why how when today tomorrow yesterday "
    "home school work family friend mother father child eat drink water "
    "food sleep happy sad tired good bad help want need like love "
    "learn teach read write sign language deaf hear see look go come "
    "stop wait again finish more please thanks sorry yes no maybe time "
    "day night week book car"
).split()


@dataclass
class Primitive:
    token: str
    duration: int
    base: np.ndarray
    amplitude: np.ndarray
    frequency: np.ndarray
    phase: np.ndarray
    limit: np.ndarray

    def render(self) -> np.ndarray:
        """``duration x D`` state frames."""
        tau = np.arange(self.duration)[:, None] / self.duration
        raw = self.base + self.amplitude * np.sin(2 * np.pi * self.frequency * tau + self.phase)
        return np.clip(raw, -self.limit, self.limit)


class Lexicon:
    """Deterministic token -> primitive table.

    ``channel_scale`` sets how strongly each joint group moves; hands and
    arms dominate, the torso barely moves.
    """

    def __init__(
        self,
        size: int = 64,
        seed: int = 0,
        tree: KinematicTree | None = None,
        n_expression: int = DEFAULT_EXPRESSION_DIM,
        duration_range: tuple[int, int] = (12, 22),
        joint_limit: float = 1.2,
    ):
        if size < 1:
            raise ValueError("lexicon must contain at least one token")
        self.tree = tree or default_tree()
        self.layout = StateLayout.from_tree(self.tree, n_expression)
        self.seed = seed
        words = list(_WORDS[:size]) + [f"tok{i}" for i in range(len(_WORDS), size)]
        rng = np.random.default_rng(seed)
        scale = self._channel_scale()
        rest = self._rest_pose()
        limit = np.full(self.layout.dim, joint_limit)
        limit[self.layout.pose_dim :] = 1.0
        self.primitives: dict[str, Primitive] = {}
        for w in words:
            D = self.layout.dim
            self.primitives[w] = Primitive(
                token=w,
                duration=int(rng.integers(duration_range[0], duration_range[1] + 1)),
                base=rest + scale * rng.uniform(-1.0, 1.0, D),
                amplitude=scale * rng.uniform(0.3, 0.8, D),
                frequency=rng.uniform(0.5, 2.0, D),
                phase=rng.uniform(0, 2 * np.pi, D),
                limit=limit,
            )

    def _channel_scale(self) -> np.ndarray:
        tree, lay = self.tree, self.layout
        scale = np.zeros(lay.dim)
        for j in tree.state_joint_order:
            ch = lay.joint_channels(tree, [j])
            if j in tree.hand_joints:
                scale[ch] = 0.5
            elif j in tree.arm_joints:
                scale[ch] = 0.35
            else:
                scale[ch] = 0.05
        scale[lay.pose_dim :] = 0.4
        return scale

    def _rest_pose(self) -> np.ndarray:
        """Elbows bent and forearms raised in front of the chest."""
        tree, lay = self.tree, self.layout
        rest = np.zeros(lay.dim)
        for name, aa in (
            ("l_shoulder", (0.0, 0.0, -0.9)),
            ("r_shoulder", (0.0, 0.0, 0.9)),
            ("l_elbow", (0.0, -1.2, 0.0)),
            ("r_elbow", (0.0, 1.2, 0.0)),
        ):
            if name in tree.names:
                rest[lay.joint_channels(tree, [tree.index(name)])] = aa
        return rest

    @property
    def tokens(self) -> list[str]:
        return list(self.primitives)

    def __len__(self) -> int:
        return len(self.primitives)

    def __getitem__(self, token: str) -> Primitive:
        return self.primitives[token]

    def pose_samples(self) -> np.ndarray:
        """All primitive frames stacked, ``N x D``; the feasible-pose training set."""
        return np.concatenate([p.render() for p in self.primitives.values()])

    def pose_rotations(self) -> np.ndarray:
        """The same frames as ``N x J x 3`` axis-angles in tree joint order."""
        states = self.pose_samples()
        return ParamSequence.from_state(states, self.layout).joint_rotations(self.tree)


@dataclass
class MotionSample:
    params: ParamSequence
    transcript: str
    id: str
    split: str = "train"
    segments: list[tuple[str, int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.transcript.strip():
            raise ValueError("transcript must be non-empty")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")


def split_for(sample_id: str) -> str:
    bucket = int(hashlib.sha256(sample_id.encode()).hexdigest(), 16) % 10
    return "train" if bucket < 8 else ("val" if bucket == 8 else "test")


def compose(lexicon: Lexicon, tokens: Sequence[str], crossfade: int = CROSSFADE_FRAMES):
    """Chain primitives with linear cross-fades; returns frames and ``(token, start, end)`` segments."""
    out = lexicon[tokens[0]].render()
    segments = [(tokens[0], 0, len(out))]
    for tok in tokens[1:]:
        nxt = lexicon[tok].render()
        k = min(crossfade, len(out), len(nxt))
        w = (np.arange(1, k + 1) / (k + 1))[:, None]
        blend = (1 - w) * out[len(out) - k :] + w * nxt[:k]
        start = len(out) - k
        out = np.concatenate([out[: len(out) - k], blend, nxt[k:]])
        segments.append((tok, start, start + len(nxt)))
    return out, segments


def generate_corpus(
    lexicon: Lexicon,
    sentence_count: int = 500,
    seed: int = 0,
    length_range: tuple[int, int] = (2, 6),
    fps: float = 30.0,
) -> list[MotionSample]:
    if len(lexicon) == 0:
        raise ValueError("lexicon is empty")
    rng = np.random.default_rng(seed)
    tokens = lexicon.tokens
    samples = []
    for i in range(sentence_count):
        n = int(rng.integers(length_range[0], length_range[1] + 1))
        words = [tokens[k] for k in rng.integers(0, len(tokens), n)]
        frames, segments = compose(lexicon, words)
        sid = f"syn-{seed}-{i:05d}"
        params = ParamSequence.from_state(frames, lexicon.layout, fps=fps)
        samples.append(MotionSample(params, " ".join(words), sid, split_for(sid), segments))
    return samples


def select_split(samples: Iterable[MotionSample], split: str) -> list[MotionSample]:
    return [s for s in samples if s.split == split]


def save_corpus(samples: Sequence[MotionSample], directory) -> Path:
    directory = Path(directory)
    (directory / "sequences").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rel = f"sequences/{s.id}.npz"
        save_params(directory / rel, s.params)
        rec = {"version": MANIFEST_VERSION, "id": s.id, "transcript": s.transcript, "split": s.split, "path": rel}
        if s.segments:
            rec["segments"] = [list(seg) for seg in s.segments]
        lines.append(json.dumps(rec))
    manifest = directory / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _record_to_sample(rec: dict, root: Path) -> MotionSample:
    missing = {"id", "transcript", "path"} - set(rec)
    if missing:
        raise FormatError(f"manifest record is missing {sorted(missing)}")
    if rec.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {rec.get('version')}")
    path = root / rec["path"]
    params = load_params_json(path) if path.suffix == ".json" else load_params(path)
    segments = [tuple(seg) for seg in rec.get("segments", [])]
    return MotionSample(params, rec["transcript"], rec["id"], rec.get("split") or split_for(rec["id"]), segments)


def load_corpus(directory) -> list[MotionSample]:
    directory = Path(directory)
    manifest = directory / "manifest.jsonl" if directory.is_dir() else directory
    root = manifest.parent
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest}:{lineno}: {exc}") from exc
        samples.append(_record_to_sample(rec, root))
    return samples


def load_annotation(path) -> MotionSample:
    """One externally fitted sequence: ``{"id", "transcript", "split"?, "params": {...}}``."""
    with open(path) as fh:
        rec = json.load(fh)
    missing = {"id", "transcript", "params"} - set(rec)
    if missing:
        raise FormatError(f"{path}: annotation is missing {sorted(missing)}")
    params = ParamSequence.from_dict(rec["params"])
    return MotionSample(params, rec["transcript"], rec["id"], rec.get("split") or split_for(rec["id"]))


def pad_batch(states: Sequence[np.ndarray], max_frames: int | None = None):
    """Stack variable-length ``F_i x D`` arrays into ``B x F x D`` plus a validity mask."""
    F = max_frames or max(len(s) for s in states)
    D = states[0].shape[1]
    out = np.zeros((len(states), F, D))
    mask = np.zeros((len(states), F), dtype=bool)
    for i, s in enumerate(states):
        n = min(len(s), F)
        out[i, :n] = s[:n]
        mask[i, :n] = True
    return out, mask
