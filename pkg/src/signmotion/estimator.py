"""Text-to-motion diffusion as a scikit-learn style estimator."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .denoiser import ModelConfig, SignDenoiser
from .diffusion import (
    Normalizer,
    hand_loss_weights,
    make_schedule,
    p_sample_loop,
    scaled_betas,
    training_loss,
)
from .kinematics import KinematicTree, default_tree
from .params import FORMAT_VERSION, FormatError, ParamSequence, StateLayout, read_npz
from .text import ExternalTextEncoder, ToyTextEncoder, WordBagFeaturizer

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "signmotion.checkpoint"


def _as_config(cfg) -> ModelConfig:
    if cfg is None:
        return ModelConfig.desk()
    if isinstance(cfg, ModelConfig):
        return cfg
    return ModelConfig.from_dict(dict(cfg))


class SignMotionDiffusion(BaseEstimator):
    """Diffusion model over ``[body_pose || hand_pose || expression]`` sequences conditioned on text.

    ``fit(motions, transcripts)`` trains with Adam and a linearly decaying
    learning rate; ``predict(transcripts, n_frames)`` runs the reverse chain.
    Beta endpoints left as ``None`` are the usual 1000-step values rescaled
    to ``n_steps``.
    """

    def __init__(
        self,
        model_config=None,
        n_steps: int = 100,
        beta_start: float | None = None,
        beta_end: float | None = None,
        epochs: int = 50,
        batch_size: int = 32,
        lr: float = 1e-3,
        lr_end: float = 1e-6,
        hand_weight: float = 2.0,
        text_encoder: str = "toy",
        text_endpoint: str | None = None,
        text_cache: str | None = None,
        tree: KinematicTree | None = None,
        seed: int = 0,
        checkpoint_every: int = 0,
        checkpoint_dir: str | None = None,
    ):
        self.model_config = model_config
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_end = lr_end
        self.hand_weight = hand_weight
        self.text_encoder = text_encoder
        self.text_endpoint = text_endpoint
        self.text_cache = text_cache
        self.tree = tree
        self.seed = seed
        self.checkpoint_every = checkpoint_every
        self.checkpoint_dir = checkpoint_dir

    def _featurizer(self, cfg: ModelConfig):
        if cfg.text == "wordbag":
            return WordBagFeaturizer(cfg.wordbag_buckets)
        if self.text_encoder == "external":
            if not self.text_endpoint:
                raise ValueError("text_encoder='external' needs text_endpoint")
            return ExternalTextEncoder(self.text_endpoint, self.text_cache, cfg.text_dim)
        if self.text_encoder == "toy":
            return ToyTextEncoder(cfg.text_dim)
        raise ValueError(f"unknown text encoder {self.text_encoder!r}")

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "model_")
        return np.stack([self.featurizer_(t) for t in texts])

    def _setup(self, motions: Sequence[ParamSequence]):
        tree = self.tree or default_tree()
        cfg = _as_config(self.model_config)
        first = motions[0]
        first.check_tree(tree)
        self.tree_ = tree
        self.layout_ = first.layout
        self.fps_ = first.fps
        self.config_ = cfg
        lo, hi = scaled_betas(self.n_steps)
        self.schedule_ = make_schedule(
            self.n_steps,
            lo if self.beta_start is None else self.beta_start,
            hi if self.beta_end is None else self.beta_end,
        )
        self.featurizer_ = self._featurizer(cfg)
        torch.manual_seed(self.seed)
        self.model_ = SignDenoiser(tree, self.layout_, cfg)
        self.weights_ = hand_loss_weights(self.layout_, self.hand_weight)

    def fit(self, motions: Sequence[ParamSequence], transcripts: Sequence[str]):
        if len(motions) != len(transcripts) or not motions:
            raise ValueError("need one transcript per motion and at least one motion")
        self._setup(motions)
        states = [m.state() for m in motions]
        if any(s.shape[1] != self.layout_.dim for s in states):
            raise ValueError("all motions must share one state layout")
        self.normalizer_ = Normalizer().fit(states)
        data = [torch.as_tensor(self.normalizer_.transform(s), dtype=torch.float32) for s in states]
        cond = torch.as_tensor(self.encode_texts(transcripts), dtype=torch.float32)
        self.loss_history_ = []
        if self.epochs <= 0:
            return self

        model = self.model_
        opt = torch.optim.Adam(model.parameters(), lr=self.lr)
        n = len(data)
        steps_per_epoch = -(-n // self.batch_size)
        total = max(1, steps_per_epoch * self.epochs - 1)
        end_factor = self.lr_end / self.lr
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 1.0 + (end_factor - 1.0) * min(k, total) / total)
        gen = torch.Generator().manual_seed(self.seed)
        weights = torch.as_tensor(self.weights_, dtype=torch.float32)
        model.train()
        for epoch in range(self.epochs):
            perm = torch.randperm(n, generator=gen).tolist()
            losses = []
            for b in range(0, n, self.batch_size):
                idx = perm[b : b + self.batch_size]
                F = max(len(data[i]) for i in idx)
                x0 = torch.zeros(len(idx), F, self.layout_.dim)
                mask = torch.zeros(len(idx), F, dtype=torch.bool)
                for k, i in enumerate(idx):
                    x0[k, : len(data[i])] = data[i]
                    mask[k, : len(data[i])] = True
                t = torch.randint(1, self.schedule_.T + 1, (len(idx),), generator=gen)
                eps = torch.randn(x0.shape, generator=gen)
                loss = training_loss(model, x0, cond[idx], t, eps, weights, self.schedule_, mask)
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
                opt.step()
                sched.step()
                losses.append(loss.item())
            self.loss_history_.append(float(np.mean(losses)))
            logger.info("epoch %d/%d loss %.4f", epoch + 1, self.epochs, self.loss_history_[-1])
            if self.checkpoint_every and self.checkpoint_dir and (epoch + 1) % self.checkpoint_every == 0:
                self.save(Path(self.checkpoint_dir) / f"epoch_{epoch + 1:04d}")
        model.eval()
        return self

    def sample(self, transcript: str, n_frames: int, seed: int = 0) -> ParamSequence:
        return self.predict([transcript], [n_frames], seed=seed)[0]

    def predict(self, transcripts: Sequence[str], n_frames, seed: int = 0, batch_size: int = 64) -> list[ParamSequence]:
        """One generated sequence per transcript; ``n_frames`` is an int or one length per transcript."""
        check_is_fitted(self, "model_")
        lengths = [int(n_frames)] * len(transcripts) if np.isscalar(n_frames) else [int(n) for n in n_frames]
        if len(lengths) != len(transcripts):
            raise ValueError("need one frame count per transcript")
        cond = torch.as_tensor(self.encode_texts(transcripts), dtype=torch.float32)
        self.model_.eval()
        out = []
        for b in range(0, len(transcripts), batch_size):
            F = max(lengths[b : b + batch_size])
            x = self._reverse(cond[b : b + batch_size], F, seed + b, lengths[b : b + batch_size])
            for k, n in enumerate(lengths[b : b + batch_size]):
                state = self.normalizer_.inverse_transform(x[k, :n].double().numpy())
                out.append(ParamSequence.from_state(state, self.layout_, fps=self.fps_))
        return out

    def _reverse(self, cond, F, seed, lengths):
        model = self.model_
        if self.config_.decoder == "recurrent" or len(set(lengths)) == 1:
            return p_sample_loop(model, cond, F, self.schedule_, seed, self.layout_.dim)
        mask = torch.zeros(len(lengths), F, dtype=torch.bool)
        for k, n in enumerate(lengths):
            mask[k, :n] = True

        class _Masked(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.inner = model

            def forward(self, x, t, text, _mask):
                return self.inner(x, t, text, mask)

        return p_sample_loop(_Masked(), cond, F, self.schedule_, seed, self.layout_.dim)

    def save(self, directory) -> Path:
        check_is_fitted(self, "model_")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in self.model_.state_dict().items()}
        np.savez(directory / "weights.npz", magic=np.array(CHECKPOINT_MAGIC), version=np.array(FORMAT_VERSION), **arrays)
        meta = {
            "format_version": FORMAT_VERSION,
            "model_config": self.config_.to_dict(),
            "schedule": self.schedule_.to_dict(),
            "D": self.layout_.dim,
            "layout": [self.layout_.n_body_joints, self.layout_.n_hand_joints, self.layout_.n_expression],
            "normalization": {"mean": self.normalizer_.mean.tolist(), "std": self.normalizer_.std.tolist()},
            "skeleton": self.tree_.to_dict(),
            "fps": self.fps_,
            "estimator": {
                k: v for k, v in self.get_params().items() if k not in ("tree", "model_config")
            },
            "loss_history": self.loss_history_,
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=2))
        return directory

    @classmethod
    def load(cls, directory) -> "SignMotionDiffusion":
        directory = Path(directory)
        try:
            meta = json.loads((directory / "meta.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{directory}: unreadable checkpoint metadata: {exc}") from exc
        if meta.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"{directory}: unsupported checkpoint version {meta.get('format_version')}")
        data = read_npz(directory / "weights.npz", CHECKPOINT_MAGIC)
        tree = KinematicTree.from_dict(meta["skeleton"])
        est = cls(model_config=meta["model_config"], tree=tree, **meta["estimator"])
        est.tree_ = tree
        est.layout_ = StateLayout(*meta["layout"])
        est.fps_ = meta["fps"]
        est.config_ = ModelConfig.from_dict(meta["model_config"])
        sch = meta["schedule"]
        est.schedule_ = make_schedule(sch["T"], sch["beta_start"], sch["beta_end"])
        est.featurizer_ = est._featurizer(est.config_)
        est.model_ = SignDenoiser(tree, est.layout_, est.config_)
        state = {k[len("param/") :]: torch.as_tensor(v) for k, v in data.items() if k.startswith("param/")}
        est.model_.load_state_dict(state)
        est.model_.eval()
        est.weights_ = hand_loss_weights(est.layout_, est.hand_weight)
        norm = meta["normalization"]
        est.normalizer_ = Normalizer(norm["mean"], norm["std"])
        est.loss_history_ = meta.get("loss_history", [])
        return est

