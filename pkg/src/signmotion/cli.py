"""Command-line entry points.

Exit codes: 0 success, 1 user error (bad arguments, missing or malformed
files), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataset import Lexicon, generate_corpus, load_corpus, save_corpus, select_split
from .denoiser import ModelConfig
from .estimator import SignMotionDiffusion
from .fitting import Detections, FitConfig, fit_sequence
from .kinematics import Camera, default_regressor, default_tree, forward_kinematics, load_skeleton
from .metrics import evaluate, summary_row
from .params import FormatError, load_params, save_params
from .prior import PriorSet

logger = logging.getLogger("signmotion")

# ablation name -> (model config overrides, estimator overrides)
ABLATIONS = {
    "full": ({}, {}),
    "no-gnn": ({"encoder": "mlp"}, {}),
    "no-tokens": ({"tokens": False}, {}),
    "no-recurrence": ({"decoder": "none"}, {}),
    "frame-positional": ({"decoder": "frame-positional"}, {}),
    "attention-decoder": ({"decoder": "attention"}, {}),
    "toy-text": ({"text": "fixed"}, {"text_encoder": "toy"}),
    "wordbag-text": ({"text": "wordbag"}, {}),
}


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: invalid JSON: {exc}") from exc


def _tree(args):
    return load_skeleton(args.skeleton) if getattr(args, "skeleton", None) else default_tree()


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def joint_track(tree, seq) -> dict:
    """Per-frame joint positions for external viewers."""
    joints = forward_kinematics(tree, seq)
    return {"fps": seq.fps, "joint_names": list(tree.names), "parents": list(tree.parents), "frames": joints.tolist()}


def cmd_gen_data(args) -> None:
    lex = Lexicon(size=args.lexicon_size, seed=args.seed)
    samples = generate_corpus(lex, args.sentences, seed=args.seed)
    manifest = save_corpus(samples, args.out)
    counts = {k: len(select_split(samples, k)) for k in ("train", "val", "test")}
    print(f"wrote {len(samples)} sequences to {manifest} ({counts})")


def _parse_d(text: str):
    value = float(text)
    if 0 < value < 1:
        return value
    if value != int(value) or value < 1:
        raise argparse.ArgumentTypeError("--d must be a positive integer or a fraction in (0, 1)")
    return int(value)


def cmd_fit_prior(args) -> None:
    tree = _tree(args)
    if args.data:
        samples = load_corpus(args.data)
        rot = np.concatenate([s.params.joint_rotations(tree) for s in samples])
    else:
        rot = Lexicon(tree=tree, seed=args.seed).pose_rotations()
    priors = PriorSet.fit(tree, rot, n_components=args.d)
    priors.save(args.out)
    for name, (_, prior) in priors.items():
        print(f"{name}: d={prior.n_components_} explained={prior.explained_variance_ratio_.sum():.4f}")


def cmd_fit(args) -> None:
    tree = _tree(args)
    init = load_params(args.init)
    detections = Detections.load(args.detections)
    cam = _read_json(args.camera)
    try:
        camera = Camera.from_params(cam["fx"], cam["fy"], cam["cx"], cam["cy"])
    except KeyError as exc:
        raise UserError(f"{args.camera}: missing camera field {exc}") from exc
    try:
        config = FitConfig(**_read_json(args.config)) if args.config else FitConfig()
    except TypeError as exc:
        raise UserError(f"{args.config}: {exc}") from exc
    priors = PriorSet.load(args.priors) if args.priors else None
    result = fit_sequence(init, detections, camera, tree, priors, default_regressor(tree), config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(out, result.params)
    trace = Path(args.trace) if args.trace else out.with_suffix(".trace.json")
    trace.write_text(result.trace_json() + "\n")
    print(f"loss {result.loss_trace[0]:.6g} -> {result.loss_trace[-1]:.6g} in {result.n_iters} iterations")


def _estimator(args, model_overrides=None, est_overrides=None) -> SignMotionDiffusion:
    cfg = ModelConfig.from_dict(_read_json(args.model_config)) if args.model_config else ModelConfig.desk()
    if model_overrides:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), **model_overrides})
    kw = {}
    if args.schedule:
        sch = _read_json(args.schedule)
        kw = {"n_steps": int(sch.get("T", 100)), "beta_start": sch.get("beta_start"), "beta_end": sch.get("beta_end")}
    kw.update(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        text_encoder=args.text_encoder,
        text_endpoint=args.text_endpoint,
        text_cache=args.text_cache,
    )
    kw.update(est_overrides or {})
    return SignMotionDiffusion(model_config=cfg, tree=_tree(args), **kw)


def _train_split(args):
    samples = select_split(load_corpus(args.data), "train")
    if not samples:
        raise UserError(f"{args.data}: no training sequences")
    return samples


def cmd_train(args) -> None:
    train = _train_split(args)
    est = _estimator(args)
    if args.checkpoint_every:
        est.set_params(checkpoint_every=args.checkpoint_every, checkpoint_dir=str(Path(args.out) / "checkpoints"))
    est.fit([s.params for s in train], [s.transcript for s in train])
    est.save(args.out)
    _write_json(Path(args.out) / "loss.json", {"loss": est.loss_history_})
    if est.loss_history_:
        print(f"loss {est.loss_history_[0]:.4f} -> {est.loss_history_[-1]:.4f} over {len(est.loss_history_)} epochs")


def cmd_sample(args) -> None:
    est = SignMotionDiffusion.load(args.checkpoint)
    seq = est.sample(args.text, args.frames, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(out, seq)
    track = Path(args.joints) if args.joints else out.with_suffix(".joints.json")
    _write_json(track, joint_track(est.tree_, seq))
    print(f"wrote {out} and {track}")


def _generate(est, samples, seed):
    return est.predict([s.transcript for s in samples], [s.params.n_frames for s in samples], seed=seed)


def cmd_evaluate(args) -> None:
    truth = select_split(load_corpus(args.data), args.split)
    if not truth:
        raise UserError(f"{args.data}: no '{args.split}' sequences")
    if args.predictions:
        by_id = {s.id: s for s in load_corpus(args.predictions)}
        missing = [s.id for s in truth if s.id not in by_id]
        if missing:
            raise UserError(f"predictions lack {len(missing)} ids, e.g. {missing[0]}")
        preds = [by_id[s.id].params for s in truth]
        tree = _tree(args)
    elif args.checkpoint:
        est = SignMotionDiffusion.load(args.checkpoint)
        preds = _generate(est, truth, args.seed)
        tree = est.tree_
    else:
        raise UserError("need --checkpoint or --predictions")
    report = evaluate(preds, [s.params for s in truth], tree, default_regressor(tree))
    report["split"] = args.split
    report["count"] = len(truth)
    _write_json(args.report, report)
    for region in ("body", "left_hand", "right_hand"):
        r = report[region]
        print(f"{region:>10}: MPVPE {r['MPVPE']:.2f} MPJPE {r['MPJPE']:.2f} FID {r['FID']:.3f} DTW {r['DTW']:.2f}")


def cmd_ablate(args) -> None:
    model_over, est_over = ABLATIONS[args.variant]
    corpus = load_corpus(args.data)
    train = select_split(corpus, "train")
    test = select_split(corpus, args.split)
    est = _estimator(args, model_over, est_over)
    est.fit([s.params for s in train], [s.transcript for s in train])
    if args.out:
        est.save(args.out)
    tree = est.tree_
    row = {"variant": args.variant, "seed": args.seed, "epochs": args.epochs}
    row.update(summary_row(_generate(est, test, args.seed), [s.params for s in test], tree, default_regressor(tree)))
    if args.report:
        _write_json(args.report, row)
    print(json.dumps(row))


def _training_flags(p) -> None:
    p.add_argument("--model-config", help="model config JSON (default: desk-scale widths)")
    p.add_argument("--schedule", help='schedule JSON {"T", "beta_start", "beta_end"}')
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--text-encoder", choices=("toy", "external"), default="toy")
    p.add_argument("--text-endpoint")
    p.add_argument("--text-cache")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="signmotion", description="Text-conditioned sign motion diffusion toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--skeleton", help="skeleton JSON (default: built-in 16-joint upper body)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="build the synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--sentences", type=int, default=500)
    p.add_argument("--lexicon-size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-prior", help="train the PCA pose priors")
    p.add_argument("--data", help="corpus directory (default: the lexicon's primitive poses)")
    p.add_argument("--d", type=_parse_d, default=0.95, help="component count, or explained-variance fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_prior)

    p = sub.add_parser("fit", help="refine a parameter sequence against 2D detections")
    p.add_argument("--init", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--camera", required=True, help='camera JSON {"fx", "fy", "cx", "cy"}')
    p.add_argument("--config", help="fitting config JSON")
    p.add_argument("--priors", help="prior directory written by fit-prior")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="loss trace JSON (default: next to --out)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train the diffusion model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint-every", type=int, default=0)
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate one motion for a transcript")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--joints", help="joint-track JSON (default: next to --out)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="per-region error report")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="corpus directory of precomputed sequences with matching ids")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score one model variant")
    p.add_argument("--variant", choices=sorted(ABLATIONS), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", help="where to keep the trained variant")
    p.add_argument("--report", help="row JSON")
    _training_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UserError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"signmotion: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"signmotion: internal error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
