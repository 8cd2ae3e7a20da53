"""Command-line entry point.

Subcommands cover the whole pipeline: `gen-data` writes a synthetic
dataset, `train` runs one training stage, `infer` segments a directory of
frames from an instruction, `eval` scores prediction masks against ground
truth, and `gradcheck` verifies analytic gradients against central
differences.

Paths given to a subcommand are resolved relative to --root (default: the
current directory). Parallelism is opt-in per command via --threads, with
the TRAJSEG_THREADS environment variable as fallback; results do not
depend on the thread count.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import rle
from .autodiff import Tensor, no_grad
from .config import RunConfig, load_config, save_config
from .errors import ConfigError, InputError, TrajSegError
from .evaluation import build_report
from .frame_integration import FrameIntegrator
from .language import default_vocabulary
from .losses import LossWeights, stage1_loss, stage2_loss
from .maskgen import MaskGenerator
from .ops import GradCheckReport, grad_check, roi_align, scaled_dot_attention
from .synthetic import LoadedSample, generate_dataset, generate_scene, read_ppm
from .trajectory import ObjectTrajectory, TrajectoryEncoder
from .training import build_model, load_checkpoint, loss_weights, sample_forward, train


def _resolve(root: str, value) -> Path:
    path = Path(value)
    return path if path.is_absolute() else Path(root) / path


def _thread_count(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get("TRAJSEG_THREADS", "1")))


def _load_run_config(args, data_dir: Path | None = None) -> RunConfig:
    if args.config is not None:
        return load_config(_resolve(args.root, args.config))
    if data_dir is not None:
        stored = data_dir / "run.cfg"
        if stored.exists():
            return load_config(stored)
        raise ConfigError(f"no --config given and {stored} does not exist")
    return RunConfig()


# -- gen-data -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = _load_run_config(args)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    out = _resolve(args.root, args.out)
    if out.exists():
        if not out.is_dir():
            raise InputError(f"{out} exists and is not a directory")
        if any(out.iterdir()) and not args.force:
            raise InputError(f"output directory {out} is not empty (use --force to overwrite)")
    counts = generate_dataset(out, config, threads=_thread_count(args))
    save_config(out / "run.cfg", config)
    summary = " ".join(f"{split}={n}" for split, n in sorted(counts.items()))
    print(f"generated {summary} (seed {config.seed}) under {out}")
    return 0


# -- train --------------------------------------------------------------------


def cmd_train(args) -> int:
    data = _resolve(args.root, args.data)
    if not data.is_dir():
        raise ConfigError(f"dataset directory {data} does not exist")
    config = _load_run_config(args, data_dir=data)
    resume = None
    if args.resume is not None:
        resume = _resolve(args.root, args.resume)
        if not resume.is_file():
            raise ConfigError(f"checkpoint {resume} does not exist")
    result = train(data, config, args.stage, _resolve(args.root, args.out),
                   resume=resume, log=print)
    print(f"stage {args.stage} finished: loss {result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"curve: {result.curve}")
    return 0


# -- infer --------------------------------------------------------------------


def _read_video_frames(video_dir: Path) -> np.ndarray:
    paths = sorted(video_dir.glob("frame_*.ppm"))
    if not paths:
        raise InputError(f"no frame_*.ppm files under {video_dir}")
    return np.stack([read_ppm(p) for p in paths]).astype(np.float64) / 255.0


def cmd_infer(args) -> int:
    model, config = load_checkpoint(_resolve(args.root, args.checkpoint))
    frames = _read_video_frames(_resolve(args.root, args.video))
    instruction = model.vocab.encode(args.instruction)
    n_key = args.kf if args.kf is not None else config.key_frames
    with no_grad():
        generated, trajectory = model.infer(frames, instruction, n_key)
    out = _resolve(args.root, args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, mask in enumerate(trajectory.binary()):
        rle.write_mask(out / f"mask_{t:03d}.rle", mask)
    rows = ["frame,score,present"]
    for t, score in enumerate(trajectory.presence_scores()):
        rows.append(f"{t},{score:.6f},{int(score >= trajectory.threshold)}")
    (out / "presence.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    response = model.vocab.decode(generated)
    (out / "response.txt").write_text(response + "\n", encoding="utf-8")
    print(response)
    print(f"wrote {len(frames)} masks to {out}")
    return 0


# -- eval ---------------------------------------------------------------------


def _read_mask_dir(video_dir: Path, name: str) -> np.ndarray:
    masks = [rle.read_mask(p) for p in sorted(video_dir.glob("mask_*.rle"))]
    if not masks:
        raise InputError(f"{name}: no mask_*.rle files under {video_dir}")
    return np.stack(masks)


def cmd_eval(args) -> int:
    pred_root = _resolve(args.root, args.pred)
    gt_root = _resolve(args.root, args.gt)
    for path in (pred_root, gt_root):
        if not path.is_dir():
            raise InputError(f"{path} is not a directory")
    names = sorted(d.name for d in pred_root.iterdir() if d.is_dir())
    if not names:
        raise InputError(f"no prediction directories under {pred_root}")
    items = []
    for name in names:
        if not (gt_root / name).is_dir():
            raise InputError(f"{name}: no matching ground-truth directory under {gt_root}")
        pred = _read_mask_dir(pred_root / name, name)
        gt = _read_mask_dir(gt_root / name, name)
        if len(pred) != len(gt):
            raise InputError(f"{name}: {len(pred)} predicted frames vs {len(gt)} ground truth")
        if pred.shape[1:] != gt.shape[1:]:
            raise InputError(f"{name}: mask size {pred.shape[1:]} vs {gt.shape[1:]}")
        items.append((name, pred, gt))
    report = build_report(items, threads=_thread_count(args))
    print(report.to_table())
    if args.csv is not None:
        csv_path = _resolve(args.root, args.csv)
        csv_path.write_text(report.to_csv(), encoding="utf-8")
        print(f"wrote {csv_path}")
    return 0


# -- gradcheck ----------------------------------------------------------------


def _check_attention(seed: int) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    q = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    v = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    w = rng.normal(size=(3, 6))
    bias = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    plain = grad_check(
        lambda: (scaled_dot_attention(q, k, v) * w).sum(),
        {"q": q, "k": k, "v": v},
        name="attention",
    )
    biased = grad_check(
        lambda: (scaled_dot_attention(q, k, v, bias) * w).sum(),
        {"q": q, "k": k, "v": v, "bias": bias},
        name="attention_bias",
    )
    return [plain, biased]


def _check_roi(seed: int) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    features = Tensor(rng.normal(size=(5, 7, 3)), requires_grad=True)
    w = rng.normal(size=(4, 4, 3))
    box = (0.12, 0.2, 0.83, 0.94)
    report = grad_check(
        lambda: (roi_align(features, box, 4) * w).sum(),
        {"features": features},
        name="roi_align",
    )
    return [report]


def _check_fci(seed: int) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    integrator = FrameIntegrator(6, 6, rng)
    traj = Tensor(rng.normal(size=6), requires_grad=True)
    feats = [Tensor(rng.normal(size=(8, 6)), requires_grad=True) for _ in range(2)]
    ws = [rng.normal(size=6) for _ in range(2)]

    def fn():
        outs = integrator(traj, feats)
        return sum((o * w).sum() for o, w in zip(outs, ws))

    params = dict(integrator.named_parameters())
    params.update({"traj": traj, "feat0": feats[0], "feat1": feats[1]})
    return [grad_check(fn, params, name="frame_integration")]


def _check_trajectory(seed: int) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    encoder = TrajectoryEncoder(5, 3, 2, rng)
    feats = [Tensor(rng.normal(size=(6, 6, 5)), requires_grad=True) for _ in range(3)]
    traj = ObjectTrajectory(
        {0: (0.1, 0.15, 0.62, 0.7), 2: (0.3, 0.2, 0.9, 0.85)}, (True, False, True)
    )
    w = rng.normal(size=5)
    params = dict(encoder.named_parameters())
    params.update({"feat0": feats[0], "feat2": feats[2]})
    return [grad_check(lambda: (encoder(feats, traj) * w).sum(), params, name="trajectory_encoder")]


def _check_maskgen(seed: int) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    gen = MaskGenerator(6, (3, 3), 2, rng, capacity=2)
    # moderate scale keeps the sigmoid/softmax chain well away from the
    # saturated region, where central differences at eps 1e-3 go blunt
    feats = [Tensor(0.5 * rng.normal(size=(9, 6)), requires_grad=True) for _ in range(3)]
    tokens = {0: Tensor(0.5 * rng.normal(size=6), requires_grad=True),
              2: Tensor(0.5 * rng.normal(size=6), requires_grad=True)}
    ws = [rng.normal(size=(6, 6)) for _ in range(3)]

    def fn():
        out = gen.segment_video(feats, tokens, [0, 2])
        total = sum((p.logits * w).sum() for p, w in zip(out.predictions, ws))
        return total + sum((p.presence for p in out.predictions), Tensor(np.zeros(())))

    params = dict(gen.named_parameters())
    params.update({f"feat{t}": f for t, f in enumerate(feats)})
    params.update({f"token{t}": tok for t, tok in tokens.items()})
    return [grad_check(fn, params, name="mask_generator")]


def _check_losses(seed: int) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    text_logits = Tensor(rng.normal(size=(4, 9)), requires_grad=True)
    labels = rng.integers(0, 9, size=4)
    mask_logits = [Tensor(rng.normal(size=(8, 8)), requires_grad=True) for _ in range(3)]
    gts = [(rng.random(size=(8, 8)) < 0.4).astype(np.float64) for _ in range(3)]
    raw_presence = [Tensor(rng.normal(size=()), requires_grad=True) for _ in range(3)]
    presence_gt = [1, 0, 1]
    weights = LossWeights()

    def stage1_fn():
        return stage1_loss(text_logits, labels, mask_logits, gts, weights)[0]

    def stage2_fn():
        preds = [r.sigmoid() for r in raw_presence]
        return stage2_loss(text_logits, labels, preds, presence_gt, mask_logits, gts, weights)[0]

    params = {"text": text_logits}
    params.update({f"mask{t}": m for t, m in enumerate(mask_logits)})
    stage1_params = dict(params)
    params.update({f"presence{t}": r for t, r in enumerate(raw_presence)})
    return [
        grad_check(stage1_fn, stage1_params, name="stage1_loss"),
        grad_check(stage2_fn, params, name="stage2_loss"),
    ]


def _check_model(seed: int) -> list[GradCheckReport]:
    """End-to-end: captioning forward over a 3-frame clip, 2 key frames."""
    rng = np.random.default_rng(seed)
    config = RunConfig(
        channels=8, attn_dim=8, frame_size=16, roi_size=2, n_slots=2,
        memory_capacity=2, n_layers=1, n_heads=2, frames_per_video=3,
        key_frames=2, min_size=3, max_size=5, batch_size=1,
    )
    model = build_model(config, default_vocabulary(), rng)
    scene = generate_scene(
        rng, hw=(16, 16), frames=3, key_frames=2, size_range=(3.0, 5.0),
        max_distractors=1, absence_fraction=0.0, allow_motion=False,
    )
    item = LoadedSample(scene.kind, scene.frames, scene.masks, scene.description,
                        scene.presence, scene.key_frames, path="gradcheck")
    weights = loss_weights(config)
    everything = dict(model.named_parameters())
    picked = {
        name: everything[name]
        for name in (
            "patch_encoder.inner.weight",
            "reasoner.trj_proj.weight",
            "traj_encoder.proj.weight",
            "plh_projector.weight",
            "integrator.out_map.weight",
            "maskgen.hyper.weight",
            "maskgen.logit_bias",
        )
    }
    report = grad_check(
        lambda: sample_forward(model, item, "captioning", 1, weights)[0],
        picked,
        name="end_to_end",
        coord_limit=2,
        rng=np.random.default_rng(seed + 1),
    )
    return [report]


GRADCHECK_MODULES = {
    "attention": _check_attention,
    "roi": _check_roi,
    "fci": _check_fci,
    "trajectory": _check_trajectory,
    "maskgen": _check_maskgen,
    "losses": _check_losses,
    "model": _check_model,
}


def cmd_gradcheck(args) -> int:
    names = list(GRADCHECK_MODULES) if args.module == "all" else [args.module]
    reports = []
    for name in names:
        reports.extend(GRADCHECK_MODULES[name](args.seed))
    for report in reports:
        print(report)
    failed = [r for r in reports if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(reports)} gradient checks FAILED")
        return 1
    print(f"all {len(reports)} gradient checks passed")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajseg",
                                     description="video reasoning segmentation pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--root", default=".", help="base directory for relative paths")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--config", help="run config file (defaults omitted keys)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.add_argument("--threads", type=int, help="worker threads (default TRAJSEG_THREADS or 1)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="output directory for checkpoint and curve")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", help="run config file (default: <data>/run.cfg)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="segment a video from an instruction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True, help="directory of frame_*.ppm files")
    p.add_argument("--instruction", required=True, help="instruction text, vocabulary words only")
    p.add_argument("--out", required=True, help="directory for masks and presence csv")
    p.add_argument("--kf", type=int, help="number of key frames (default: checkpoint config)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True, help="directory of per-video prediction directories")
    p.add_argument("--gt", required=True, help="directory of per-video ground-truth directories")
    p.add_argument("--csv", help="also write the per-video report as csv")
    p.add_argument("--threads", type=int, help="worker threads (default TRAJSEG_THREADS or 1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--module", default="all", choices=sorted(GRADCHECK_MODULES) + ["all"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrajSegError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
