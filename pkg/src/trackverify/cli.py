"""Command-line pipeline: gen -> perturb -> train -> score -> select -> eval -> plot.

Every subcommand takes --seed, logs its effective seeds to stderr, and is
deterministic: rerunning with identical inputs and seed writes byte-identical
files. Exit codes: 0 success, 1 bad arguments or inputs, 2 runtime failure
(divergence, non-finite values, gradient check over tolerance). --out
defaults to the TRACKVERIFY_OUT environment variable, then the current
directory. Values from a --config file override the corresponding flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .config import ConfigBundle, ConfigError, resolve_configs
from .features import ModelConfig
from .metrics import evaluate_tracks, report_from_obj
from .perturb import PerturbationConfig, generate_candidates
from .plots import plot_error_curve, plot_selector_bars
from .selection import (
    SELECTOR_KINDS,
    PseudoLabel,
    agreement_select,
    fuse_pseudo_label,
    geometric_median_fuse,
    kalman_cv_select,
    min_acceleration_select,
    oracle_select,
    random_teacher_select,
)
from .training import (
    TrainingDiverged,
    load_checkpoint,
    make_verifier,
    target_rows,
    train,
    verifier_gradient_check,
)
from .trajectory import (
    CandidateSet,
    QueryPoint,
    ReliabilityScores,
    Trajectory,
    candidates_from_obj,
    candidates_to_obj,
    dump_json,
    load_json,
    trajectory_from_obj,
    trajectory_to_obj,
)
from .transformer import verify
from .world import (
    VideoFeatureProvider,
    WorldConfig,
    generate_video,
    ground_truth_tracks,
    read_dataset,
    render_features,
    write_dataset,
)

__all__ = ["main"]

OUT_ENV = "TRACKVERIFY_OUT"

logger = logging.getLogger("trackverify")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is exit 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _default_out() -> Path:
    return Path(os.environ.get(OUT_ENV) or ".")


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out) if args.out else _default_out()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _configs(args: argparse.Namespace, flags: dict[str, Any]) -> ConfigBundle:
    return resolve_configs(flags, getattr(args, "config", None))


# --- track index files --------------------------------------------------------


def _load_index(tracks_path: str | Path) -> tuple[Path, dict[str, Any]]:
    """tracks.json (or its directory) -> (directory, parsed index)."""
    path = Path(tracks_path)
    if path.is_dir():
        path = path / "tracks.json"
    index = load_json(path)
    return path.parent, index


def _load_candidates(path: Path) -> tuple[CandidateSet, QueryPoint, np.ndarray | None, dict]:
    candidates, obj = candidates_from_obj(load_json(path))
    q = obj["query"]
    query = QueryPoint(t0=int(q["t0"]), pos=np.asarray(q["pos"], dtype=np.float64))
    votes = None
    if "visibility" in obj:
        votes = np.asarray(obj["visibility"], dtype=bool)
    return candidates, query, votes, obj


def _pseudo_to_obj(label: PseudoLabel) -> dict[str, Any]:
    obj = trajectory_to_obj(label.trajectory)
    obj["provenance"] = [int(p) for p in label.provenance]
    return obj


def _pseudo_from_obj(obj: dict[str, Any]) -> Trajectory:
    return trajectory_from_obj(obj)


# --- subcommands ---------------------------------------------------------------


def _cmd_gen(args: argparse.Namespace) -> int:
    flags = {
        "world.frames": args.frames,
        "world.height": args.height,
        "world.width": args.width,
        "world.d_raw": args.d_raw,
        "world.n_anchors": args.anchors,
        "world.sigma_app": args.sigma_app,
        "world.noise_std": args.noise_std,
        "world.occlusion_rate": args.occlusion_rate,
    }
    bundle = _configs(args, flags)
    if args.videos < 1:
        raise _UsageError("gen: --videos must be >= 1")
    out = _out_dir(args)
    logger.info("gen: %d videos, seed %d -> %s", args.videos, args.seed, out)
    ids = write_dataset(out, bundle.world, args.videos, args.seed)
    print(f"wrote {len(ids)} videos to {out}")
    return 0


def _queried_first_with_neighbors(video) -> list[tuple[QueryPoint, Trajectory, list[Trajectory]]]:
    """Per anchor with any visible frame: (query at first visible frame,
    ground truth over [t0, T), the other anchors' tracks over the same range)."""
    masks = [a.visibility_mask() for a in video.anchors]
    out = []
    for i, anchor in enumerate(video.anchors):
        visible = np.flatnonzero(masks[i])
        if len(visible) == 0:
            continue
        t0 = int(visible[0])
        gt = Trajectory(start=t0, positions=anchor.path[t0:], visibility=masks[i][t0:])
        neighbors = [
            Trajectory(start=t0, positions=other.path[t0:], visibility=masks[j][t0:])
            for j, other in enumerate(video.anchors)
            if j != i
        ]
        out.append((QueryPoint(t0=t0, pos=anchor.path[t0]), gt, neighbors))
    return out


def _cmd_perturb(args: argparse.Namespace) -> int:
    flags = {
        "perturb.m_candidates": args.m,
        "perturb.base_noise_std": args.base_noise_std,
    }
    bundle = _configs(args, flags)
    out = _out_dir(args)
    datasets = read_dataset(args.data)
    logger.info(
        "perturb: %d videos, M=%d, seed %d -> %s",
        len(datasets), bundle.perturb.m_candidates, args.seed, out,
    )
    entries = []
    for vi, (video_id, video) in enumerate(datasets):
        for qi, (query, gt, neighbors) in enumerate(_queried_first_with_neighbors(video)):
            rng = np.random.default_rng([args.seed, vi, qi])
            candidates = generate_candidates(gt, neighbors, bundle.perturb, rng)
            track_id = f"{video_id}_q{qi:02d}"
            votes = np.tile(gt.visibility[:, None], (1, candidates.num_candidates))
            dump_json(trajectory_to_obj(gt), out / f"{track_id}.gt.json")
            dump_json(
                candidates_to_obj(
                    candidates,
                    query={"t0": query.t0, "pos": [float(v) for v in query.pos]},
                    visibility=[[bool(v) for v in row] for row in votes],
                    video=video_id,
                ),
                out / f"{track_id}.cand.json",
            )
            entries.append({
                "id": track_id,
                "video": video_id,
                "gt": f"{track_id}.gt.json",
                "candidates": f"{track_id}.cand.json",
            })
    dump_json(
        {"seed": args.seed, "m": bundle.perturb.m_candidates, "tracks": entries},
        out / "tracks.json",
    )
    print(f"wrote {len(entries)} candidate sets to {out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    flags = {
        "train.seed": args.seed,
        "train.max_steps": args.steps,
        "train.epochs": args.epochs,
        "train.batch_size": args.batch_size,
        "train.peak_lr": args.lr,
        "train.checkpoint_every": args.checkpoint_every,
        "train.m_low": args.m_low,
        "train.m_high": args.m_high,
    }
    bundle = _configs(args, flags)
    out = _out_dir(args)
    videos = [video for _, video in read_dataset(args.data)]
    resume = load_checkpoint(args.resume) if args.resume else None
    model_cfg = resume.model_config if resume is not None else bundle.model
    checkpoint_path = out / "checkpoint.tvc"
    log_path = out / "train_log.jsonl"
    logger.info(
        "train: %d videos, %d steps, batch %d, seed %d -> %s",
        len(videos), bundle.train.max_steps, bundle.train.batch_size,
        bundle.train.seed, checkpoint_path,
    )
    result = train(
        videos,
        bundle.train,
        model_cfg,
        bundle.perturb,
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        resume=resume,
    )
    final_loss = result.log[-1]["loss"] if result.log else float("nan")
    print(
        f"trained {result.steps_run} steps, final loss {final_loss:.4f}, "
        f"checkpoint {result.checkpoint_path}"
    )
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    if args.workers < 1:
        raise _UsageError("score: --workers must be >= 1")
    ckpt = load_checkpoint(args.checkpoint)
    verifier = ckpt.verifier
    verifier.eval()
    tracks_dir, index = _load_index(args.tracks)
    out = _out_dir(args) if args.out else tracks_dir
    videos = dict(read_dataset(args.data))
    needed = {entry["video"] for entry in index["tracks"]}
    missing = sorted(needed - videos.keys())
    if missing:
        raise ValueError(f"tracks reference videos missing from {args.data}: {missing}")
    providers = {vid: VideoFeatureProvider(videos[vid]) for vid in sorted(needed)}
    logger.info(
        "score: %d tracks, checkpoint step %d -> %s", len(index["tracks"]), ckpt.step, out,
    )

    def one(entry: dict[str, Any]) -> tuple[int, ReliabilityScores]:
        candidates, query, _, _ = _load_candidates(tracks_dir / entry["candidates"])
        provider = providers[entry["video"]]
        return candidates.start, verify(provider, query, candidates, verifier)

    entries = index["tracks"]
    if args.workers == 1:
        scored = [one(entry) for entry in entries]
    else:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            scored = list(pool.map(one, entries))
    for entry, (start, scores) in zip(entries, scored):
        dump_json(
            {"start": start, "scores": [[float(v) for v in row] for row in scores.scores]},
            out / f"{entry['id']}.scores.json",
        )
    print(f"scored {len(entries)} tracks to {out}")
    return 0


def _select_one(
    method: str,
    candidates: CandidateSet,
    votes: np.ndarray | None,
    *,
    scores: ReliabilityScores | None = None,
    gt: Trajectory | None = None,
    seed: int = 0,
    track_index: int = 0,
) -> PseudoLabel:
    if method == "verifier":
        if scores is None:
            raise _UsageError("select: --method verifier needs reliability scores (--scores)")
        return fuse_pseudo_label(candidates, scores, votes)
    if method == "oracle":
        if gt is None:
            raise _UsageError("select: --method oracle needs the ground-truth file (--gt)")
        return oracle_select(candidates, gt)
    if method == "random_teacher":
        return random_teacher_select(
            candidates, seed=seed, track_index=track_index, teacher_visibility=votes,
        )
    if method == "geometric_median":
        return geometric_median_fuse(candidates, votes)
    if method == "agreement":
        return agreement_select(candidates, votes)
    if method == "kalman_cv":
        return kalman_cv_select(candidates, votes)
    if method == "min_acceleration":
        return min_acceleration_select(candidates, votes)
    raise _UsageError(f"select: unknown method {method!r}")


def _load_scores(path: Path) -> ReliabilityScores:
    obj = load_json(path)
    return ReliabilityScores(scores=np.asarray(obj["scores"], dtype=np.float64))


def _cmd_select(args: argparse.Namespace) -> int:
    if (args.tracks is None) == (args.cand is None):
        raise _UsageError("select: give exactly one of --tracks or --cand")
    if args.cand is not None:
        candidates, _, votes, _ = _load_candidates(Path(args.cand))
        scores = _load_scores(Path(args.scores)) if args.scores else None
        gt = trajectory_from_obj(load_json(args.gt)) if args.gt else None
        label = _select_one(
            args.method, candidates, votes,
            scores=scores, gt=gt, seed=args.seed, track_index=args.track_index,
        )
        out_path = Path(args.out) if args.out else Path(
            str(args.cand).replace(".cand.json", "") + ".pseudo.json"
        )
        dump_json(_pseudo_to_obj(label), out_path)
        print(f"wrote {out_path}")
        return 0

    tracks_dir, index = _load_index(args.tracks)
    out = _out_dir(args) if args.out else tracks_dir
    scores_dir = Path(args.scores) if args.scores else tracks_dir
    logger.info(
        "select: method %s over %d tracks -> %s", args.method, len(index["tracks"]), out,
    )
    for i, entry in enumerate(index["tracks"]):
        candidates, _, votes, _ = _load_candidates(tracks_dir / entry["candidates"])
        scores = None
        gt = None
        if args.method == "verifier":
            scores = _load_scores(scores_dir / f"{entry['id']}.scores.json")
        if args.method == "oracle":
            gt = trajectory_from_obj(load_json(tracks_dir / entry["gt"]))
        label = _select_one(
            args.method, candidates, votes,
            scores=scores, gt=gt, seed=args.seed, track_index=i,
        )
        dump_json(_pseudo_to_obj(label), out / f"{entry['id']}.pseudo.json")
    print(f"selected {len(index['tracks'])} pseudo-labels to {out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    if args.tracks is not None:
        tracks_dir, index = _load_index(args.tracks)
        pred_dir = Path(args.pred) if args.pred else tracks_dir
        pairs = []
        for entry in index["tracks"]:
            pred = _pseudo_from_obj(load_json(pred_dir / f"{entry['id']}.pseudo.json"))
            gt = trajectory_from_obj(load_json(tracks_dir / entry["gt"]))
            pairs.append((pred, gt))
    else:
        if args.pred is None or args.gt is None:
            raise _UsageError("eval: give --tracks, or both --pred and --gt files")
        pairs = [(
            _pseudo_from_obj(load_json(args.pred)),
            trajectory_from_obj(load_json(args.gt)),
        )]
    report = evaluate_tracks(pairs, delta_mode=args.delta_mode)
    obj = report.to_obj()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        dump_json(obj, args.out)
    print(
        f"tracks={report.num_tracks} delta_avg={report.delta_avg:.4f} "
        f"OA={report.occlusion_accuracy:.4f} AJ={report.average_jaccard:.4f}"
    )
    return 0


def _cmd_plot_curve(args: argparse.Namespace) -> int:
    pred = _pseudo_from_obj(load_json(args.pred))
    gt = trajectory_from_obj(load_json(args.gt))
    path = plot_error_curve(pred, gt, args.out, title=args.title)
    print(f"wrote {path}")
    return 0


def _cmd_plot_bars(args: argparse.Namespace) -> int:
    reports = {}
    for spec_arg in args.report:
        name, _, path = spec_arg.partition("=")
        if not path:
            raise _UsageError("plot bars: --report expects NAME=FILE")
        reports[name] = report_from_obj(load_json(path))
    path = plot_selector_bars(reports, args.out)
    print(f"wrote {path}")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    world = WorldConfig(
        frames=args.frames, height=16, width=16, d_raw=args.d_raw,
        n_anchors=4, occlusion_rate=0.0,
    )
    model_cfg = ModelConfig(d_raw=args.d_raw, d_model=args.d_model, dropout=0.0)
    video = generate_video(world, args.seed)
    query, gt = ground_truth_tracks(video, 0)[0]
    neighbors = [t for _, t in ground_truth_tracks(video, 0)[1:]]
    rng = np.random.default_rng(args.seed)
    pcfg = PerturbationConfig(m_candidates=args.m)
    candidates = generate_candidates(gt, neighbors, pcfg, rng)

    verifier = make_verifier(model_cfg, args.seed, torch.float64)
    volume = np.stack([render_features(video, t) for t in range(world.frames)])
    grids = torch.from_numpy(volume).to(torch.float64).unsqueeze(0)
    query_pos = torch.from_numpy(np.array(query.pos)).to(torch.float64).unsqueeze(0)
    centers = torch.from_numpy(np.array(candidates.positions)).to(torch.float64).unsqueeze(0)
    targets = torch.from_numpy(
        target_rows(candidates.positions, gt.positions, args.tau_s)
    ).to(torch.float64).unsqueeze(0)
    visibility = torch.from_numpy(gt.visibility.astype(np.float64)).unsqueeze(0)

    logger.info(
        "gradcheck: d_model=%d frames=%d M=%d eps=%g seed=%d",
        args.d_model, args.frames, args.m, args.eps, args.seed,
    )
    err = verifier_gradient_check(
        verifier, grids, query_pos, centers, targets, visibility,
        epsilon=args.eps, coords_per_param=args.coords, seed=args.seed,
    )
    print(f"max relative gradient error {err:.3e} (tolerance {args.tol:g})")
    return 0 if err < args.tol else 2


# --- parser --------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="trackverify", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_common(p: _Parser, config: bool = True) -> None:
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.add_argument("--out", default=None,
                       help=f"output location (default ${OUT_ENV} or '.')")
        if config:
            p.add_argument("--config", default=None,
                           help="flat dotted-key JSON config; overrides flags")

    p = sub.add_parser("gen", help="write a synthetic video dataset")
    add_common(p)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--workers", type=int, default=1,
                   help="accepted for parity; videos are independently seeded")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--d-raw", type=int, default=None)
    p.add_argument("--anchors", type=int, default=None)
    p.add_argument("--sigma-app", type=float, default=None)
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--occlusion-rate", type=float, default=None)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("perturb", help="corrupt ground-truth tracks into candidate sets")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen")
    p.add_argument("--m", type=int, default=None, help="candidates per track")
    p.add_argument("--base-noise-std", type=float, default=None)
    p.set_defaults(func=_cmd_perturb)

    p = sub.add_parser("train", help="train the verifier on perturbed tracks")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen")
    p.add_argument("--steps", type=int, default=None, help="max optimization steps")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="peak learning rate")
    p.add_argument("--m-low", type=int, default=None)
    p.add_argument("--m-high", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("score", help="score candidate sets with a trained verifier")
    add_common(p, config=False)
    p.add_argument("--data", required=True, help="dataset directory from gen")
    p.add_argument("--tracks", required=True, help="directory with tracks.json from perturb")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("select", help="fuse candidates into pseudo-labels")
    add_common(p, config=False)
    p.add_argument("--method", required=True, choices=SELECTOR_KINDS)
    p.add_argument("--tracks", default=None, help="directory with tracks.json")
    p.add_argument("--cand", default=None, help="single candidate JSON file")
    p.add_argument("--scores", default=None,
                   help="scores directory (batch) or file (single); default: tracks dir")
    p.add_argument("--gt", default=None, help="ground-truth JSON (single-file oracle)")
    p.add_argument("--track-index", type=int, default=0,
                   help="round-robin position for random_teacher in single-file mode")
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("eval", help="evaluate pseudo-labels against ground truth")
    add_common(p, config=False)
    p.add_argument("--tracks", default=None, help="directory with tracks.json")
    p.add_argument("--pred", default=None,
                   help="pseudo-label directory (with --tracks) or single file")
    p.add_argument("--gt", default=None, help="ground-truth JSON (single-file mode)")
    p.add_argument("--delta-mode", choices=("per_track", "pooled"), default="per_track")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("plot", help="render evaluation figures")
    plot_sub = p.add_subparsers(dest="plot_command", required=True, parser_class=_Parser)
    pc = plot_sub.add_parser("curve", help="per-frame error curve with occlusion shading")
    pc.add_argument("--pred", required=True)
    pc.add_argument("--gt", required=True)
    pc.add_argument("--out", required=True)
    pc.add_argument("--title", default=None)
    pc.set_defaults(func=_cmd_plot_curve)
    pb = plot_sub.add_parser("bars", help="selector comparison bar chart")
    pb.add_argument("--report", action="append", required=True, metavar="NAME=FILE")
    pb.add_argument("--out", required=True)
    pb.set_defaults(func=_cmd_plot_bars)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    add_common(p, config=False)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--d-raw", type=int, default=8)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--tau-s", type=float, default=0.3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=4)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(
            level=logging.INFO, stream=sys.stderr,
            format="%(levelname)s %(name)s: %(message)s",
        )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ConfigError, ValueError, KeyError, FileNotFoundError, NotADirectoryError) as exc:
        logger.error("%s", exc)
        return 1
    except (TrainingDiverged, FloatingPointError, RuntimeError, OSError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
