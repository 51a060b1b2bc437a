"""Command-line orchestrator for the localization pipeline.

Subcommands cover every stage from simulation through training and
evaluation, plus a pipeline command chaining them. Configuration comes from
an optional JSON file with strict unknown-key rejection; command-line flags
override it. Logs are line-delimited JSON on stderr; artifacts are written
only to explicitly requested paths. Exit codes: 0 ok, 2 usage or input
error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import assoc, emtrain, placerec
from . import pose as posemod
from . import simworld
from .errors import (CorruptDataset, InvalidConfig, MissingVO, NoConsensus,
                     SeqlocError, TooFewValidDepths)
from .features import detect_keypoints, load_feature_map
from .geometry import StereoCamera


def _log(event: str, **kw) -> None:
    print(json.dumps({"event": event, **kw}, sort_keys=True), file=sys.stderr)


def _error(stage: str, exc: BaseException) -> None:
    print(json.dumps({
        "error": type(exc).__name__,
        "stage": stage,
        "message": str(exc),
    }, sort_keys=True), file=sys.stderr)


# input problems exit 2; failures inside a stage exit 3
_INPUT_ERRORS = (CorruptDataset, InvalidConfig, MissingVO, OSError,
                 json.JSONDecodeError, ValueError, KeyError, ImportError)


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class ValidateParams:
    e_sq: float = 0.25
    window: int = 10


@dataclass(frozen=True)
class GraphParams:
    k: int = 3


@dataclass(frozen=True)
class SampleParams:
    n: int = 1000
    src: int = 0
    dst: int | None = None  # None means the last experience


@dataclass
class PipelineConfig:
    dataset: str | None = None
    seed: int = 42
    threads: int = 1
    simulate: simworld.SimConfig = field(default_factory=simworld.SimConfig)
    seqslam: placerec.PlacerecParams = field(default_factory=placerec.PlacerecParams)
    validate: ValidateParams = field(default_factory=ValidateParams)
    graph: GraphParams = field(default_factory=GraphParams)
    sample: SampleParams = field(default_factory=SampleParams)
    pose: posemod.PoseParams = field(default_factory=posemod.PoseParams)
    train: emtrain.TrainConfig = field(default_factory=emtrain.TrainConfig)


def _section(cls, data: dict, where: str, special: dict | None = None):
    """Build a params dataclass from a JSON dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise InvalidConfig(f"config section {where!r} must be an object")
    special = special or {}
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidConfig(f"config section {where!r} has unknown keys {unknown}")
    kwargs = {k: special[k](v) if k in special else v for k, v in data.items()}
    return cls(**kwargs)


_SECTIONS = {
    "simulate": (simworld.SimConfig, {"camera": StereoCamera.from_json}),
    "seqslam": (placerec.PlacerecParams, {}),
    "validate": (ValidateParams, {}),
    "graph": (GraphParams, {}),
    "sample": (SampleParams, {}),
    "pose": (posemod.PoseParams, {}),
    "train": (emtrain.TrainConfig, {}),
}


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a pipeline config JSON file; defaults apply for missing keys."""
    cfg = PipelineConfig()
    if path is None:
        return cfg
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise InvalidConfig(f"{path}: config must be a JSON object")
    allowed = {"dataset", "seed", "threads"} | set(_SECTIONS)
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise InvalidConfig(f"{path}: unknown config keys {unknown}")
    if "dataset" in doc:
        cfg.dataset = str(doc["dataset"])
    if "seed" in doc:
        cfg.seed = int(doc["seed"])
    if "threads" in doc:
        cfg.threads = int(doc["threads"])
    for name, (cls, special) in _SECTIONS.items():
        if name in doc:
            setattr(cfg, name, _section(cls, doc[name], name, special))
    return cfg


def _override(params, **kw):
    """Replace dataclass fields with any non-None override values."""
    live = {k: v for k, v in kw.items() if v is not None}
    return replace(params, **live) if live else params


def _parse_frame_ref(text: str) -> tuple[int, int]:
    """Parse an 'experience:frame' reference like '0:12'."""
    parts = text.split(":")
    if len(parts) != 2:
        raise ValueError(f"expected exp:frame, got {text!r}")
    return int(parts[0]), int(parts[1])


# ------------------------------------------------------------ subcommands

def cmd_simulate(args, cfg: PipelineConfig) -> int:
    sim = _override(
        cfg.simulate,
        num_experiences=args.experiences,
        frames_per_experience=args.frames,
        appearance_step=args.appearance_step,
        drift=args.drift,
        descriptor_dim=args.descriptor_dim,
        emit_dense_maps=True if args.dense_maps else None,
    )
    seed = args.seed if args.seed is not None else cfg.seed
    _log("simulate", out=str(args.out), seed=seed,
         experiences=sim.num_experiences, frames=sim.frames_per_experience)
    ds = simworld.generate_dataset(sim, seed, args.out)
    _log("simulate_done", out=str(args.out),
         frames=[len(e.frames) for e in ds.experiences])
    return 0


def _seqslam_raw(ds, query: int, ref: int, params, diff_out=None):
    q_imgs = [f.left for f in ds.experience(query).frames]
    r_imgs = [f.left for f in ds.experience(ref).frames]
    D = placerec.difference_matrix(q_imgs, r_imgs, params)
    if diff_out:
        with open(diff_out, "w", newline="") as f:
            wr = csv.writer(f)
            for row in D:
                wr.writerow([repr(float(x)) for x in row])
    De = placerec.contrast_enhance(D, params.window_r) if params.enhance else D
    return placerec.match_sequences(De, params, query_id=query, ref_id=ref)


def cmd_seqslam(args, cfg: PipelineConfig) -> int:
    ds = simworld.load_dataset(args.dataset)
    raw = _seqslam_raw(ds, args.query, args.ref, cfg.seqslam, args.diff_out)
    assoc.save_raw_matches(args.out, raw)
    _log("seqslam_done", query=args.query, ref=args.ref, out=str(args.out))
    return 0


def cmd_validate(args, cfg: PipelineConfig) -> int:
    ds = simworld.load_dataset(args.dataset)
    raw = assoc.load_raw_matches(args.raw, query_id=args.query, ref_id=args.ref)
    e_sq = args.e_sq if args.e_sq is not None else cfg.validate.e_sq
    cs = assoc.validate_matches(
        ds.experience(args.query), ds.experience(args.ref), raw,
        e_sq=e_sq, window=cfg.validate.window,
    )
    assoc.save_matches(args.out, cs)
    _log("validate_done", query=args.query, ref=args.ref,
         cost=assoc.edge_cost(cs), out=str(args.out))
    return 0


def cmd_graph(args, cfg: PipelineConfig) -> int:
    ds = simworld.load_dataset(args.dataset)
    k = args.k if args.k is not None else cfg.graph.k
    threads = args.threads if args.threads is not None else cfg.threads
    graph = assoc.build_graph(ds, k=k, params=cfg.seqslam,
                              e_sq=cfg.validate.e_sq,
                              window=cfg.validate.window, threads=threads)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    written = assoc.save_graph(graph, out_path.parent)
    if written != out_path:
        written.rename(out_path)
    _log("graph_done", vertices=len(graph.vertices), edges=len(graph.edges),
         out=str(out_path))
    return 0


def cmd_sample(args, cfg: PipelineConfig) -> int:
    graph = assoc.load_graph(args.graph)
    src = args.src if args.src is not None else cfg.sample.src
    dst = args.dst if args.dst is not None else cfg.sample.dst
    if dst is None:
        dst = max(graph.vertices)
    n = args.n if args.n is not None else cfg.sample.n
    seed = args.seed if args.seed is not None else cfg.seed
    path, cost = assoc.min_cost_path(graph, src, dst)
    composed = assoc.compose_correspondences(graph, path)
    pairs = assoc.sample_pairs([composed], n, seed)
    assoc.save_pairs(args.out, pairs)
    _log("sample_done", path=path, cost=cost, pairs=len(pairs),
         out=str(args.out))
    return 0


def cmd_detect(args, cfg: PipelineConfig) -> int:
    fmap = load_feature_map(args.map)
    kps = detect_keypoints(fmap, args.cell)
    with open(args.out, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["u", "v", "score"])
        for kp in kps:
            wr.writerow([repr(float(kp.uv[0])), repr(float(kp.uv[1])),
                         repr(float(kp.score))])
    _log("detect_done", keypoints=len(kps), out=str(args.out))
    return 0


def _frame_inputs(ds, eid: int, fidx: int, maps: str,
                  model: emtrain.DescriptorModel | None):
    """Feature map and disparity inputs for one frame.

    maps == 'gt' reads the rendered map; otherwise the trained model runs on
    the left image. Disparity prefers the rendered channel and falls back to
    stereo search.
    """
    if maps == "gt":
        fmap = ds.feature_map(eid, fidx)
    else:
        frame = ds.experience(eid).frames[fidx]
        fmap = emtrain.forward(model, frame.left)
    try:
        disp = ds.disparity(eid, fidx)
        stereo = None
    except (OSError, CorruptDataset):
        frame = ds.experience(eid).frames[fidx]
        disp = None
        stereo = (frame.left, frame.right)
    return fmap, disp, stereo


def cmd_pose(args, cfg: PipelineConfig) -> int:
    ds = simworld.load_dataset(args.dataset)
    ea, fa = _parse_frame_ref(args.src)
    eb, fb = _parse_frame_ref(args.tgt)
    model = None if args.maps == "gt" else emtrain.load_model(args.maps)
    src_map, src_disp, src_st = _frame_inputs(ds, ea, fa, args.maps, model)
    tgt_map, tgt_disp, tgt_st = _frame_inputs(ds, eb, fb, args.maps, model)
    params = _override(
        cfg.pose, tau=args.tau, ransac_iterations=args.ransac_iters,
        inlier_sq_threshold=args.inlier_sq,
        seed=args.seed if args.seed is not None else cfg.seed,
    )
    est = posemod.estimate_pose(
        src_map, tgt_map, ds.camera, params,
        src_disparity=src_disp, tgt_disparity=tgt_disp,
        src_stereo=src_st, tgt_stereo=tgt_st,
    )
    doc = est.transform.to_json()
    doc["inlier_count"] = est.inlier_count
    doc["loss"] = est.loss
    with open(args.out, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")
    _log("pose_done", src=args.src, tgt=args.tgt,
         inliers=est.inlier_count, loss=est.loss, out=str(args.out))
    return 0


def _maybe_eval_hook(dataset_path):
    """Ground-truth eval callback when gt files and the gt reader exist.

    Training never requires either; without them the report's error columns
    stay NaN.
    """
    try:
        from .evaluate import load_ground_truth, make_eval_hook
    except ImportError:
        return None
    try:
        return make_eval_hook(load_ground_truth(dataset_path))
    except (CorruptDataset, OSError):
        return None


def cmd_train(args, cfg: PipelineConfig) -> int:
    ds = simworld.load_dataset(args.dataset)
    pairs = assoc.load_pairs(args.pairs)
    tcfg = _override(cfg.train, epochs=args.epochs, lr=args.lr)
    seed = args.seed if args.seed is not None else cfg.seed
    hook = _maybe_eval_hook(ds.path)
    _log("train", pairs=len(pairs), epochs=tcfg.epochs, lr=tcfg.lr,
         seed=seed, eval_columns=hook is not None)
    model, report = emtrain.train(ds, pairs, seed=seed, config=tcfg,
                                  eval_hook=hook)
    emtrain.save_model(args.model_out, model)
    emtrain.save_report(args.report, report)
    last = report.rows[-1]
    _log("train_done", epochs=len(report.rows) - 1, mean_loss=last.mean_loss,
         mean_inliers=last.mean_inliers, model=str(args.model_out),
         report=str(args.report))
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    from .evaluate import load_ground_truth, pose_errors, save_eval

    ds = simworld.load_dataset(args.dataset)
    gt = load_ground_truth(ds.path)
    pairs = assoc.load_pairs(args.pairs)
    model = None if args.model == "gt" else emtrain.load_model(args.model)
    seed = args.seed if args.seed is not None else cfg.seed

    rows = []
    skipped = 0
    cache: dict = {}
    for i, (ea, fa, eb, fb) in enumerate(pairs):
        key_a, key_b = (ea, fa), (eb, fb)
        if key_a not in cache:
            cache[key_a] = _frame_inputs(ds, ea, fa, args.model, model)
        if key_b not in cache:
            cache[key_b] = _frame_inputs(ds, eb, fb, args.model, model)
        src_map, src_disp, src_st = cache[key_a]
        tgt_map, tgt_disp, tgt_st = cache[key_b]
        params = replace(cfg.pose, seed=seed + i)
        try:
            est = posemod.estimate_pose(
                src_map, tgt_map, ds.camera, params,
                src_disparity=src_disp, tgt_disparity=tgt_disp,
                src_stereo=src_st, tgt_stereo=tgt_st,
            )
        except (NoConsensus, TooFewValidDepths) as e:
            skipped += 1
            _log("eval_skip", pair=f"{ea}:{fa}->{eb}:{fb}", reason=str(e))
            continue
        rot, trans = pose_errors(est.transform, gt.relative(ea, fa, eb, fb))
        rows.append((f"{ea}:{fa}->{eb}:{fb}", rot, trans, est.inlier_count))

    save_eval(args.out, rows)
    if rows:
        rots = np.array([r[1] for r in rows])
        trans = np.array([r[2] for r in rows])
        _log("eval_done", pairs=len(rows), skipped=skipped,
             rot_p50=float(np.quantile(rots, 0.5)),
             rot_p90=float(np.quantile(rots, 0.9)),
             trans_p50=float(np.quantile(trans, 0.5)),
             trans_p90=float(np.quantile(trans, 0.9)), out=str(args.out))
    else:
        _log("eval_done", pairs=0, skipped=skipped, out=str(args.out))
    return 0


def cmd_pipeline(args, cfg: PipelineConfig) -> int:
    out_dir = Path(args.out_dir if args.out_dir is not None else "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.seed
    threads = args.threads if args.threads is not None else cfg.threads

    ds_path = Path(args.dataset or cfg.dataset or (out_dir / "dataset"))
    if not (ds_path / "meta.json").exists():
        if not args.simulate:
            _error("pipeline", FileNotFoundError(
                f"dataset not found: {ds_path} (pass --simulate to generate)"))
            return 2
        _log("stage", stage="simulate", status="start", out=str(ds_path))
        simworld.generate_dataset(cfg.simulate, seed, ds_path)
        _log("stage", stage="simulate", status="done")
    ds = simworld.load_dataset(ds_path)

    _log("stage", stage="match", status="start")
    exps = ds.experiences
    jobs = [(i, j) for i in range(1, len(exps))
            for j in range(max(0, i - cfg.graph.k), i)]

    def make_edge(ij):
        i, j = ij
        raw = _seqslam_raw(ds, i, j, cfg.seqslam)
        assoc.save_raw_matches(out_dir / f"matches_raw_{i}_{j}.csv", raw)
        cs = assoc.validate_matches(exps[i], exps[j], raw,
                                    e_sq=cfg.validate.e_sq,
                                    window=cfg.validate.window)
        return assoc.GraphEdge(i=i, j=j, cost=assoc.edge_cost(cs), matches=cs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            edges = list(pool.map(make_edge, jobs))
    else:
        edges = [make_edge(ij) for ij in jobs]
    graph = assoc.ExperienceGraph(vertices=[e.id for e in exps], edges=edges)
    assoc.save_graph(graph, out_dir)
    _log("stage", stage="match", status="done", edges=len(edges))

    _log("stage", stage="sample", status="start")
    src = cfg.sample.src
    dst = cfg.sample.dst if cfg.sample.dst is not None else max(graph.vertices)
    path, cost = assoc.min_cost_path(graph, src, dst)
    counts = {e.id: len(e.frames) for e in exps}
    composed = assoc.compose_correspondences(graph, path, counts)
    pairs = assoc.sample_pairs([composed], cfg.sample.n, seed)
    assoc.save_pairs(out_dir / "pairs.csv", pairs)
    _log("stage", stage="sample", status="done", path=path, cost=cost)

    _log("stage", stage="train", status="start", epochs=cfg.train.epochs)
    hook = _maybe_eval_hook(ds.path)
    model, report = emtrain.train(ds, pairs, seed=seed, config=cfg.train,
                                  eval_hook=hook)
    emtrain.save_model(out_dir / "model.bin", model)
    emtrain.save_report(out_dir / "report.csv", report)
    _log("stage", stage="train", status="done",
         mean_loss=report.rows[-1].mean_loss)

    if hook is None:
        _log("stage", stage="eval", status="skipped",
             reason="ground truth unavailable")
        return 0
    _log("stage", stage="eval", status="start")
    eval_args = argparse.Namespace(
        dataset=str(ds_path), pairs=str(out_dir / "pairs.csv"),
        model=str(out_dir / "model.bin"), out=str(out_dir / "eval.csv"),
        seed=seed,
    )
    code = cmd_eval(eval_args, cfg)
    _log("stage", stage="eval", status="done" if code == 0 else "failed")
    return code


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="pipeline config JSON")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--out-dir", default=None)

    p = argparse.ArgumentParser(prog="seqloc",
                                description="self-supervised localization pipeline")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", parents=[common])
    s.add_argument("--out", required=True)
    s.add_argument("--experiences", type=int, default=None)
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--appearance-step", type=float, default=None)
    s.add_argument("--drift", type=float, default=None)
    s.add_argument("--descriptor-dim", type=int, default=None)
    s.add_argument("--dense-maps", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("seqslam", parents=[common])
    s.add_argument("--dataset", required=True)
    s.add_argument("--query", type=int, required=True)
    s.add_argument("--ref", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--diff-out", default=None)
    s.set_defaults(func=cmd_seqslam)

    s = sub.add_parser("validate", parents=[common])
    s.add_argument("--dataset", required=True)
    s.add_argument("--query", type=int, required=True)
    s.add_argument("--ref", type=int, required=True)
    s.add_argument("--raw", required=True)
    s.add_argument("--e-sq", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("graph", parents=[common])
    s.add_argument("--dataset", required=True)
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("sample", parents=[common])
    s.add_argument("--graph", required=True)
    s.add_argument("--src", type=int, default=None)
    s.add_argument("--dst", type=int, default=None)
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("detect", parents=[common])
    s.add_argument("--map", required=True)
    s.add_argument("--cell", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("pose", parents=[common])
    s.add_argument("--dataset", required=True)
    s.add_argument("--src", required=True, help="experience:frame")
    s.add_argument("--tgt", required=True, help="experience:frame")
    s.add_argument("--maps", default="gt", help="'gt' or a model file")
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--ransac-iters", type=int, default=None)
    s.add_argument("--inlier-sq", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pose)

    s = sub.add_parser("train", parents=[common])
    s.add_argument("--dataset", required=True)
    s.add_argument("--pairs", required=True)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--model-out", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common])
    s.add_argument("--dataset", required=True)
    s.add_argument("--pairs", required=True)
    s.add_argument("--model", default="gt", help="'gt' or a model file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", parents=[common])
    s.add_argument("--dataset", default=None)
    s.add_argument("--simulate", action="store_true",
                   help="generate the dataset when missing")
    s.set_defaults(func=cmd_pipeline)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except _INPUT_ERRORS as e:
        _error("config", e)
        return 2
    try:
        return args.func(args, cfg)
    except _INPUT_ERRORS as e:
        _error(args.cmd, e)
        return 2
    except SeqlocError as e:
        _error(args.cmd, e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
