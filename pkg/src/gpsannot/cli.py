"""Command-line entry point tying the pipeline stages together.

Subcommands: simulate, annotate, benchmark, train-refiner, train-ranker,
search-params.  Exit codes: 0 on success, 2 on configuration errors (bad or
missing config/spec/input files), 1 on runtime failures.  Diagnostics go to
stderr; stdout stays clean for piping.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from .geometry import frame_to_world_array, load_calibration
from .matching import HmmParams, PreparedClip, search_hyperparams
from .ranking import (RankedAnnotation, RankerModel, keep_top, rank,
                      score_quality, train_ranker, write_annotations_jsonl)
from .refine import (BoxSequence, RefinerModel, corrupt_sequence,
                     sequences_from_boxes, train_refiner)
from .simulator import (Clip, InvalidSpec, ScenarioSpec, generate_scenario,
                        read_clip, read_gps_jsonl, write_clip,
                        write_ground_truth)
from .evaluation import (VERSIONS, AblationConfig, SuiteSpec, annotate_clip,
                         clip_metrics, prepare_skeleton, run_benchmark,
                         stage1, write_report_files)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

POLICIES = ("inter", "intra")


class ConfigError(Exception):
    """Configuration problem the user must fix; maps to exit code 2."""


def _log(msg):
    print(msg, file=sys.stderr)


def _need_file(path, what) -> str:
    if path is None:
        raise ConfigError("missing %s path in config" % what)
    if not os.path.exists(path):
        raise ConfigError("missing %s file: %s" % (what, path))
    return path


def _load_json(path, what) -> dict:
    _need_file(path, what)
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError("malformed JSON in %s %s: %s" % (what, path, e))


# ---------------------------------------------------------------------------
# pipeline configuration
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    """Everything cmd_annotate needs; exactly one input mode."""

    seed: int
    input: dict
    clip_id: str = "clip"
    params: str = None           # HmmParams JSON path (defaults when absent)
    refiner_model: str = None
    ranker_model: str = None
    version: str = "v3"
    keep_top: float = 100.0
    policy: str = "inter"

    def validate(self):
        if self.seed is None:
            raise ConfigError("config must set a seed")
        mode = (self.input or {}).get("mode")
        if mode not in ("simulate", "ingest"):
            raise ConfigError("input.mode must be 'simulate' or 'ingest', "
                              "got %r" % mode)
        if self.version not in VERSIONS:
            raise ConfigError("version must be one of %s, got %r" %
                              (list(VERSIONS), self.version))
        if self.policy not in POLICIES:
            raise ConfigError("policy must be one of %s, got %r" %
                              (list(POLICIES), self.policy))
        if not (0.0 < self.keep_top <= 100.0):
            raise ConfigError("keep_top must be in (0, 100], got %r" %
                              self.keep_top)
        if self.version == "v4" and not self.refiner_model:
            raise ConfigError("version v4 needs a refiner_model checkpoint")

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(PipelineConfig)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError("unknown config fields: %s" % sorted(unknown))
        if "seed" not in d:
            raise ConfigError("config must set a seed")
        cfg = PipelineConfig(**d)
        cfg.validate()
        return cfg

    @staticmethod
    def load(path) -> "PipelineConfig":
        return PipelineConfig.from_dict(_load_json(path, "config"))


def _load_scenario(src) -> ScenarioSpec:
    if isinstance(src, str):
        _need_file(src, "scenario spec")
        return ScenarioSpec.load(src)
    return ScenarioSpec.from_dict(src)


def resolve_input(cfg: PipelineConfig) -> Clip:
    """Build the Clip for either input mode."""
    mode = cfg.input["mode"]
    if mode == "simulate":
        spec = cfg.input.get("scenario")
        if spec is None:
            raise ConfigError("simulate mode needs input.scenario "
                              "(path or inline spec)")
        return generate_scenario(_load_scenario(spec))
    flow = _need_file(cfg.input.get("flow"), "flow")
    gps_path = _need_file(cfg.input.get("gps"), "gps")
    calib = _need_file(cfg.input.get("calibration"), "calibration")
    homography = load_calibration(calib)
    gt_path = cfg.input.get("ground_truth")
    if gt_path is not None:
        _need_file(gt_path, "ground truth")
    clip = read_clip(flow, gt_path, homography,
                     cfg.input.get("fps"), cfg.input.get("frame_size"))
    clip.gps = read_gps_jsonl(gps_path)
    return clip


def _load_params(cfg: PipelineConfig) -> HmmParams:
    if cfg.params is None:
        return HmmParams()
    return HmmParams.load(_need_file(cfg.params, "params"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def write_calibration(homography, frame_size, path):
    """Four corner correspondences recoverable by the calibration loader."""
    fw, fh = frame_size
    pts = np.array([[0.0, 0.0], [fw, 0.0], [0.0, fh], [fw, fh]])
    world = frame_to_world_array(homography, pts)
    with open(path, "w") as f:
        f.write("# fx fy wx wy\n")
        for (fx, fy), (wx, wy) in zip(pts, world):
            f.write("%r %r %r %r\n" % (fx, fy, wx, wy))


def cmd_simulate(args) -> int:
    spec = _load_scenario(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    clip = generate_scenario(spec)
    os.makedirs(args.out, exist_ok=True)
    write_clip(clip, os.path.join(args.out, "clip.jsonl"))
    write_ground_truth(clip.ground_truth,
                       os.path.join(args.out, "ground_truth.jsonl"))
    with open(os.path.join(args.out, "gps.jsonl"), "w") as f:
        for rec in clip.gps.to_records():
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    write_calibration(clip.homography, clip.frame_size,
                      os.path.join(args.out, "calibration.txt"))
    _log("simulated %d frames at %g fps into %s" %
         (clip.n_frames, clip.fps, args.out))
    return EXIT_OK


def _dump_stages(out_dir, s1, skeleton, raw_boxes, refined_boxes):
    stage_dir = os.path.join(out_dir, "stages")
    os.makedirs(stage_dir, exist_ok=True)
    with open(os.path.join(stage_dir, "candidates.jsonl"), "w") as f:
        for frame, cands in enumerate(s1.candidates_by_frame):
            for c in cands:
                f.write(json.dumps({
                    "frame": frame, "source": c.source,
                    "members": sorted(c.member_ids),
                    "cx": c.bbox.cx, "cy": c.bbox.cy,
                    "w": c.bbox.w, "h": c.bbox.h,
                }, sort_keys=True) + "\n")
    with open(os.path.join(stage_dir, "lattice.json"), "w") as f:
        json.dump({"n_frames": skeleton.n_frames,
                   "n_cofs": len(s1.cofs),
                   "states_per_frame": [int(c) for c in skeleton.counts]},
                  f, sort_keys=True, indent=2)
        f.write("\n")

    def dump_boxes(boxes, name):
        with open(os.path.join(stage_dir, name), "w") as f:
            for frame in sorted(boxes):
                b = boxes[frame]
                f.write(json.dumps({"frame": frame, "cx": b.cx, "cy": b.cy,
                                    "w": b.w, "h": b.h},
                                   sort_keys=True) + "\n")
    dump_boxes(raw_boxes, "raw_boxes.jsonl")
    if refined_boxes is not None:
        dump_boxes(refined_boxes, "refined_boxes.jsonl")


def cmd_annotate(args) -> int:
    cfg = PipelineConfig.load(args.config)
    for name in ("seed", "version", "policy"):
        v = getattr(args, name, None)
        if v is not None:
            cfg = dataclasses.replace(cfg, **{name: v})
    if args.keep_top is not None:
        cfg = dataclasses.replace(cfg, keep_top=args.keep_top)
    cfg.validate()

    clip = resolve_input(cfg)
    params = _load_params(cfg)
    refiner = None
    if cfg.refiner_model:
        refiner = RefinerModel.load(_need_file(cfg.refiner_model,
                                               "refiner model"))
    ranker = None
    if cfg.ranker_model:
        ranker = RankerModel.load(_need_file(cfg.ranker_model, "ranker model"))

    version = AblationConfig(cfg.version)
    s1 = stage1(clip)
    skeleton = prepare_skeleton(clip, s1, params.speed_window_s)
    raw_boxes = None
    if args.dump_stages and version.use_refine:
        raw_boxes = annotate_clip(clip, AblationConfig("v3"), params, None,
                                  s1, skeleton)[0]
    boxes, _ = annotate_clip(clip, version, params, refiner, s1, skeleton)
    if raw_boxes is None:
        raw_boxes = boxes

    annotations = []
    for seq in sequences_from_boxes(boxes, clip.fps):
        scores = (score_quality(seq, ranker) if ranker is not None
                  else np.full(len(seq.frames), 0.5))
        seq_boxes = seq.boxes()
        for r, f in enumerate(seq.frames):
            annotations.append(RankedAnnotation(cfg.clip_id, int(f),
                                                seq_boxes[int(f)],
                                                float(scores[r])))
    ranked = rank(annotations, cfg.policy)
    kept = keep_top(ranked, cfg.keep_top / 100.0, cfg.policy)

    os.makedirs(args.out, exist_ok=True)
    write_annotations_jsonl(kept, os.path.join(args.out, "annotations.jsonl"))
    if clip.ground_truth:
        m = clip_metrics(boxes, clip.ground_truth, cfg.clip_id)
        record = {"clip_id": m.clip_id,
                  "precision_at_iou_05": m.precision_at_iou_05,
                  "median_nd": (m.median_nd if math.isfinite(m.median_nd)
                                else repr(m.median_nd)),
                  "mean_iou": m.mean_iou,
                  "n_gt_frames": len(m.frames),
                  "n_annotations": len(kept)}
        with open(os.path.join(args.out, "metrics.json"), "w") as f:
            json.dump(record, f, sort_keys=True, indent=2)
            f.write("\n")
    if args.dump_stages:
        _dump_stages(args.out, s1, skeleton, raw_boxes,
                     boxes if version.use_refine else None)
    _log("annotated %d frames, kept %d rows (%s, top %g%%)" %
         (len(boxes), len(kept), cfg.policy, cfg.keep_top))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    if args.config is not None:
        try:
            suite = SuiteSpec.from_dict(_load_json(args.config, "suite spec"))
        except ValueError as e:
            raise ConfigError(str(e))
    else:
        suite = SuiteSpec()
    if args.seed is not None:
        suite.seed = args.seed
    if args.jobs is not None:
        suite.jobs = args.jobs
    t0 = time.monotonic()
    report, ranked = run_benchmark(suite)
    write_report_files(report, ranked, args.out)
    _log("benchmark wall-clock: %.1f s" % (time.monotonic() - t0))
    _log("report written to %s" % os.path.join(args.out, "report.json"))
    return EXIT_OK


def _load_training_clips(cfg: dict):
    """Common config shape for the training commands: a 'clips' list of
    {'clip': path, 'ground_truth': path} records."""
    entries = cfg.get("clips")
    if not entries:
        raise ConfigError("config must list training clips under 'clips'")
    clips = []
    for ent in entries:
        path = _need_file(ent.get("clip"), "clip")
        gt = ent.get("ground_truth")
        if gt is not None:
            _need_file(gt, "ground truth")
        clips.append(read_clip(path, gt))
    return clips


def cmd_train_refiner(args) -> int:
    cfg = _load_json(args.config, "config")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise ConfigError("config must set a seed")
    clips = _load_training_clips(cfg)
    rng = np.random.default_rng(seed)
    pairs = []
    for clip in clips:
        gt = clip.ground_truth
        if not gt:
            raise ConfigError("train-refiner needs ground truth per clip")
        for seq in sequences_from_boxes(gt, clip.fps, gt):
            if len(seq.values) < 12:
                continue
            for _ in range(int(cfg.get("corruptions_per_sequence", 2))):
                pairs.append((BoxSequence(
                    seq.frames, corrupt_sequence(seq.values, rng, clip.fps),
                    clip.fps), seq.values))
            pairs.append((BoxSequence(seq.frames, seq.values.copy(),
                                      clip.fps), seq.values))
    model = train_refiner(pairs, seed, epochs=int(cfg.get("epochs", 120)))
    model.save(args.out)
    _log("refiner trained on %d sequence pairs -> %s" % (len(pairs), args.out))
    return EXIT_OK


def cmd_train_ranker(args) -> int:
    from .geometry import iou

    cfg = _load_json(args.config, "config")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise ConfigError("config must set a seed")
    clips = _load_training_clips(cfg)
    params = (HmmParams.load(_need_file(cfg["params"], "params"))
              if cfg.get("params") else HmmParams())
    refiner = (RefinerModel.load(_need_file(cfg["refiner_model"],
                                            "refiner model"))
               if cfg.get("refiner_model") else None)
    version = AblationConfig("v4" if refiner is not None else "v3")
    labeled = []
    for clip in clips:
        gt = clip.ground_truth
        if not gt:
            raise ConfigError("train-ranker needs ground truth per clip")
        boxes, _ = annotate_clip(clip, version, params, refiner)
        for seq in sequences_from_boxes(boxes, clip.fps, gt):
            if len(seq.values) < 12:
                continue
            seq_boxes = seq.boxes()
            labels = np.full(len(seq.frames), np.nan)
            for r, f in enumerate(seq.frames):
                if int(f) in gt:
                    labels[r] = iou(seq_boxes[int(f)], gt[int(f)])
            labeled.append((seq, labels))
    model = train_ranker(labeled, seed, epochs=int(cfg.get("epochs", 150)))
    model.save(args.out)
    _log("ranker trained on %d sequences -> %s" % (len(labeled), args.out))
    return EXIT_OK


def cmd_search_params(args) -> int:
    cfg = _load_json(args.config, "config")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise ConfigError("config must set a seed")
    clips = _load_training_clips(cfg)
    prepared = []
    for clip in clips:
        if not clip.ground_truth:
            raise ConfigError("search-params needs ground truth per clip")
        s1 = stage1(clip)
        prepared.append(PreparedClip(prepare_skeleton(clip, s1),
                                     clip.ground_truth))
    params = search_hyperparams(prepared, int(cfg.get("budget", 24)), seed)
    params.save(args.out)
    _log("searched %d trials over %d clips -> %s" %
         (int(cfg.get("budget", 24)), len(clips), args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gpsannot",
        description="GPS-assisted video annotation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="generate a synthetic clip")
    sp.add_argument("--spec", required=True, help="scenario spec JSON")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_simulate)

    ap = sub.add_parser("annotate", help="run the annotation pipeline")
    ap.add_argument("--config", required=True, help="pipeline config JSON")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", required=True)
    ap.add_argument("--keep-top", dest="keep_top", type=float, default=None,
                    help="keep only the top X%% by rank")
    ap.add_argument("--policy", choices=POLICIES, default=None)
    ap.add_argument("--version", choices=VERSIONS, default=None)
    ap.add_argument("--jobs", type=int, default=None)
    ap.add_argument("--dump-stages", action="store_true")
    ap.set_defaults(func=cmd_annotate)

    bp = sub.add_parser("benchmark", help="run the cross-validated suite")
    bp.add_argument("--config", default=None, help="suite spec JSON")
    bp.add_argument("--seed", type=int, default=None)
    bp.add_argument("--out", required=True)
    bp.add_argument("--jobs", type=int, default=None)
    bp.set_defaults(func=cmd_benchmark)

    for name, fn in (("train-refiner", cmd_train_refiner),
                     ("train-ranker", cmd_train_ranker),
                     ("search-params", cmd_search_params)):
        tp = sub.add_parser(name)
        tp.add_argument("--config", required=True)
        tp.add_argument("--seed", type=int, default=None)
        tp.add_argument("--out", required=True, help="output file path")
        tp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidSpec) as e:
        _log("config error: %s" % e)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        _log("config error: missing file: %s" % (e.filename or e))
        return EXIT_CONFIG
    except Exception as e:
        _log("error: %s: %s" % (type(e).__name__, e))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
