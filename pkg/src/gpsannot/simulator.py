"""Seeded synthetic scenarios: ground-plane objects, flow tracks, noisy GPS.

A scenario puts rectangular objects on a metric ground plane viewed through
an affine frame<->world mapping (pixels = origin + scale * meters).  Objects
follow waypoint polylines at constant speed with optional dwells.  The target
object's bottom-center world position drives the GPS model; every object
sheds a group of jittered flow point tracks over its pixel footprint.

Everything is deterministic for a fixed spec seed: internal RNG streams are
derived from (seed, stream-index) so adding draws to one stage never shifts
another.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import (BoundingBox, Homography, frame_to_world_array,
                       world_to_frame_array)
from .matching import GpsTrace
from .proposal import FlowTrack, compute_moving_flags


class InvalidSpec(Exception):
    """Scenario spec violates the schema; message names the offending path."""


def _require(cond, path, msg):
    if not cond:
        raise InvalidSpec("%s: %s" % (path, msg))


@dataclass
class GpsNoiseSpec:
    gaussian_sigma_m: float = 0.0
    constant_bias_m: tuple = (0.0, 0.0)
    lag_s: float = 0.0            # first-order smoothing time constant
    stick_prob: float = 0.0       # fix repeats the previous output
    rate_hz: float = 1.0

    def validate(self, path="gps_noise"):
        _require(self.gaussian_sigma_m >= 0, path + ".gaussian_sigma_m", "must be >= 0")
        _require(len(self.constant_bias_m) == 2, path + ".constant_bias_m", "needs 2 values")
        _require(self.lag_s >= 0, path + ".lag_s", "must be >= 0")
        _require(0.0 <= self.stick_prob <= 1.0, path + ".stick_prob", "must be in [0,1]")
        _require(self.rate_hz > 0, path + ".rate_hz", "must be > 0")


@dataclass
class FlowNoiseSpec:
    jitter_sigma_px: float = 0.5
    dropout_rate: float = 0.02    # per-second probability a track dies
    flows_per_object: tuple = (16, 28)

    def validate(self, path="flow_noise"):
        _require(self.jitter_sigma_px >= 0, path + ".jitter_sigma_px", "must be >= 0")
        _require(0.0 <= self.dropout_rate <= 1.0, path + ".dropout_rate", "must be in [0,1]")
        lo, hi = self.flows_per_object
        _require(1 <= lo <= hi, path + ".flows_per_object", "needs 1 <= lo <= hi")


@dataclass
class ObjectSpec:
    size_m: tuple = (2.0, 1.5)    # width, height in meters
    speed_mps: tuple = (1.0, 2.0)
    waypoints_m: list = None      # explicit path; None samples n_waypoints
    n_waypoints: int = 4
    dwell_s: float = 0.0          # pause on arriving at each waypoint
    target: bool = False

    def validate(self, path):
        _require(len(self.size_m) == 2 and min(self.size_m) > 0,
                 path + ".size_m", "needs two positive values")
        lo, hi = self.speed_mps
        _require(0 <= lo <= hi, path + ".speed_mps", "needs 0 <= lo <= hi")
        if self.waypoints_m is not None:
            _require(len(self.waypoints_m) >= 1, path + ".waypoints_m", "needs >= 1 points")
            for i, wp in enumerate(self.waypoints_m):
                _require(len(wp) == 2, "%s.waypoints_m[%d]" % (path, i), "needs 2 values")
        else:
            _require(self.n_waypoints >= 1, path + ".n_waypoints", "must be >= 1")
        _require(self.dwell_s >= 0, path + ".dwell_s", "must be >= 0")


@dataclass
class HomographySpec:
    px_per_meter: float = 20.0
    origin_px: tuple = (0.0, 0.0)

    def validate(self, path="homography"):
        _require(self.px_per_meter > 0, path + ".px_per_meter", "must be > 0")
        _require(len(self.origin_px) == 2, path + ".origin_px", "needs 2 values")

    def to_homography(self) -> Homography:
        p = self.px_per_meter
        ox, oy = self.origin_px
        return Homography.from_matrix([[1.0 / p, 0.0, -ox / p],
                                       [0.0, 1.0 / p, -oy / p],
                                       [0.0, 0.0, 1.0]])


@dataclass
class ScenarioSpec:
    seed: int = 0
    duration_s: float = 40.0
    fps: int = 10
    objects: list = field(default_factory=list)
    gps_noise: GpsNoiseSpec = field(default_factory=GpsNoiseSpec)
    flow_noise: FlowNoiseSpec = field(default_factory=FlowNoiseSpec)
    homography: HomographySpec = field(default_factory=HomographySpec)
    frame_size: tuple = (640, 360)
    shadow_offset_px: tuple = None  # rigid flow-group copy of the target

    def validate(self):
        _require(isinstance(self.seed, int), "seed", "must be an integer")
        _require(self.duration_s > 0, "duration_s", "must be > 0")
        _require(isinstance(self.fps, int) and self.fps >= 1, "fps", "must be an integer >= 1")
        _require(len(self.objects) >= 1, "objects", "needs at least one object")
        for i, obj in enumerate(self.objects):
            obj.validate("objects[%d]" % i)
        n_targets = sum(1 for o in self.objects if o.target)
        _require(n_targets == 1, "objects", "exactly one object must be the target, got %d" % n_targets)
        self.gps_noise.validate()
        self.flow_noise.validate()
        self.homography.validate()
        _require(len(self.frame_size) == 2 and min(self.frame_size) >= 1,
                 "frame_size", "needs two values >= 1")
        if self.shadow_offset_px is not None:
            _require(len(self.shadow_offset_px) == 2, "shadow_offset_px", "needs 2 values")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.fps))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d))  # tuples -> lists

    @staticmethod
    def from_dict(d: dict) -> "ScenarioSpec":
        def build(cls, sub, path):
            if not isinstance(sub, dict):
                raise InvalidSpec("%s: expected an object" % path)
            names = {f.name for f in dataclasses.fields(cls)}
            for key in sub:
                if key not in names:
                    raise InvalidSpec("%s.%s: unknown field" % (path, key))
            return cls(**sub)

        if not isinstance(d, dict):
            raise InvalidSpec("spec: expected a JSON object")
        d = dict(d)
        try:
            if "objects" in d:
                d["objects"] = [build(ObjectSpec, o, "objects[%d]" % i)
                                for i, o in enumerate(d["objects"])]
            for key, cls in (("gps_noise", GpsNoiseSpec), ("flow_noise", FlowNoiseSpec),
                             ("homography", HomographySpec)):
                if key in d:
                    d[key] = build(cls, d[key], key)
            spec = build(ScenarioSpec, d, "spec")
        except TypeError as e:
            raise InvalidSpec("spec: %s" % e)
        spec.validate()
        return spec

    @staticmethod
    def load(path) -> "ScenarioSpec":
        with open(path) as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as e:
                raise InvalidSpec("spec: malformed JSON (%s)" % e)
        return ScenarioSpec.from_dict(d)


@dataclass
class Clip:
    """One simulated or ingested clip, ready for the pipeline."""

    flow_tracks: list
    gps: GpsTrace
    ground_truth: dict            # frame -> BoundingBox (absent frames omitted)
    homography: Homography
    fps: float
    n_frames: int
    frame_size: tuple
    meta: dict = field(default_factory=dict)


def _polyline_path(waypoints, speed, dwell_s, times):
    """Positions along a waypoint polyline at constant speed with dwells.

    The object starts at the first waypoint, dwells `dwell_s` on arrival at
    every waypoint (including the start), and stays at the last waypoint
    forever.  Returns (len(times), 2).
    """
    waypoints = np.asarray(waypoints, dtype=float)
    knots_t, knots_p = [0.0], [waypoints[0]]
    t = 0.0
    for i in range(len(waypoints)):
        if dwell_s > 0:
            t += dwell_s
            knots_t.append(t)
            knots_p.append(waypoints[i])
        if i + 1 < len(waypoints):
            seg = np.linalg.norm(waypoints[i + 1] - waypoints[i])
            if seg == 0 or speed <= 0:
                continue
            t += seg / speed
            knots_t.append(t)
            knots_p.append(waypoints[i + 1])
    knots_t = np.asarray(knots_t)
    knots_p = np.asarray(knots_p)
    x = np.interp(times, knots_t, knots_p[:, 0])
    y = np.interp(times, knots_t, knots_p[:, 1])
    return np.stack([x, y], axis=1)


def simulate_gps(true_path: np.ndarray, noise: GpsNoiseSpec, seed,
                 fps: float = 10.0) -> GpsTrace:
    """Noisy GPS fixes along a per-frame world path.

    Pipeline order: lag (exponential smoothing with time constant lag_s),
    constant bias, Gaussian noise, stick (a fix repeats the previous output).
    One fix per 1/rate_hz seconds starting at t=0.
    """
    true_path = np.asarray(true_path, dtype=float)
    if len(true_path) == 0:
        raise ValueError("empty path")
    rng = np.random.default_rng(seed)
    duration = (len(true_path) - 1) / fps
    times = np.arange(0.0, duration + 1e-9, 1.0 / noise.rate_hz)
    frame_t = np.arange(len(true_path)) / fps
    x = np.interp(times, frame_t, true_path[:, 0])
    y = np.interp(times, frame_t, true_path[:, 1])
    out = np.stack([x, y], axis=1)

    if noise.lag_s > 0:
        lagged = out.copy()
        for k in range(1, len(out)):
            alpha = 1.0 - np.exp(-(times[k] - times[k - 1]) / noise.lag_s)
            lagged[k] = lagged[k - 1] + alpha * (out[k] - lagged[k - 1])
        out = lagged
    out = out + np.asarray(noise.constant_bias_m, dtype=float)
    out = out + rng.normal(0.0, noise.gaussian_sigma_m, out.shape)
    stick = rng.uniform(size=len(out))
    for k in range(1, len(out)):
        if stick[k] < noise.stick_prob:
            out[k] = out[k - 1]
    return GpsTrace(times, out)


def emit_flow_tracks(footprints, flow_noise: FlowNoiseSpec, seed,
                     fps: float = 10.0):
    """Spawn jittered flow-point tracks over per-frame object footprints.

    Args:
        footprints: list per object of (n_frames, 4) arrays [x0, y0, w, h]
            with NaN rows where the object is out of view.
        flow_noise: jitter/dropout/count model.

    Returns:
        list of FlowTrack; each track lives within one visible run of its
        object, tracks that drop out are replaced by a fresh spawn so group
        coverage stays roughly constant.
    """
    rng = np.random.default_rng(seed)
    p_death = min(flow_noise.dropout_rate / fps, 1.0)
    lo, hi = flow_noise.flows_per_object
    tracks = []
    next_id = 0

    for rects in footprints:
        rects = np.asarray(rects, dtype=float)
        visible = ~np.isnan(rects[:, 0])
        f = 0
        n = len(rects)
        while f < n:
            if not visible[f]:
                f += 1
                continue
            run_start = f
            while f < n and visible[f]:
                f += 1
            run_end = f  # exclusive
            count = int(rng.integers(lo, hi + 1))
            alive = []
            for _ in range(count):
                alive.append({"id": next_id, "offset": rng.uniform(size=2),
                              "first": run_start, "pos": []})
                next_id += 1
            for frame in range(run_start, run_end):
                if frame > run_start and p_death > 0:
                    for tr in list(alive):
                        if rng.uniform() < p_death:
                            alive.remove(tr)
                            tracks.append(tr)
                            alive.append({"id": next_id,
                                          "offset": rng.uniform(size=2),
                                          "first": frame, "pos": []})
                            next_id += 1
                x0, y0, w, h = rects[frame]
                for tr in alive:
                    p = np.array([x0, y0]) + tr["offset"] * np.array([w, h])
                    p = p + rng.normal(0.0, flow_noise.jitter_sigma_px, 2)
                    tr["pos"].append(p)
            tracks.extend(alive)

    tracks.sort(key=lambda tr: tr["id"])
    out = []
    for tr in tracks:
        pos = np.array(tr["pos"])
        out.append(FlowTrack(tr["id"], tr["first"], pos,
                             compute_moving_flags(pos, fps)))
    return out


def generate_scenario(spec: ScenarioSpec) -> Clip:
    """Build a full Clip from a scenario spec; deterministic per seed."""
    spec.validate()
    hom = spec.homography.to_homography()
    n_frames = spec.n_frames
    fw, fh = spec.frame_size
    times = np.arange(n_frames) / spec.fps

    # visible world rectangle, inset so sampled paths keep boxes in frame
    corners = frame_to_world_array(hom, np.array(
        [[0.0, 0.0], [fw, 0.0], [0.0, fh], [fw, fh]], dtype=float))
    wlo, whi = corners.min(axis=0), corners.max(axis=0)

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    paths = []        # bottom-center world positions per object
    for obj in spec.objects:
        speed = float(rng.uniform(*obj.speed_mps))
        if obj.waypoints_m is not None:
            wps = [tuple(map(float, wp)) for wp in obj.waypoints_m]
        else:
            inset = min(max(obj.size_m), 0.4 * float(min(whi - wlo)))
            wps = [(float(rng.uniform(wlo[0] + inset, whi[0] - inset)),
                    float(rng.uniform(wlo[1] + inset, whi[1] - inset)))
                   for _ in range(obj.n_waypoints)]
        paths.append(_polyline_path(wps, speed, obj.dwell_s, times))

    target_idx = next(i for i, o in enumerate(spec.objects) if o.target)
    gps = simulate_gps(paths[target_idx], spec.gps_noise,
                       np.random.SeedSequence([spec.seed, 1]), spec.fps)

    ppm = spec.homography.px_per_meter
    footprints = []
    boxes = []        # per object: (n_frames, 4) [cx, cy, w, h] px, NaN hidden
    for obj, path in zip(spec.objects, paths):
        w_px, h_px = obj.size_m[0] * ppm, obj.size_m[1] * ppm
        bc = world_to_frame_array(hom, path)
        cx, cy = bc[:, 0], bc[:, 1] - h_px / 2.0
        inside = (cx >= 0) & (cx < fw) & (cy >= 0) & (cy < fh)
        rect = np.stack([cx - w_px / 2.0, cy - h_px / 2.0,
                         np.full(n_frames, w_px), np.full(n_frames, h_px)], axis=1)
        rect[~inside] = np.nan
        footprints.append(rect)
        box = np.stack([cx, cy, np.full(n_frames, w_px),
                        np.full(n_frames, h_px)], axis=1)
        box[~inside] = np.nan
        boxes.append(box)
    if spec.shadow_offset_px is not None:
        shadow = footprints[target_idx].copy()
        shadow[:, 0] += spec.shadow_offset_px[0]
        shadow[:, 1] += spec.shadow_offset_px[1]
        footprints.append(shadow)

    flow_tracks = emit_flow_tracks(footprints, spec.flow_noise,
                                   np.random.SeedSequence([spec.seed, 2]), spec.fps)

    gt = {}
    for f in range(n_frames):
        row = boxes[target_idx][f]
        if not np.isnan(row[0]):
            gt[f] = BoundingBox(float(row[0]), float(row[1]),
                                float(row[2]), float(row[3]))

    meta = {
        "seed": spec.seed,
        "gps_sigma_m": spec.gps_noise.gaussian_sigma_m,
        "gps_bias_m": [float(b) for b in spec.gps_noise.constant_bias_m],
        "gps_lag_s": spec.gps_noise.lag_s,
        "gps_stick_prob": spec.gps_noise.stick_prob,
        "n_distractors": len(spec.objects) - 1,
        "shadow": spec.shadow_offset_px is not None,
    }
    return Clip(flow_tracks, gps, gt, hom, float(spec.fps), n_frames,
                (fw, fh), meta)


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------

def _dump(rec) -> str:
    return json.dumps(rec, sort_keys=True)


def write_clip(clip: Clip, path):
    """Clip as JSONL: header, GPS fixes, then one record per frame."""
    frames = [[] for _ in range(clip.n_frames)]
    for tr in clip.flow_tracks:
        for i in range(len(tr.positions)):
            frames[tr.first_frame + i].append(
                {"id": tr.track_id, "x": float(tr.positions[i][0]),
                 "y": float(tr.positions[i][1]), "moving": bool(tr.moving[i])})
    with open(path, "w") as f:
        f.write(_dump({"type": "header", "fps": clip.fps,
                       "n_frames": clip.n_frames,
                       "frame_size": list(clip.frame_size),
                       "homography": clip.homography.m.tolist(),
                       "meta": clip.meta}) + "\n")
        for rec in clip.gps.to_records():
            rec["type"] = "gps"
            f.write(_dump(rec) + "\n")
        for idx, points in enumerate(frames):
            points.sort(key=lambda p: p["id"])
            f.write(_dump({"type": "frame", "frame": idx, "points": points}) + "\n")


def write_ground_truth(gt: dict, path):
    with open(path, "w") as f:
        for frame in sorted(gt):
            b = gt[frame]
            f.write(_dump({"frame": frame, "cx": b.cx, "cy": b.cy,
                           "w": b.w, "h": b.h}) + "\n")


def read_ground_truth(path) -> dict:
    gt = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            gt[int(rec["frame"])] = BoundingBox(rec["cx"], rec["cy"],
                                                rec["w"], rec["h"])
    return gt


def read_gps_jsonl(path) -> GpsTrace:
    with open(path) as f:
        recs = [json.loads(line) for line in f if line.strip()]
    return GpsTrace.from_records([r for r in recs if r.get("type", "gps") == "gps"])


def _tracks_from_frame_records(frame_recs):
    by_id = {}
    for rec in frame_recs:
        for p in rec["points"]:
            by_id.setdefault(p["id"], []).append(
                (rec["frame"], p["x"], p["y"], p.get("moving")))
    tracks = []
    for tid in sorted(by_id):
        rows = sorted(by_id[tid])
        first = rows[0][0]
        if rows[-1][0] - first + 1 != len(rows):
            raise ValueError("track %d has a frame gap" % tid)
        pos = np.array([[r[1], r[2]] for r in rows])
        tracks.append((tid, first, pos, [r[3] for r in rows]))
    return tracks


def read_clip(path, ground_truth_path=None, homography: Homography = None,
              fps: float = None, frame_size=None) -> Clip:
    """Rebuild a Clip from JSONL; explicit arguments override the header.

    Flow files without a header (pre-extracted ingest) must supply
    homography, fps and frame_size; GPS records may live in this file or be
    attached by the caller afterwards.
    """
    header = None
    gps_recs, frame_recs = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            kind = rec.get("type")
            if kind == "header":
                header = rec
            elif kind == "gps":
                gps_recs.append(rec)
            elif kind == "frame":
                frame_recs.append(rec)
    header = header or {}
    fps = fps if fps is not None else header.get("fps")
    frame_size = frame_size if frame_size is not None else header.get("frame_size")
    if homography is None and "homography" in header:
        homography = Homography.from_matrix(header["homography"])
    if fps is None or frame_size is None or homography is None:
        raise ValueError("flow file lacks a header; homography, fps and "
                         "frame_size must be provided")
    n_frames = header.get("n_frames")
    if n_frames is None:
        n_frames = max(r["frame"] for r in frame_recs) + 1 if frame_recs else 0

    tracks = []
    for tid, first, pos, moving in _tracks_from_frame_records(frame_recs):
        if any(m is None for m in moving):
            flags = compute_moving_flags(pos, fps)
        else:
            flags = np.array(moving, dtype=bool)
        tracks.append(FlowTrack(tid, first, pos, flags))

    gps = GpsTrace.from_records(gps_recs) if gps_recs else None
    gt = read_ground_truth(ground_truth_path) if ground_truth_path else {}
    return Clip(tracks, gps, gt, homography, float(fps), int(n_frames),
                tuple(frame_size), header.get("meta", {}))
