"""Annotation quality scoring and ranking.

A small convolutional model predicts a per-frame quality score in (0,1) for
each bounding box from the high-pass residual of its sequence (quality
problems live in the fast components; the high-pass front end keeps the
model from keying on absolute positions).  Scores train against per-frame
IoU labels with L2 loss.  Ranking pools annotations within one clip (intra)
or across all clips (inter); purification keeps the top fraction and
recomputes metrics over what remains.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .geometry import BoundingBox, iou, normalized_distance
from .refine import BoxSequence, _moving_average, _odd_window


def high_pass(x: BoxSequence, window_s: float) -> np.ndarray:
    """Residual after removing a centered moving average: (N, 4) array."""
    if window_s <= 0:
        raise ValueError("window_s must be > 0")
    window = _odd_window(window_s * x.fps)
    return x.values - _moving_average(x.values[None], window)[0]


@dataclass
class RankerConfig:
    # The high-pass window is much longer than the conv kernels: a box stuck
    # on the wrong object for a few seconds has near-zero residual under a
    # short window (the average follows the error), while a long window keeps
    # the whole excursion visible yet still removes absolute position.
    hp_window_s: float = 8.0
    kernel1_s: float = 0.5
    kernel2_s: float = 1.0
    kernel3_s: float = 2.0
    channels: int = 8


class RankerModel:
    """Three convs (the first conv's output is concatenated into the last
    conv's input) and three dense layers ending in a sigmoid."""

    def __init__(self, config: RankerConfig = None, fps: float = 10.0,
                 seed: int = 0, store: tc.ParamStore = None, scale=None):
        self.config = config or RankerConfig()
        self.fps = float(fps)
        c = self.config.channels
        k1 = _odd_window(self.config.kernel1_s * fps)
        k2 = _odd_window(self.config.kernel2_s * fps)
        k3 = _odd_window(self.config.kernel3_s * fps)
        # per-channel scale of the high-passed input, frozen at training time
        self.scale = np.ones(4) if scale is None else np.asarray(scale, dtype=float)
        if store is not None:
            self.store = store
        else:
            self.store = tc.ParamStore(seed)
            add = self.store.add
            add("conv1.kernel", (k1, 4, c), fan_in=4 * k1, fan_out=c * k1)
            add("conv1.bias", (c,), 0, 0, zero=True)
            add("conv2.kernel", (k2, c, c), fan_in=c * k2, fan_out=c * k2)
            add("conv2.bias", (c,), 0, 0, zero=True)
            add("conv3.kernel", (k3, 2 * c, c), fan_in=2 * c * k3, fan_out=c * k3)
            add("conv3.bias", (c,), 0, 0, zero=True)
            add("fc1.w", (c, 16), fan_in=c, fan_out=16)
            add("fc1.b", (16,), 0, 0, zero=True)
            add("fc2.w", (16, 8), fan_in=16, fan_out=8)
            add("fc2.b", (8,), 0, 0, zero=True)
            add("fc3.w", (8, 1), fan_in=8, fan_out=1)
            add("fc3.b", (1,), 0, 0, zero=True)
        self.train_losses = []

    def _forward(self, xn):
        p = self.store.params
        c1 = tc.conv1d(xn, p["conv1.kernel"], p["conv1.bias"])
        h1 = tc.relu(c1)
        c2 = tc.conv1d(h1, p["conv2.kernel"], p["conv2.bias"])
        h2 = tc.relu(c2)
        cat = np.concatenate([h2, h1], axis=-1)
        c3 = tc.conv1d(cat, p["conv3.kernel"], p["conv3.bias"])
        h3 = tc.relu(c3)
        d1 = tc.dense(h3, p["fc1.w"], p["fc1.b"])
        r1 = tc.relu(d1)
        d2 = tc.dense(r1, p["fc2.w"], p["fc2.b"])
        r2 = tc.relu(d2)
        d3 = tc.dense(r2, p["fc3.w"], p["fc3.b"])
        s = tc.sigmoid(d3)
        cache = (xn, c1, h1, c2, h2, cat, c3, h3, d1, r1, d2, r2, s)
        return s[..., 0], cache

    def _backward(self, cache, dscore):
        xn, c1, h1, c2, h2, cat, c3, h3, d1, r1, d2, r2, s = cache
        p, acc = self.store.params, self.store.accumulate
        ds = tc.sigmoid_backward(s, dscore[..., None])
        dr2, dw, db = tc.dense_backward(r2, p["fc3.w"], ds)
        acc("fc3.w", dw)
        acc("fc3.b", db)
        dd2 = tc.relu_backward(d2, dr2)
        dr1, dw, db = tc.dense_backward(r1, p["fc2.w"], dd2)
        acc("fc2.w", dw)
        acc("fc2.b", db)
        dd1 = tc.relu_backward(d1, dr1)
        dh3, dw, db = tc.dense_backward(h3, p["fc1.w"], dd1)
        acc("fc1.w", dw)
        acc("fc1.b", db)
        dc3 = tc.relu_backward(c3, dh3)
        dcat, dk, db = tc.conv1d_backward(cat, p["conv3.kernel"], dc3)
        acc("conv3.kernel", dk)
        acc("conv3.bias", db)
        c = self.config.channels
        dh2 = dcat[..., :c]
        dh1 = dcat[..., c:].copy()
        dc2 = tc.relu_backward(c2, dh2)
        dh1_main, dk, db = tc.conv1d_backward(h1, p["conv2.kernel"], dc2)
        acc("conv2.kernel", dk)
        acc("conv2.bias", db)
        dh1 += dh1_main
        dc1 = tc.relu_backward(c1, dh1)
        _, dk, db = tc.conv1d_backward(xn, p["conv1.kernel"], dc1)
        acc("conv1.kernel", dk)
        acc("conv1.bias", db)

    def save(self, path):
        blob = {"kind": "ranker", "fps": self.fps,
                "config": {"hp_window_s": self.config.hp_window_s,
                           "kernel1_s": self.config.kernel1_s,
                           "kernel2_s": self.config.kernel2_s,
                           "kernel3_s": self.config.kernel3_s,
                           "channels": self.config.channels},
                "scale": self.scale.tolist(),
                "store": self.store.to_blob()}
        with open(path, "w") as f:
            json.dump(blob, f, sort_keys=True)

    @staticmethod
    def load(path) -> "RankerModel":
        with open(path) as f:
            blob = json.load(f)
        if blob.get("kind") != "ranker":
            raise ValueError("not a ranker checkpoint: %s" % path)
        return RankerModel(RankerConfig(**blob["config"]), blob["fps"],
                           store=tc.ParamStore.from_blob(blob["store"]),
                           scale=blob["scale"])


def score_quality(x: BoxSequence, model: RankerModel) -> np.ndarray:
    """Per-frame quality scores in (0,1); deterministic."""
    hp = high_pass(x, model.config.hp_window_s)
    scores, _ = model._forward((hp / model.scale)[None])
    return scores[0]


def train_ranker(labeled, seed: int, epochs: int = 150, lr: float = 0.01,
                 config: RankerConfig = None, window_len: int = 120) -> RankerModel:
    """Fit scores to IoU labels with masked L2 loss, full-batch Adam.

    Args:
        labeled: list of (BoxSequence, labels) where labels is (N,) with
            NaN marking frames without ground truth.
    """
    if not labeled:
        raise ValueError("need at least one labeled sequence")
    config = config or RankerConfig()
    fps = labeled[0][0].fps
    hps = [high_pass(seq, config.hp_window_s) for seq, _ in labeled]
    pooled = np.concatenate(hps, axis=0)
    scale = np.maximum(pooled.std(axis=0), 1e-6)
    model = RankerModel(config, fps, seed, scale=scale)
    if epochs == 0:
        return model

    # Tile fixed-length windows so long sequences contribute their middles;
    # short ones are zero-padded (a constant tail has zero residual) with the
    # padding masked out of the loss.
    length = int(window_len)
    xs, ys = [], []
    for hp, (_, labels) in zip(hps, labeled):
        labels = np.asarray(labels, dtype=float)
        xn = hp / scale
        n = len(xn)
        if n >= length:
            starts = list(range(0, n - length + 1, length))
            if starts[-1] != n - length:
                starts.append(n - length)
            for s in starts:
                xs.append(xn[s:s + length])
                ys.append(labels[s:s + length])
        else:
            pad = length - n
            xs.append(np.vstack([xn, np.zeros((pad, xn.shape[1]))]))
            ys.append(np.concatenate([labels, np.full(pad, np.nan)]))
    x = np.array(xs)
    y = np.array(ys)
    mask = ~np.isnan(y)
    y0 = np.where(mask, y, 0.0)
    n_valid = mask.sum()
    # Start the output at the label base rate; with most labels high, a zero
    # bias makes Adam drag the whole model through the sigmoid's flat region
    # where gradients die before anything input-dependent is learned.
    base = float(np.clip(y0.sum() / n_valid, 1e-3, 1.0 - 1e-3))
    model.store.params["fc3.b"][:] = math.log(base / (1.0 - base))
    for _ in range(epochs):
        model.store.zero_grads()
        scores, cache = model._forward(x)
        diff = np.where(mask, scores - y0, 0.0)
        loss = float((diff ** 2).sum() / n_valid)
        if not np.isfinite(loss):
            raise tc.Diverged("ranker loss is not finite")
        model._backward(cache, 2.0 * diff / n_valid)
        tc.optimizer_step(model.store, lr)
        model.train_losses.append(loss)
    return model


# ---------------------------------------------------------------------------
# ranking and purification
# ---------------------------------------------------------------------------

@dataclass
class RankedAnnotation:
    clip_id: str
    frame: int
    bbox: BoundingBox
    score: float
    percentile: float = None      # filled by rank()


def rank(annotations, policy: str = "inter"):
    """Assign rank percentiles (rank / pool size * 100, best first).

    `inter` ranks the whole pool together; `intra` ranks within each clip.
    Ties break by (clip id, frame), so the ordering is a deterministic
    permutation of the input.
    """
    if policy not in ("intra", "inter"):
        raise ValueError("policy must be 'intra' or 'inter'")
    if policy == "inter":
        pools = [list(annotations)]
    else:
        by_clip = {}
        for a in annotations:
            by_clip.setdefault(a.clip_id, []).append(a)
        pools = [by_clip[c] for c in sorted(by_clip)]
    out = []
    for pool in pools:
        pool.sort(key=lambda a: (-a.score, a.clip_id, a.frame))
        n = len(pool)
        for pos, a in enumerate(pool):
            out.append(RankedAnnotation(a.clip_id, a.frame, a.bbox, a.score,
                                        percentile=(pos + 1) / n * 100.0))
    return out


def keep_top(ranked, fraction: float, policy: str = "inter"):
    """Top `fraction` of each ranking pool by count (ceil, so keep 0.5 of a
    5-item pool keeps 3)."""
    if policy == "inter":
        pools = [list(ranked)]
    else:
        by_clip = {}
        for a in ranked:
            by_clip.setdefault(a.clip_id, []).append(a)
        pools = [by_clip[c] for c in sorted(by_clip)]
    kept = []
    for pool in pools:
        pool.sort(key=lambda a: (a.percentile, a.clip_id, a.frame))
        kept.extend(pool[:math.ceil(len(pool) * fraction)])
    return kept


def purification_curve(ranked, ground_truth: dict, fractions,
                       policy: str = "inter"):
    """Metrics over the kept top-x% for each fraction.

    Args:
        ranked: RankedAnnotations with percentiles.
        ground_truth: clip id -> {frame -> BoundingBox}.

    Returns:
        list of rows {fraction, kept, evaluated, precision, median_nd};
        annotations on frames without ground truth are skipped.
    """
    rows = []
    for fraction in fractions:
        kept = keep_top(ranked, fraction, policy)
        ious, nds = [], []
        for a in kept:
            gt = ground_truth.get(a.clip_id, {}).get(a.frame)
            if gt is None:
                continue
            ious.append(iou(a.bbox, gt))
            nds.append(normalized_distance(a.bbox, gt))
        row = {"fraction": fraction, "kept": len(kept), "evaluated": len(ious)}
        if ious:
            row["precision"] = float(np.mean(np.asarray(ious) > 0.5))
            row["median_nd"] = float(np.median(nds))
        else:
            row["precision"] = 0.0
            row["median_nd"] = None
        rows.append(row)
    return rows


def write_annotations_jsonl(ranked, path):
    """One record per annotation, sorted by (clip, frame) for diffability."""
    rows = sorted(ranked, key=lambda a: (a.clip_id, a.frame))
    with open(path, "w") as f:
        for a in rows:
            f.write(json.dumps(
                {"clip": a.clip_id, "frame": a.frame, "cx": a.bbox.cx,
                 "cy": a.bbox.cy, "w": a.bbox.w, "h": a.bbox.h,
                 "score": a.score, "percentile": a.percentile},
                sort_keys=True) + "\n")


def read_annotations_jsonl(path):
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            r = json.loads(line)
            out.append(RankedAnnotation(
                r["clip"], int(r["frame"]),
                BoundingBox(r["cx"], r["cy"], r["w"], r["h"]),
                r["score"], r.get("percentile")))
    return out
