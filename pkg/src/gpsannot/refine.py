"""Learnable outlier filtering of matched bounding-box sequences.

One filter pass splits the input into the raw sequence and a smoothed copy,
predicts a per-element gate G in (0,1) from a small conv+dense head, and
mixes Y = X_raw*(1-G) + X_smooth*G.  The full refiner applies this pass 16
times with shared weights, re-smoothing each iterate, inside a per-sequence
normalize/denormalize envelope.  Trained end-to-end with L1 loss against
ground-truth boxes; gradients flow through all 16 iterations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc


@dataclass
class BoxSequence:
    """Per-frame (cx, cy, w, h) boxes over a contiguous frame run.

    Pixel-space sequences keep w, h > 0; normalized/high-passed intermediates
    reuse the type without that guarantee.  `gt` optionally carries aligned
    ground-truth rows (NaN rows where no ground truth exists).
    """

    frames: np.ndarray            # (N,) int
    values: np.ndarray            # (N, 4)
    fps: float
    gt: np.ndarray = None         # (N, 4) or None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape != (len(self.frames), 4):
            raise ValueError("values must be (N, 4) aligned with frames")
        if len(self.frames) < 1:
            raise ValueError("empty sequence")
        if self.gt is not None:
            self.gt = np.asarray(self.gt, dtype=float)
            if self.gt.shape != self.values.shape:
                raise ValueError("gt must match values shape")

    def boxes(self) -> dict:
        from .geometry import BoundingBox
        return {int(f): BoundingBox(*row)
                for f, row in zip(self.frames, self.values)}


def sequences_from_boxes(boxes: dict, fps: float, gt: dict = None):
    """Split a frame->BoundingBox dict into contiguous-run BoxSequences."""
    frames = sorted(boxes)
    runs = []
    start = 0
    for i in range(1, len(frames) + 1):
        if i == len(frames) or frames[i] != frames[i - 1] + 1:
            runs.append(frames[start:i])
            start = i
    out = []
    for run in runs:
        values = np.array([[boxes[f].cx, boxes[f].cy, boxes[f].w, boxes[f].h]
                           for f in run])
        gt_arr = None
        if gt is not None:
            gt_arr = np.full((len(run), 4), np.nan)
            for i, f in enumerate(run):
                if f in gt:
                    b = gt[f]
                    gt_arr[i] = (b.cx, b.cy, b.w, b.h)
        out.append(BoxSequence(np.array(run), values, fps, gt_arr))
    return out


def _odd_window(x: float) -> int:
    w = max(1, int(round(x)))
    return w if w % 2 == 1 else w + 1


def _moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average along axis 1 of (B, N, C); the window is
    clipped at the sequence edges (mean over the in-range part)."""
    if window <= 1:
        return x.copy()
    r = window // 2
    b, n, c = x.shape
    cs = np.zeros((b, n + 1, c))
    np.cumsum(x, axis=1, out=cs[:, 1:])
    idx = np.arange(n)
    lo = np.maximum(idx - r, 0)
    hi = np.minimum(idx + r, n - 1)
    counts = (hi - lo + 1).astype(float)
    return (cs[:, hi + 1] - cs[:, lo]) / counts[None, :, None]


def _moving_average_backward(dy: np.ndarray, window: int) -> np.ndarray:
    # transpose of the clipped mean: scale by each row's count, then apply
    # the same clipped windowed sum
    if window <= 1:
        return dy.copy()
    r = window // 2
    b, n, c = dy.shape
    idx = np.arange(n)
    lo = np.maximum(idx - r, 0)
    hi = np.minimum(idx + r, n - 1)
    counts = (hi - lo + 1).astype(float)
    h = dy / counts[None, :, None]
    cs = np.zeros((b, n + 1, c))
    np.cumsum(h, axis=1, out=cs[:, 1:])
    return cs[:, hi + 1] - cs[:, lo]


def smooth_sequence(x: BoxSequence, window_s: float) -> BoxSequence:
    """Centered moving average of each channel; window rounded to odd."""
    if window_s <= 0:
        raise ValueError("window_s must be > 0")
    window = _odd_window(window_s * x.fps)
    sm = _moving_average(x.values[None], window)[0]
    return BoxSequence(x.frames, sm, x.fps, x.gt)


@dataclass
class RefinerConfig:
    window_s: float = 1.0         # smoothing window
    kernel_s: float = 1.0         # gate conv kernel (rounded to odd frames)
    channels: int = 16
    n_iterations: int = 16


class RefinerModel:
    """Shared-weight gated mixer applied n_iterations times."""

    def __init__(self, config: RefinerConfig = None, fps: float = 10.0,
                 seed: int = 0, store: tc.ParamStore = None):
        self.config = config or RefinerConfig()
        self.fps = float(fps)
        self.window = _odd_window(self.config.window_s * self.fps)
        self.kernel = _odd_window(self.config.kernel_s * self.fps)
        c = self.config.channels
        if store is not None:
            self.store = store
        else:
            self.store = tc.ParamStore(seed)
            k = self.kernel
            self.store.add("conv.kernel", (k, 4, c), fan_in=4 * k, fan_out=c * k)
            self.store.add("conv.bias", (c,), 0, 0, zero=True)
            self.store.add("fc1.w", (c, c), fan_in=c, fan_out=c)
            self.store.add("fc1.b", (c,), 0, 0, zero=True)
            self.store.add("gate.w", (c, 4), fan_in=c, fan_out=4)
            # negative bias starts the gate nearly closed, so an untrained
            # model is close to the identity instead of a heavy smoother
            self.store.add("gate.b", (4,), 0, 0, zero=True)
            self.store.params["gate.b"][:] = -2.0
        self.train_losses = []

    # -- gate head ----------------------------------------------------------

    def _gate_forward(self, x):
        p = self.store.params
        c = tc.conv1d(x, p["conv.kernel"], p["conv.bias"])
        r1 = tc.relu(c)
        d = tc.dense(r1, p["fc1.w"], p["fc1.b"])
        r2 = tc.relu(d)
        g = tc.dense(r2, p["gate.w"], p["gate.b"])
        gate = tc.sigmoid(g)
        return gate, (x, c, r1, d, r2, gate)

    def _gate_backward(self, cache, dgate):
        x, c, r1, d, r2, gate = cache
        p, acc = self.store.params, self.store.accumulate
        dg = tc.sigmoid_backward(gate, dgate)
        dr2, dw, db = tc.dense_backward(r2, p["gate.w"], dg)
        acc("gate.w", dw)
        acc("gate.b", db)
        dd = tc.relu_backward(d, dr2)
        dr1, dw, db = tc.dense_backward(r1, p["fc1.w"], dd)
        acc("fc1.w", dw)
        acc("fc1.b", db)
        dc = tc.relu_backward(c, dr1)
        dx, dk, db = tc.conv1d_backward(x, p["conv.kernel"], dc)
        acc("conv.kernel", dk)
        acc("conv.bias", db)
        return dx

    # -- iterated filter ----------------------------------------------------

    def _filter_once(self, x, force_gate=None):
        smooth = _moving_average(x, self.window)
        if force_gate is None:
            gate, gcache = self._gate_forward(x)
        else:
            gate, gcache = np.full_like(x, float(force_gate)), None
        y = x * (1.0 - gate) + smooth * gate
        return y, (x, smooth, gate, gcache)

    def _forward(self, x, force_gate=None):
        caches = []
        for _ in range(self.config.n_iterations):
            x, cache = self._filter_once(x, force_gate)
            caches.append(cache)
        return x, caches

    def _backward(self, caches, dy):
        for x, smooth, gate, gcache in reversed(caches):
            dx = dy * (1.0 - gate)
            dx += _moving_average_backward(dy * gate, self.window)
            if gcache is not None:
                dgate = dy * (smooth - x)
                dx += self._gate_backward(gcache, dgate)
            dy = dx
        return dy

    # -- public -------------------------------------------------------------

    def normalization(self, values):
        """Per-sequence, per-channel center and scale used around the net."""
        mu = values.mean(axis=-2, keepdims=True)
        sc = np.maximum(values.std(axis=-2, keepdims=True), 1e-6)
        return mu, sc

    def refine(self, seq: BoxSequence, force_gate=None) -> BoxSequence:
        """Full refinement: normalize, iterate the filter, denormalize,
        clamp w/h to at least 1 px."""
        mu, sc = self.normalization(seq.values)
        xn = ((seq.values - mu) / sc)[None]
        y, _ = self._forward(xn, force_gate)
        out = y[0] * sc + mu
        out[:, 2:] = np.maximum(out[:, 2:], 1.0)
        return BoxSequence(seq.frames, out, seq.fps, seq.gt)

    def save(self, path):
        blob = {"kind": "refiner", "fps": self.fps,
                "config": {"window_s": self.config.window_s,
                           "kernel_s": self.config.kernel_s,
                           "channels": self.config.channels,
                           "n_iterations": self.config.n_iterations},
                "store": self.store.to_blob()}
        with open(path, "w") as f:
            json.dump(blob, f, sort_keys=True)

    @staticmethod
    def load(path) -> "RefinerModel":
        with open(path) as f:
            blob = json.load(f)
        if blob.get("kind") != "refiner":
            raise ValueError("not a refiner checkpoint: %s" % path)
        config = RefinerConfig(**blob["config"])
        store = tc.ParamStore.from_blob(blob["store"])
        return RefinerModel(config, blob["fps"], store=store)


def outlier_filter_once(x: BoxSequence, model: RefinerModel,
                        force_gate=None) -> BoxSequence:
    """One gated raw/smooth mix on an already-normalized sequence."""
    y, _ = model._filter_once(x.values[None], force_gate)
    return BoxSequence(x.frames, y[0], x.fps, x.gt)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def corrupt_sequence(values: np.ndarray, rng: np.random.Generator,
                     fps: float) -> np.ndarray:
    """Synthetic matcher-like damage applied to a clean box sequence:
    per-frame spikes (w/h scaled 1.5-3x, centers thrown up to tens of px),
    oversize-merge segments lasting 2-3 s, and center jitter at the scale
    of real flow-hull wobble.

    The background jitter matters: training only on surgically clean
    sequences makes the gate read ordinary hull wobble as damage and smooth
    through direction changes, which hurts more than it helps."""
    out = np.asarray(values, dtype=float).copy()
    n = len(out)
    out[:, :2] += rng.normal(0.0, 1.2, (n, 2))
    n_spikes = max(1, int(round(0.06 * n)))
    for i in rng.choice(n, size=min(n_spikes, n), replace=False):
        out[i, 2:] *= rng.uniform(1.5, 3.0)
        # heavy-tailed center throws: identity errors land a lane away,
        # not within a box width
        out[i, :2] += rng.uniform(-1.0, 1.0, 2) * rng.uniform(4.0, 60.0)
    for _ in range(int(rng.integers(0, 3))):
        length = int(round(rng.uniform(2.0, 3.0) * fps))
        start = int(rng.integers(0, max(n - length, 1)))
        seg = slice(start, min(start + length, n))
        scale = rng.uniform(1.4, 2.2)
        out[seg, 2:] *= scale
        out[seg, :2] += rng.uniform(-6.0, 6.0, 2)
    return out


def _stack_windows(pairs, window_len: int):
    """Cut aligned fixed-length windows out of (corrupted, target, weight)
    pairs and stack them into one training batch.

    Sequences longer than `window_len` contribute tiled windows so their
    middles are covered; shorter ones are edge-replicated up to length with
    the padding masked out of the loss via NaN targets.  Weights let a pair
    count several times without paying for duplicate forward passes."""
    xs, ts, ws = [], [], []
    for pair in pairs:
        seq, target = pair[0], pair[1]
        weight = float(pair[2]) if len(pair) > 2 else 1.0
        v = seq.values
        t = np.asarray(target.values if isinstance(target, BoxSequence)
                       else target, dtype=float)
        n = len(v)
        if n >= window_len:
            starts = list(range(0, n - window_len + 1, window_len))
            if starts[-1] != n - window_len:
                starts.append(n - window_len)
            for s in starts:
                xs.append(v[s:s + window_len])
                ts.append(t[s:s + window_len])
                ws.append(weight)
        else:
            pad = window_len - n
            xs.append(np.vstack([v, np.repeat(v[-1:], pad, axis=0)]))
            ts.append(np.vstack([t, np.full((pad, 4), np.nan)]))
            ws.append(weight)
    return np.array(xs), np.array(ts), np.array(ws)


def train_refiner(pairs, seed: int, epochs: int = 150, lr: float = 0.01,
                  config: RefinerConfig = None, window_len: int = 120) -> RefinerModel:
    """Fit the refiner end-to-end: L1 between refine(corrupted) and ground
    truth, full-batch Adam, deterministic per seed.

    Args:
        pairs: list of (corrupted BoxSequence, target) or (corrupted,
            target, weight) tuples where target is a BoxSequence or an
            (N, 4) array; NaN target rows are masked out.
    """
    if not pairs:
        raise ValueError("need at least one training pair")
    fps = pairs[0][0].fps
    model = RefinerModel(config, fps, seed)
    if epochs == 0:
        return model
    x, t, w = _stack_windows(pairs, window_len)
    mask = ~np.isnan(t)
    t0 = np.where(mask, t, 0.0)
    w3 = w[:, None, None]
    n_valid = (mask * w3).sum()
    mu = x.mean(axis=1, keepdims=True)
    sc = np.maximum(x.std(axis=1, keepdims=True), 1e-6)
    xn = (x - mu) / sc
    for _ in range(epochs):
        model.store.zero_grads()
        yn, caches = model._forward(xn)
        out = yn * sc + mu
        diff = np.where(mask, out - t0, 0.0)
        loss = float((np.abs(diff) * w3).sum() / n_valid)
        if not np.isfinite(loss):
            raise tc.Diverged("refiner loss is not finite")
        dout = np.sign(diff) * w3 / n_valid
        model._backward(caches, dout * sc)
        tc.optimizer_step(model.store, lr)
        model.train_losses.append(loss)
    return model
