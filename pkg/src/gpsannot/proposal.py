"""Candidate object proposal from optical-flow tracks.

Per frame, moving flow points are grouped twice: once with plain
density-based clustering at a small radius, and once at a large radius with
an affinity constraint that separates nearby-but-unrelated groups.  The union
of both cluster sets forms the frame's candidate objects.  Candidates are
then linked across frames into candidate object flows (COFs) by member
overlap, and COFs of objects that halt are extended through the stationary
span of their member tracks.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundingBox, Homography, frame_to_world_array, iou

SOURCE_SMALL = "basic-small"
SOURCE_AC_LARGE = "ac-large"

# headings are undefined below this ground speed (m/s)
MIN_HEADING_SPEED = 0.5


@dataclass
class ProposalConfig:
    eps_small: float = 20.0
    eps_large: float = 50.0
    min_pts: int = 3
    # a flow point is "moving" at t when it travels more than this many
    # pixels over a window of this many seconds centered on t
    motion_window_s: float = 1.0
    motion_threshold_px: float = 2.0
    # COFs link when shared members / smaller member set exceeds this
    link_ratio: float = 0.5
    # stationary extension runs while this fraction of boundary members persists
    extend_persist_ratio: float = 0.5
    # only COFs with at least this much native (pre-extension) span extend
    extend_min_native_s: float = 0.3
    # an affinity-pass track duplicating one small-pass track at this IoU on
    # this fraction of its frames is a twin and is suppressed
    twin_iou: float = 0.9
    twin_coverage: float = 0.9


def compute_moving_flags(positions: np.ndarray, fps: float,
                         window_s: float = 1.0, threshold_px: float = 2.0) -> np.ndarray:
    """Per-frame motion flag for one flow track.

    Args:
        positions: (n, 2) pixel positions on consecutive frames.
        fps: frames per second.

    Returns:
        (n,) bool; True where the displacement across a centered window of
        `window_s` seconds (clipped at the track ends) exceeds `threshold_px`.
    """
    positions = np.asarray(positions, dtype=float)
    n = positions.shape[0]
    half = max(1, int(round(window_s * fps / 2.0)))
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half, n - 1)
    disp = np.linalg.norm(positions[hi] - positions[lo], axis=1)
    return disp > threshold_px


@dataclass
class FlowTrack:
    """One optical-flow point track over a contiguous frame span."""

    track_id: int
    first_frame: int
    positions: np.ndarray          # (n, 2) float pixels
    moving: np.ndarray             # (n,) bool

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.moving = np.asarray(self.moving, dtype=bool)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError("positions must be (n, 2)")
        if self.moving.shape[0] != self.positions.shape[0]:
            raise ValueError("moving flags must match positions length")

    @property
    def last_frame(self) -> int:
        return self.first_frame + len(self.positions) - 1

    def has_frame(self, frame: int) -> bool:
        return self.first_frame <= frame <= self.last_frame

    def position_at(self, frame: int) -> np.ndarray:
        return self.positions[frame - self.first_frame]

    def moving_at(self, frame: int) -> bool:
        return bool(self.moving[frame - self.first_frame])


class AffinityTable:
    """Accumulated pairwise affinity between flow tracks.

    Scores are symmetric, default to 0 for unseen pairs, and are clamped to
    [-1000, 1000] so long clips cannot saturate floats.
    """

    CLAMP = 1000.0

    def __init__(self):
        self._index: dict[int, int] = {}
        self._matrix = np.zeros((0, 0))

    def _rows(self, track_ids) -> np.ndarray:
        new = [t for t in track_ids if t not in self._index]
        if new:
            for t in new:
                self._index[t] = len(self._index)
            grown = np.zeros((len(self._index), len(self._index)))
            old = self._matrix.shape[0]
            grown[:old, :old] = self._matrix
            self._matrix = grown
        return np.array([self._index[t] for t in track_ids], dtype=int)

    def score(self, a: int, b: int) -> float:
        ia = self._index.get(a)
        ib = self._index.get(b)
        if ia is None or ib is None:
            return 0.0
        return float(self._matrix[ia, ib])

    def submatrix(self, track_ids) -> np.ndarray:
        rows = self._rows(track_ids)
        return self._matrix[np.ix_(rows, rows)]

    def apply(self, track_ids, close: np.ndarray, co_clustered: np.ndarray):
        """Accumulate one frame of evidence over the given tracks.

        `close` and `co_clustered` are (m, m) bool matrices over `track_ids`.
        Pairs both close and co-clustered this frame gain 1.0; pairs not
        co-clustered lose 0.5.  Mere proximity without co-clustering earns
        nothing, otherwise two objects travelling in parallel would build
        positive affinity and eventually merge.
        """
        m = len(track_ids)
        if m == 0:
            return
        delta = (close & co_clustered).astype(float) - 0.5 * (~co_clustered)
        np.fill_diagonal(delta, 0.0)
        rows = self._rows(track_ids)
        block = self._matrix[np.ix_(rows, rows)]
        block += delta
        np.clip(block, -self.CLAMP, self.CLAMP, out=block)
        self._matrix[np.ix_(rows, rows)] = block


@dataclass
class FrameClusterObs:
    """One frame's clustering outcome, as consumed by the affinity update."""

    track_ids: list
    close: np.ndarray          # (m, m) bool: pairwise distance within the large radius
    co_clustered: np.ndarray   # (m, m) bool: same affinity-constrained cluster


def update_affinity(table: AffinityTable, obs: FrameClusterObs) -> AffinityTable:
    """Fold one frame's clustering outcome into the running affinity table."""
    table.apply(obs.track_ids, obs.close, obs.co_clustered)
    return table


def _labels_from_adjacency(adj: np.ndarray, min_pts: int) -> np.ndarray:
    """Density-based cluster labels given a boolean adjacency (incl. self).

    Core points have at least `min_pts` neighbors (self included).  Clusters
    grow breadth-first from the lowest-index unlabeled core point, so labels
    are deterministic for a fixed point order.  Noise points get -1.
    """
    n = adj.shape[0]
    labels = np.full(n, -1, dtype=int)
    core = adj.sum(axis=1) >= min_pts
    cluster = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = cluster
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            for q in np.flatnonzero(adj[p]):
                if labels[q] == -1:
                    labels[q] = cluster
                    if core[q]:
                        queue.append(q)
        cluster += 1
    return labels


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Cluster labels for 2-D points; -1 marks noise."""
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        return np.zeros(0, dtype=int)
    d = np.linalg.norm(points[:, None] - points[None, :], axis=2)
    return _labels_from_adjacency(d <= eps, min_pts)


def dbscan_ac(points: np.ndarray, track_ids, eps: float, min_pts: int,
              table: AffinityTable) -> np.ndarray:
    """Affinity-constrained clustering: neighbors must also have positive
    accumulated affinity, so adjacent groups with a history of separation do
    not merge even inside the radius."""
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        return np.zeros(0, dtype=int)
    d = np.linalg.norm(points[:, None] - points[None, :], axis=2)
    aff = table.submatrix(track_ids)
    adj = (d <= eps) & (aff > 0.0)
    np.fill_diagonal(adj, True)
    return _labels_from_adjacency(adj, min_pts)


@dataclass
class CandidateObject:
    """One per-frame candidate: a cluster of moving flow points."""

    frame: int
    member_ids: frozenset
    bbox: BoundingBox
    source: str                  # SOURCE_SMALL or SOURCE_AC_LARGE
    extended: bool = False       # True for stationary-extension frames


def _hull_bbox(points: np.ndarray) -> BoundingBox:
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)  # bbox sides must stay positive
    c = (lo + hi) / 2.0
    return BoundingBox(float(c[0]), float(c[1]), float(span[0]), float(span[1]))


def _clusters_to_candidates(frame, labels, points, track_ids, source):
    out = []
    for lab in range(labels.max() + 1 if len(labels) else 0):
        mask = labels == lab
        members = frozenset(t for t, m in zip(track_ids, mask) if m)
        out.append(CandidateObject(frame, members, _hull_bbox(points[mask]), source))
    return out


def propose_candidates(flow_tracks, n_frames: int, config: ProposalConfig = None):
    """Run both clusterings over every frame.

    Args:
        flow_tracks: list of FlowTrack.
        n_frames: clip length in frames.

    Returns:
        (candidates_by_frame, table): a list of per-frame candidate lists
        (small-radius clusters first, affinity-constrained ones after) and
        the final affinity table.
    """
    config = config or ProposalConfig()
    table = AffinityTable()
    candidates_by_frame = [[] for _ in range(n_frames)]
    for frame in range(n_frames):
        present = [t for t in flow_tracks if t.has_frame(frame) and t.moving_at(frame)]
        if not present:
            continue
        ids = [t.track_id for t in present]
        pts = np.array([t.position_at(frame) for t in present])
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)

        labels_small = _labels_from_adjacency(d <= config.eps_small, config.min_pts)
        aff = table.submatrix(ids)
        adj_ac = (d <= config.eps_large) & (aff > 0.0)
        np.fill_diagonal(adj_ac, True)
        labels_ac = _labels_from_adjacency(adj_ac, config.min_pts)

        cands = _clusters_to_candidates(frame, labels_small, pts, ids, SOURCE_SMALL)
        cands.extend(_clusters_to_candidates(frame, labels_ac, pts, ids,
                                             SOURCE_AC_LARGE))
        candidates_by_frame[frame] = cands

        # Affinity evidence comes from the unconstrained small-radius pass:
        # the constrained pass cannot feed itself or no positive score could
        # ever arise.
        close = d <= config.eps_large
        co = ((labels_small[:, None] == labels_small[None, :])
              & (labels_small[:, None] != -1))
        table.apply(ids, close, co)
    return candidates_by_frame, table


@dataclass
class CofTrack:
    """Candidate object flow: one candidate per frame over a contiguous span."""

    cof_id: int
    source: str
    first_frame: int
    candidates: list = field(default_factory=list)
    # filled by finalize(): world-ground positions, speeds, headings per frame
    world: np.ndarray = None        # (n, 2) meters
    speeds: np.ndarray = None       # (n,) m/s
    headings: list = None           # list of (2,) unit vectors or None

    @property
    def last_frame(self) -> int:
        return self.first_frame + len(self.candidates) - 1

    def has_frame(self, frame: int) -> bool:
        return self.first_frame <= frame <= self.last_frame

    def candidate_at(self, frame: int) -> CandidateObject:
        return self.candidates[frame - self.first_frame]

    def world_at(self, frame: int) -> np.ndarray:
        return self.world[frame - self.first_frame]

    def speed_at(self, frame: int) -> float:
        return float(self.speeds[frame - self.first_frame])

    def heading_at(self, frame: int):
        return self.headings[frame - self.first_frame]

    def finalize(self, homography: Homography, fps: float):
        """Compute world positions, speeds and headings for every frame.

        Speed uses a central difference of the bbox bottom-center world
        position about half a second out on each side (clipped to the span).
        Frames added by stationary extension get speed 0 and no heading.
        """
        n = len(self.candidates)
        bc = np.array([[c.bbox.cx, c.bbox.cy + c.bbox.h / 2.0]
                       for c in self.candidates])
        self.world = frame_to_world_array(homography, bc)
        self.speeds = np.zeros(n)
        self.headings = [None] * n
        half = max(1, int(round(fps / 2.0)))
        for i in range(n):
            if self.candidates[i].extended:
                continue  # stationary by construction
            lo, hi = i, i
            # clip the difference stencil to non-extended frames
            for j in range(i - 1, max(-1, i - half - 1), -1):
                if self.candidates[j].extended:
                    break
                lo = j
            for j in range(i + 1, min(n, i + half + 1)):
                if self.candidates[j].extended:
                    break
                hi = j
            if hi == lo:
                continue
            dt = (hi - lo) / fps
            vel = (self.world[hi] - self.world[lo]) / dt
            speed = float(np.linalg.norm(vel))
            self.speeds[i] = speed
            if speed > MIN_HEADING_SPEED:
                self.headings[i] = vel / speed


def link_cofs(candidates_by_frame, homography: Homography, fps: float,
              config: ProposalConfig = None):
    """Link per-frame candidates into COFs by member overlap.

    Two candidates on consecutive frames (same source) link when
    |shared members| / |smaller member set| strictly exceeds the ratio
    threshold.  When several links compete, higher ratios win; ties fall to
    the lower frame-order indices.  Every candidate lands in exactly one COF
    of its source.

    Returns:
        list of finalized CofTrack.
    """
    config = config or ProposalConfig()
    cofs = []
    # open chains per source: candidate on the previous frame -> CofTrack
    open_chains: dict[str, list] = {SOURCE_SMALL: [], SOURCE_AC_LARGE: []}
    for frame, cands in enumerate(candidates_by_frame):
        by_source = {SOURCE_SMALL: [], SOURCE_AC_LARGE: []}
        for c in cands:
            by_source[c.source].append(c)
        for source in (SOURCE_SMALL, SOURCE_AC_LARGE):
            prev = open_chains[source]
            cur = by_source[source]
            pairs = []
            for i, chain in enumerate(prev):
                a = chain.candidates[-1].member_ids
                for j, cand in enumerate(cur):
                    b = cand.member_ids
                    smaller = min(len(a), len(b))
                    if smaller == 0:
                        continue
                    ratio = len(a & b) / smaller
                    if ratio > config.link_ratio:
                        pairs.append((-ratio, i, j))
            pairs.sort()
            used_prev, used_cur = set(), set()
            next_open = []
            for neg_ratio, i, j in pairs:
                if i in used_prev or j in used_cur:
                    continue
                used_prev.add(i)
                used_cur.add(j)
                prev[i].candidates.append(cur[j])
                next_open.append(prev[i])
            for i, chain in enumerate(prev):
                if i not in used_prev:
                    cofs.append(chain)  # chain closed
            for j, cand in enumerate(cur):
                if j not in used_cur:
                    chain = CofTrack(len(cofs) + sum(len(v) for v in open_chains.values())
                                     + len(next_open), source, frame, [cand])
                    next_open.append(chain)
            open_chains[source] = next_open
    for source in (SOURCE_SMALL, SOURCE_AC_LARGE):
        cofs.extend(open_chains[source])
    # renumber deterministically: by (first frame, source, original order)
    cofs.sort(key=lambda c: (c.first_frame, c.source, c.cof_id))
    for k, cof in enumerate(cofs):
        cof.cof_id = k
        cof.finalize(homography, fps)
    return cofs


def suppress_twin_tracks(cofs, config: ProposalConfig = None):
    """Drop affinity-pass COFs that duplicate one small-pass COF box-for-box.

    An isolated object clusters identically under both passes, so every such
    object yields twin tracks and each downstream per-frame state count
    doubles.  An affinity-pass COF is dropped only when a single small-pass
    COF matches its bbox (IoU >= twin_iou) on at least twin_coverage of its
    own frames; a track that bridges a small-pass identity change or merges
    groups differently anywhere carries distinct evidence and survives.

    Returns:
        the filtered list, ids renumbered.
    """
    config = config or ProposalConfig()
    small = [c for c in cofs if c.source == SOURCE_SMALL]
    kept = []
    for cof in cofs:
        if cof.source == SOURCE_AC_LARGE:
            need = config.twin_coverage * len(cof.candidates)
            dup = False
            for s in small:
                lo = max(cof.first_frame, s.first_frame)
                hi = min(cof.last_frame, s.last_frame)
                if hi - lo + 1 < need:
                    continue
                hits = sum(iou(cof.candidate_at(f).bbox, s.candidate_at(f).bbox)
                           >= config.twin_iou for f in range(lo, hi + 1))
                if hits >= need:
                    dup = True
                    break
            if dup:
                continue
        kept.append(cof)
    for k, cof in enumerate(kept):
        cof.cof_id = k
    return kept


def extend_stationary(cofs, flow_tracks, homography: Homography, fps: float,
                      n_frames: int, config: ProposalConfig = None):
    """Extend COFs through frames where their member tracks stand still.

    Moving-only clustering drops an object once it halts, so its COF ends
    while the flow tracks persist.  Walk outward from each COF end while more
    than half of the boundary frame's members are still present and the group
    as a whole stays put; carry the boundary bbox along the members' mean
    displacement.  Extended frames get speed 0 and no heading.

    The stop test uses the surviving members' mean position rather than
    their individual moving flags: the flags are computed on a centered
    window, so they stay raised for a few frames past an actual halt and
    would end the walk before it starts.

    COFs shorter than extend_min_native_s are left alone: a cluster that
    exists for only a frame or two is flow noise, and walking it outward
    manufactures a long phantom object.

    Returns:
        the same list with candidates appended/prepended in place.
    """
    config = config or ProposalConfig()
    window = max(1, int(round(config.motion_window_s * fps)))
    min_native = max(1, int(round(config.extend_min_native_s * fps)))
    tracks = {t.track_id: t for t in flow_tracks}
    for cof in cofs:
        if len(cof.candidates) < min_native:
            continue
        for direction in (1, -1):
            boundary_frame = cof.last_frame if direction == 1 else cof.first_frame
            boundary = cof.candidate_at(boundary_frame)
            members = [tracks[t] for t in boundary.member_ids if t in tracks]
            if not members:
                continue
            base = {t.track_id: t.position_at(boundary_frame) for t in members
                    if t.has_frame(boundary_frame)}
            frame = boundary_frame + direction
            added = []
            shifts = [np.zeros(2)]
            while 0 <= frame < n_frames:
                present = [t for t in members if t.has_frame(frame) and t.track_id in base]
                if len(present) <= config.extend_persist_ratio * len(boundary.member_ids):
                    break
                shift = np.mean([t.position_at(frame) - base[t.track_id]
                                 for t in present], axis=0)
                moved = np.linalg.norm(shift - shifts[max(0, len(shifts) - window)])
                if moved > config.motion_threshold_px:
                    break  # the group is moving again; clustering takes over
                shifts.append(shift)
                bb = boundary.bbox
                added.append(CandidateObject(
                    frame,
                    frozenset(t.track_id for t in present),
                    BoundingBox(bb.cx + float(shift[0]), bb.cy + float(shift[1]),
                                bb.w, bb.h),
                    boundary.source,
                    extended=True,
                ))
                frame += direction
            if added:
                if direction == 1:
                    cof.candidates.extend(added)
                else:
                    cof.first_frame = added[-1].frame
                    cof.candidates = added[::-1] + cof.candidates
        cof.finalize(homography, fps)
    return cofs
