"""Classical association baselines: Kalman filtering, Hungarian assignment,
SORT, EMD detection linking, and the pseudo-ground-truth generator.

The Kalman state is the standard SORT parameterization (cx, cy, s, r) plus
velocities for (cx, cy, s); aspect ratio r is modeled as constant.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from .core import AnnotatedSequence, BoundingBox, Detection, Track, centroid_distance, iou
from .mot_io import RunConfig


class NumericalError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# Kalman filter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KalmanParams:
    # noise scales relative to box dimension (sqrt of area)
    measurement_frac: float = 1.0 / 20.0
    process_frac: float = 1.0 / 160.0
    aspect_meas_std: float = 1e-2
    init_velocity_std_frac: float = 1.0 / 8.0


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray        # (7,): cx, cy, s, r, vcx, vcy, vs
    covariance: np.ndarray  # (7, 7) symmetric PSD

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        if mean.shape != (7,) or cov.shape != (7, 7):
            raise ValueError("KalmanState requires a 7-vector mean and 7x7 covariance")
        if not np.allclose(cov, cov.T, atol=1e-9):
            raise ValueError("covariance not symmetric")
        if mean[3] <= 0:
            raise ValueError(f"aspect ratio must be positive, got {mean[3]}")


def box_to_obs(box: BoundingBox) -> np.ndarray:
    cx, cy = box.center
    return np.array([cx, cy, box.area, box.w / box.h], dtype=np.float64)


def obs_to_box(z: np.ndarray) -> BoundingBox:
    cx, cy, s, r = z
    s = max(float(s), 1e-6)
    r = max(float(r), 1e-6)
    w = math.sqrt(s * r)
    h = math.sqrt(s / r)
    return BoundingBox(cx - w / 2.0, cy - h / 2.0, w, h)


def _scale(mean: np.ndarray) -> float:
    # characteristic box dimension used to scale noise
    return math.sqrt(max(float(mean[2]), 1.0))


def _transition(dt: float) -> np.ndarray:
    f = np.eye(7)
    f[0, 4] = dt
    f[1, 5] = dt
    f[2, 6] = dt
    return f


_H = np.zeros((4, 7))
_H[:4, :4] = np.eye(4)


def _process_noise(mean: np.ndarray, dt: float, params: KalmanParams) -> np.ndarray:
    dim = _scale(mean)
    std_pos = dim * params.process_frac
    std_area = max(float(mean[2]), 1.0) * params.process_frac
    stds = np.array([std_pos, std_pos, std_area, params.aspect_meas_std / 10.0,
                     std_pos, std_pos, std_area])
    return np.diag(stds ** 2) * dt


def _measurement_noise(mean: np.ndarray, params: KalmanParams) -> np.ndarray:
    dim = _scale(mean)
    std_pos = dim * params.measurement_frac
    std_area = max(float(mean[2]), 1.0) * params.measurement_frac
    return np.diag(np.array([std_pos, std_pos, std_area, params.aspect_meas_std]) ** 2)


def kalman_init(box: BoundingBox, params: KalmanParams = KalmanParams()) -> KalmanState:
    z = box_to_obs(box)
    mean = np.concatenate([z, np.zeros(3)])
    dim = _scale(mean)
    std = np.array([
        dim * params.measurement_frac,
        dim * params.measurement_frac,
        max(z[2], 1.0) * params.measurement_frac,
        params.aspect_meas_std,
        dim * params.init_velocity_std_frac,
        dim * params.init_velocity_std_frac,
        max(z[2], 1.0) * params.init_velocity_std_frac,
    ])
    return KalmanState(mean, np.diag(std ** 2))


def kalman_predict(state: KalmanState, dt: float = 1.0,
                   params: KalmanParams = KalmanParams()) -> KalmanState:
    """Constant-velocity propagation; covariance grows by process noise."""
    if dt < 1:
        raise ValueError(f"dt must be >= 1, got {dt}")
    f = _transition(dt)
    mean = f @ state.mean
    cov = f @ state.covariance @ f.T + _process_noise(state.mean, dt, params)
    return KalmanState(mean, 0.5 * (cov + cov.T))


def kalman_update(state: KalmanState, obs: BoundingBox,
                  params: KalmanParams = KalmanParams(),
                  measurement_noise: np.ndarray | None = None) -> KalmanState:
    """Standard linear Kalman correction with observation (cx, cy, s, r)."""
    z = box_to_obs(obs)
    r_mat = measurement_noise if measurement_noise is not None \
        else _measurement_noise(state.mean, params)
    s_mat = _H @ state.covariance @ _H.T + r_mat
    try:
        gain = np.linalg.solve(s_mat, _H @ state.covariance).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"innovation covariance not invertible: {exc}") from None
    mean = state.mean + gain @ (z - _H @ state.mean)
    # Joseph form keeps the posterior covariance symmetric PSD
    ikh = np.eye(7) - gain @ _H
    cov = ikh @ state.covariance @ ikh.T + gain @ r_mat @ gain.T
    return KalmanState(mean, 0.5 * (cov + cov.T))


def state_to_box(state: KalmanState) -> BoundingBox:
    return obs_to_box(state.mean[:4])


# ---------------------------------------------------------------------------
# Assignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Assignment:
    pairs: tuple
    unmatched_rows: tuple
    unmatched_columns: tuple

    def __post_init__(self):
        rows = [r for r, _ in self.pairs]
        cols = [c for _, c in self.pairs]
        if len(rows) != len(set(rows)) or len(cols) != len(set(cols)):
            raise ValueError("assignment reuses a row or column")


def _finish_assignment(rows, cols, m, n) -> Assignment:
    pairs = sorted(zip(rows, cols))
    matched_r = {r for r, _ in pairs}
    matched_c = {c for _, c in pairs}
    return Assignment(
        pairs=tuple(pairs),
        unmatched_rows=tuple(i for i in range(m) if i not in matched_r),
        unmatched_columns=tuple(j for j in range(n) if j not in matched_c),
    )


def _embed_forbidden(cost: np.ndarray) -> tuple:
    """Replace +inf with a finite penalty large enough that optimal solutions
    use the fewest possible forbidden pairs."""
    finite = cost[np.isfinite(cost)]
    if finite.size == 0:
        return None, 0.0
    span = float(finite.max() - min(finite.min(), 0.0))
    big = span * (min(cost.shape) + 1) + 1.0
    filled = np.where(np.isfinite(cost), cost, big)
    return filled, big


def hungarian(cost) -> Assignment:
    """Minimum-cost one-to-one assignment of min(m, n) pairs.

    Entries of +inf forbid a pair; forbidden pairs are never returned (they
    become unmatched rows/columns instead).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a 2-D matrix, got shape {cost.shape}")
    m, n = cost.shape
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    if m == 0 or n == 0 or not np.isfinite(cost).any():
        return _finish_assignment([], [], m, n)
    filled, big = _embed_forbidden(cost)
    rows, cols = linear_sum_assignment(filled)
    keep = np.isfinite(cost[rows, cols])
    return _finish_assignment(rows[keep], cols[keep], m, n)


def emd_link_matrix(cost: np.ndarray) -> Assignment:
    """Solve the balanced unit-mass transportation problem on a cost matrix.

    The matrix is padded to square with constant-cost dummy nodes so equal
    unit masses reduce to a min-cost assignment; +inf forbids a pair.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m, n = cost.shape
    if m == 0 or n == 0 or not np.isfinite(cost).any():
        return _finish_assignment([], [], m, n)
    filled, big = _embed_forbidden(cost)
    size = max(m, n)
    padded = np.full((size, size), 0.0)
    padded[:m, :n] = filled

    # balanced transportation LP: rows supply 1, columns demand 1
    c = padded.ravel()
    a_eq = np.zeros((2 * size, size * size))
    for i in range(size):
        a_eq[i, i * size:(i + 1) * size] = 1.0           # row sums
        a_eq[size + i, i::size] = 1.0                     # column sums
    res = linprog(c, A_eq=a_eq, b_eq=np.ones(2 * size), bounds=(0, 1), method="highs")
    if not res.success:
        raise NumericalError(f"transportation LP failed: {res.message}")
    plan = res.x.reshape(size, size)
    rows, cols = np.nonzero(plan > 0.5)
    keep = [(r, col) for r, col in zip(rows, cols)
            if r < m and col < n and np.isfinite(cost[r, col])]
    return _finish_assignment([r for r, _ in keep], [c_ for _, c_ in keep], m, n)


def emd_link(active_tracks, detections, cfg: RunConfig) -> Assignment:
    """Link detections to tracks by optimal transport over centroid distance.

    Pairs farther apart than the gate distance are forbidden and end up
    unmatched.
    """
    gate = cfg.emd.gate_distance
    m, n = len(active_tracks), len(detections)
    cost = np.full((m, n), np.inf)
    for i, track in enumerate(active_tracks):
        last_frame = max(track.entries)
        last_box = track.entries[last_frame]
        for j, det in enumerate(detections):
            d = centroid_distance(last_box, det.box)
            if d <= gate:
                cost[i, j] = d
    return emd_link_matrix(cost)


# ---------------------------------------------------------------------------
# SORT
# ---------------------------------------------------------------------------

@dataclass
class TrackerEvents:
    initiated: list = field(default_factory=list)
    terminated: list = field(default_factory=list)
    continued: list = field(default_factory=list)


@dataclass
class _SortTrack:
    id: int
    state: KalmanState
    hits: int = 1
    consecutive_hits: int = 1
    time_since_update: int = 0
    reported: dict = field(default_factory=dict)   # frame -> BoundingBox


class SortTracker:
    """SORT: Kalman prediction + IoU-gated Hungarian association.

    Tracks report boxes once they accumulate `min_hits` consecutive matches
    and terminate after `max_age` frames without a match.
    """

    def __init__(self, cfg: RunConfig | None = None, params: KalmanParams = KalmanParams()):
        self.cfg = cfg or RunConfig()
        self.params = params
        self.tracks: list = []
        self.finished: list = []
        self._next_id = 1
        self._frame = 0

    def step(self, detections, frame: int | None = None) -> TrackerEvents:
        """Advance one frame with that frame's detections."""
        self._frame = frame if frame is not None else self._frame + 1
        events = TrackerEvents()
        sort_cfg = self.cfg.sort

        predicted = []
        for t in self.tracks:
            t.state = kalman_predict(t.state, 1.0, self.params)
            predicted.append(state_to_box(t.state))

        cost = np.full((len(self.tracks), len(detections)), np.inf)
        for i, pbox in enumerate(predicted):
            for j, det in enumerate(detections):
                overlap = iou(pbox, det.box)
                if overlap >= sort_cfg.iou_gate:
                    cost[i, j] = 1.0 - overlap
        assn = hungarian(cost)

        for i, j in assn.pairs:
            t = self.tracks[i]
            t.state = kalman_update(t.state, detections[j].box, self.params)
            t.hits += 1
            t.consecutive_hits = t.consecutive_hits + 1 if t.time_since_update == 0 else 1
            t.time_since_update = 0
            if t.consecutive_hits >= sort_cfg.min_hits:
                t.reported[self._frame] = state_to_box(t.state)
            events.continued.append(t.id)

        survivors = []
        for i in assn.unmatched_rows:
            t = self.tracks[i]
            t.time_since_update += 1
            if t.time_since_update > sort_cfg.max_age:
                events.terminated.append(t.id)
                self.finished.append(t)
            else:
                survivors.append(t)
        matched = [self.tracks[i] for i, _ in assn.pairs]

        initiated = []
        for j in assn.unmatched_columns:
            t = _SortTrack(id=self._next_id, state=kalman_init(detections[j].box, self.params))
            self._next_id += 1
            if sort_cfg.min_hits <= 1:
                t.reported[self._frame] = state_to_box(t.state)
            initiated.append(t)
            events.initiated.append(t.id)

        self.tracks = sorted(matched + survivors + initiated, key=lambda t: t.id)
        return events

    def to_sequence(self, name: str, frame_count: int, domain: str = "source") -> AnnotatedSequence:
        tracks = [Track(t.id, t.reported)
                  for t in self.finished + self.tracks if t.reported]
        return AnnotatedSequence(name, frame_count, tracks, domain=domain)


def sort_step(tracker: SortTracker, detections, frame: int | None = None) -> TrackerEvents:
    return tracker.step(detections, frame)


def run_sort(detections_per_frame, cfg: RunConfig | None = None,
             name: str = "sort") -> AnnotatedSequence:
    """Run SORT over per-frame detection lists and materialize the tracks."""
    cfg = cfg or RunConfig()
    tracker = SortTracker(cfg)
    for frame, dets in enumerate(detections_per_frame, start=1):
        tracker.step(dets, frame)
    return tracker.to_sequence(name, max(len(detections_per_frame), 1))


def pseudo_gt(detections_per_frame, cfg: RunConfig | None = None,
              name: str = "pseudo_gt") -> AnnotatedSequence:
    """Phase-1 annotation generator: Kalman filtering + Hungarian matching."""
    return run_sort(detections_per_frame, cfg, name=name)


def run_emd(detections_per_frame, cfg: RunConfig | None = None,
            name: str = "emd") -> AnnotatedSequence:
    """EMD linking baseline: transport-optimal centroid matching per frame."""
    cfg = cfg or RunConfig()
    next_id = 1
    open_tracks: dict = {}   # id -> {frame: box}
    missed: dict = {}        # id -> frames since last match
    for frame, dets in enumerate(detections_per_frame, start=1):
        ids = sorted(missed)
        actives = [Track(i, open_tracks[i]) for i in ids]
        assn = emd_link(actives, dets, cfg)
        matched_cols = set()
        for i, j in assn.pairs:
            tid = ids[i]
            open_tracks[tid][frame] = dets[j].box
            missed[tid] = 0
            matched_cols.add(j)
        for i in assn.unmatched_rows:
            tid = ids[i]
            missed[tid] += 1
            if missed[tid] > cfg.sort.max_age:
                missed.pop(tid)   # frozen; entries stay in open_tracks for output
        for j, det in enumerate(dets):
            if j not in matched_cols:
                open_tracks[next_id] = {frame: det.box}
                missed[next_id] = 0
                next_id += 1
    tracks = [Track(tid, boxes) for tid, boxes in open_tracks.items() if boxes]
    return AnnotatedSequence(name, max(len(detections_per_frame), 1), tracks)
