"""Evidential occupancy grids over synthetic LiDAR worlds.

Each cell carries belief masses over {free}, {occupied} and the vacuous set
{free, occupied}; only (m_occ, m_free) are stored, the rest is the unknown
remainder. Fusion follows Dempster's rule restricted to this frame:

    K        = m1(O) m2(F) + m1(F) m2(O)                (conflict)
    m(O)     = (m1(O) m2(O) + m1(O) m2(U) + m1(U) m2(O)) / (1 - K)
    m(F)     = symmetric
    m(U)     = m1(U) m2(U) / (1 - K)

Grids are ego-centric: the ego vehicle sits at the center cell, rows point
forward (row 0 is farthest ahead) and columns point left. When the ego moves
the prior belief is re-registered into the new frame by nearest-neighbor
lookup before aging and fusion; cells entering from outside coverage start
vacuous.

The simulated world is 2-d: line-segment walls and oriented rectangles
(moving vehicles) scanned by a radial range sensor. Rays get an exact
geometric hit distance plus gaussian noise; an exact-arithmetic grid walk
then marks traversed cells free-leaning and the hit cell occupied-leaning.

Episodes serialize to a flat binary format, magic "GCEP": header, per-step
(m_occ, m_free) planes, ego poses, then a table of ego-frame box
observations.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from gridcast.tensor import GridcastError, ShapeError

__all__ = [
    "CLASS_FREE", "CLASS_OCCUPIED", "CLASS_UNKNOWN", "TotalConflictError",
    "BeliefGrid", "combine_masses", "dst_combine", "age_masses",
    "pignistic", "classify", "classify_masses",
    "Box", "WorldState", "SensorModel", "ScanMeasurement",
    "raycast_inverse_sensor", "make_scenario", "SCENARIOS",
    "generate_episode", "scripted_crossing_episode",
    "EpisodeRecord", "write_episode", "read_episode",
    "cell_centers", "box_mask",
]

CLASS_FREE = 0
CLASS_OCCUPIED = 1
CLASS_UNKNOWN = 2

_MASS_TOL = 1e-9


class TotalConflictError(GridcastError):
    """Both sources are certain and contradictory; combination undefined."""


# ---------------------------------------------------------------------------
# Mass calculus

def _check_mass_arrays(m_occ, m_free) -> None:
    if np.any(m_occ < -_MASS_TOL) or np.any(m_free < -_MASS_TOL) \
            or np.any(m_occ + m_free > 1.0 + _MASS_TOL):
        raise ShapeError("invalid masses: need m >= 0 and m_occ + m_free <= 1")


def combine_masses(o1, f1, o2, f2):
    """Fuse two mass assignments (scalars or same-shape arrays).

    Raises TotalConflictError when the normalizer 1 - K vanishes, which
    needs both sources fully certain of opposite states.
    """
    o1, f1, o2, f2 = (np.asarray(a, dtype=np.float64) for a in (o1, f1, o2, f2))
    _check_mass_arrays(o1, f1)
    _check_mass_arrays(o2, f2)
    u1 = 1.0 - o1 - f1
    u2 = 1.0 - o2 - f2
    k = o1 * f2 + f1 * o2
    denom = 1.0 - k
    if np.any(denom <= 1e-12):
        raise TotalConflictError(
            "total conflict: sources fully contradict; reset cell to vacuous")
    o = (o1 * o2 + o1 * u2 + u1 * o2) / denom
    f = (f1 * f2 + f1 * u2 + u1 * f2) / denom
    return o, f


def _fuse_grids(prior_o, prior_f, meas_o, meas_f):
    """Grid fusion; totally conflicting cells reset to vacuous.

    Returns (m_occ, m_free, n_reset). The reset path cannot trigger with the
    default sensor model (no source reaches mass 1), but is kept for direct
    constructions.
    """
    k = prior_o * meas_f + prior_f * meas_o
    safe = (1.0 - k) > 1e-12
    out_o = np.zeros_like(prior_o)
    out_f = np.zeros_like(prior_f)
    if safe.all():
        out_o, out_f = combine_masses(prior_o, prior_f, meas_o, meas_f)
        return out_o, out_f, 0
    out_o[safe], out_f[safe] = combine_masses(
        prior_o[safe], prior_f[safe], meas_o[safe], meas_f[safe])
    return out_o, out_f, int((~safe).sum())


@dataclass
class BeliefGrid:
    """Per-cell masses for a single ego-centric grid."""

    m_occ: np.ndarray
    m_free: np.ndarray
    resolution: float

    def validate(self) -> None:
        if self.m_occ.shape != self.m_free.shape or self.m_occ.ndim != 2:
            raise ShapeError("mass planes must be matching 2-d arrays")
        if self.resolution <= 0:
            raise ShapeError("resolution must be positive")
        _check_mass_arrays(self.m_occ, self.m_free)

    @property
    def m_unknown(self) -> np.ndarray:
        return 1.0 - self.m_occ - self.m_free

    @property
    def shape(self) -> tuple[int, int]:
        return self.m_occ.shape

    @classmethod
    def vacuous(cls, shape: tuple[int, int], resolution: float) -> "BeliefGrid":
        return cls(np.zeros(shape), np.zeros(shape), resolution)

    def stacked(self) -> np.ndarray:
        return np.stack([self.m_occ, self.m_free])


def dst_combine(a: BeliefGrid, b: BeliefGrid) -> BeliefGrid:
    if a.shape != b.shape or a.resolution != b.resolution:
        raise ShapeError("grids must share shape and resolution")
    o, f = combine_masses(a.m_occ, a.m_free, b.m_occ, b.m_free)
    return BeliefGrid(o, f, a.resolution)


def age_masses(grid: BeliefGrid, alpha: float) -> BeliefGrid:
    """Discount both committed masses toward the vacuous assignment."""
    if not 0.0 <= alpha <= 1.0:
        raise ShapeError(f"discount factor must be in [0, 1], got {alpha}")
    return BeliefGrid(np.minimum(alpha * grid.m_occ, 1.0),
                      np.minimum(alpha * grid.m_free, 1.0), grid.resolution)


def pignistic(grid: BeliefGrid) -> np.ndarray:
    """Point probability of occupancy: committed mass plus half the unknown."""
    return grid.m_occ + 0.5 * grid.m_unknown


def classify_masses(m_occ: np.ndarray, m_free: np.ndarray) -> np.ndarray:
    """Hard labels by largest mass; ties prefer unknown, then occupied."""
    m_occ = np.clip(m_occ, 0.0, 1.0)
    m_free = np.clip(m_free, 0.0, 1.0)
    unknown = np.clip(1.0 - m_occ - m_free, 0.0, 1.0)
    stacked = np.stack([unknown, m_occ, m_free])
    codes = np.array([CLASS_UNKNOWN, CLASS_OCCUPIED, CLASS_FREE])
    return codes[np.argmax(stacked, axis=0)]


def classify(grid: BeliefGrid) -> np.ndarray:
    return classify_masses(grid.m_occ, grid.m_free)


# ---------------------------------------------------------------------------
# World model

@dataclass
class Box:
    """Oriented rectangle: full extents along/astride its heading."""

    box_id: int
    center: np.ndarray
    extent: tuple[float, float]
    heading: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass
class WorldState:
    ego_xy: np.ndarray
    ego_heading: float
    ego_speed: float = 0.0
    ego_yaw_rate: float = 0.0
    boxes: list[Box] = field(default_factory=list)
    walls: list[tuple[tuple[float, float], tuple[float, float]]] = \
        field(default_factory=list)

    def step(self, dt: float) -> "WorldState":
        fwd = np.array([math.cos(self.ego_heading), math.sin(self.ego_heading)])
        boxes = [replace(b, center=b.center + b.velocity * dt)
                 for b in self.boxes]
        return replace(self, ego_xy=self.ego_xy + self.ego_speed * dt * fwd,
                       ego_heading=self.ego_heading + self.ego_yaw_rate * dt,
                       boxes=boxes)


@dataclass
class SensorModel:
    n_rays: int = 240
    max_range: float = 5.0
    noise_sigma: float = 0.02
    p_occ: float = 0.7
    p_free: float = 0.6


@dataclass
class ScanMeasurement:
    """One scan rendered as an ego-centric evidence grid."""

    m_occ: np.ndarray
    m_free: np.ndarray
    ranges: np.ndarray  # per-ray hit distance, inf when nothing in range


def _world_to_ego(points: np.ndarray, ego_xy: np.ndarray,
                  heading: float) -> np.ndarray:
    d = points - ego_xy
    c, s = math.cos(heading), math.sin(heading)
    return np.stack([d[..., 0] * c + d[..., 1] * s,
                     -d[..., 0] * s + d[..., 1] * c], axis=-1)


def cell_centers(shape: tuple[int, int], resolution: float) -> np.ndarray:
    """(H, W, 2) ego-frame coordinates (forward, left) of cell centers."""
    h, w = shape
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    fwd = (h // 2 - r) * resolution
    left = (w // 2 - c) * resolution
    return np.stack([fwd, left], axis=-1)


def box_mask(boxes, shape: tuple[int, int], resolution: float) -> np.ndarray:
    """Cells whose center falls inside any ego-frame box.

    ``boxes`` iterates (cx, cy, ex, ey, heading) in ego coordinates.
    """
    centers = cell_centers(shape, resolution)
    mask = np.zeros(shape, dtype=bool)
    for cx, cy, ex, ey, heading in boxes:
        d = centers - np.array([cx, cy])
        c, s = math.cos(heading), math.sin(heading)
        along = d[..., 0] * c + d[..., 1] * s
        across = -d[..., 0] * s + d[..., 1] * c
        mask |= (np.abs(along) <= ex / 2) & (np.abs(across) <= ey / 2)
    return mask


def _segment_hits(origin, dirs, a, b) -> np.ndarray:
    """Per-ray distance to one wall segment, inf when missed."""
    e = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    ao = np.asarray(a, dtype=float) - origin
    denom = dirs[:, 0] * e[1] - dirs[:, 1] * e[0]
    safe = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    t = (ao[0] * e[1] - ao[1] * e[0]) / safe
    u = (ao[0] * dirs[:, 1] - ao[1] * dirs[:, 0]) / safe
    hit = (np.abs(denom) >= 1e-12) & (t >= 0) & (u >= 0.0) & (u <= 1.0)
    return np.where(hit, t, np.inf)


def _box_hits(origin, dirs, box: Box) -> np.ndarray:
    """Per-ray distance to an oriented rectangle via the slab test."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    rot = np.array([[c, s], [-s, c]])
    p = rot @ (origin - box.center)
    d = dirs @ rot.T
    half = np.array([box.extent[0] / 2, box.extent[1] / 2])
    d_safe = np.where(np.abs(d) < 1e-12, np.copysign(1e-12, d + 1e-300), d)
    t1 = (-half - p) / d_safe
    t2 = (half - p) / d_safe
    near = np.maximum(np.minimum(t1, t2)[:, 0], np.minimum(t1, t2)[:, 1])
    far = np.minimum(np.maximum(t1, t2)[:, 0], np.maximum(t1, t2)[:, 1])
    hit = (near <= far) & (far >= 0)
    return np.where(hit, np.maximum(near, 0.0), np.inf)


def _ray_cells(shape, vr: float, vc: float, s_max: float):
    """Exact grid walk from the center cell along (vr, vc) cells-per-meter.

    Yields (row, col, s_entry, s_exit) with distances in meters; stops at
    s_max or the grid edge. Cell boundaries sit at half-integers.
    """
    h, w = shape
    r, c = h // 2, w // 2
    step_r = 1 if vr > 0 else -1
    step_c = 1 if vc > 0 else -1
    t_r = (0.5 / abs(vr)) if vr else math.inf
    t_c = (0.5 / abs(vc)) if vc else math.inf
    dt_r = (1.0 / abs(vr)) if vr else math.inf
    dt_c = (1.0 / abs(vc)) if vc else math.inf
    s = 0.0
    while 0 <= r < h and 0 <= c < w:
        s_exit = min(t_r, t_c, s_max)
        yield r, c, s, s_exit
        if s_exit >= s_max:
            return
        if t_r <= t_c:
            r += step_r
            s = t_r
            t_r += dt_r
        else:
            c += step_c
            s = t_c
            t_c += dt_c


def raycast_inverse_sensor(world: WorldState, sensor: SensorModel,
                           shape: tuple[int, int], resolution: float,
                           rng: np.random.Generator) -> ScanMeasurement:
    """Render one scan into an ego-centric evidence grid.

    Cells fully traversed before a return are free-leaning (m_free =
    p_free), the cell containing the return is occupied-leaning (m_occ =
    p_occ), cells beyond stay vacuous. The ego cell is always traversed
    first, so with obstacles kept off the ego it is free-leaning in every
    scan.
    """
    n = sensor.n_rays
    phis = 2.0 * math.pi * np.arange(n) / n
    world_angles = world.ego_heading + phis
    dirs = np.stack([np.cos(world_angles), np.sin(world_angles)], axis=-1)
    dist = np.full(n, np.inf)
    for a, b in world.walls:
        dist = np.minimum(dist, _segment_hits(world.ego_xy, dirs, a, b))
    for box in world.boxes:
        dist = np.minimum(dist, _box_hits(world.ego_xy, dirs, box))
    noisy = dist + rng.normal(0.0, sensor.noise_sigma, size=n)
    noisy = np.where(np.isfinite(dist), np.maximum(noisy, 0.05), np.inf)
    ranges = np.where(noisy <= sensor.max_range, noisy, np.inf)

    occ = np.zeros(shape, dtype=bool)
    free = np.zeros(shape, dtype=bool)
    for j in range(n):
        phi = phis[j]
        vr = -math.cos(phi) / resolution
        vc = -math.sin(phi) / resolution
        limit = min(ranges[j], sensor.max_range)
        hit = math.isfinite(ranges[j])
        for r, c, s0, s1 in _ray_cells(shape, vr, vc, limit):
            if hit and s0 <= ranges[j] <= s1:
                occ[r, c] = True
            elif s1 < limit:
                free[r, c] = True
    free &= ~occ
    return ScanMeasurement(sensor.p_occ * occ.astype(np.float64),
                           sensor.p_free * free.astype(np.float64),
                           ranges)


# ---------------------------------------------------------------------------
# Scenarios

def _passing(rng: np.random.Generator) -> WorldState:
    """Straight road, walls both sides, one oncoming car in the next lane."""
    speed = rng.uniform(1.5, 2.5)
    gap = rng.uniform(5.0, 8.0)
    lane = rng.uniform(1.6, 2.2)
    return WorldState(
        ego_xy=np.zeros(2), ego_heading=0.0, ego_speed=speed,
        boxes=[Box(1, np.array([gap, lane]), (1.6, 1.0), math.pi,
                   np.array([-rng.uniform(2.0, 3.0), 0.0])),
               Box(2, np.array([rng.uniform(2.5, 4.0), -lane]), (1.4, 0.9),
                   0.0, np.zeros(2))],
        walls=[((-20.0, 4.2), (40.0, 4.2)), ((-20.0, -4.2), (40.0, -4.2))])


def _intersection(rng: np.random.Generator) -> WorldState:
    """Approach to a crossing with corner walls and crossing traffic."""
    speed = rng.uniform(1.2, 1.8)
    cross_y = rng.uniform(4.0, 6.0)
    return WorldState(
        ego_xy=np.zeros(2), ego_heading=0.0, ego_speed=speed,
        ego_yaw_rate=rng.uniform(-0.05, 0.05),
        boxes=[Box(1, np.array([rng.uniform(3.0, 4.5), cross_y]), (1.6, 1.0),
                   -math.pi / 2, np.array([0.0, -rng.uniform(1.5, 2.5)]))],
        walls=[((2.5, 2.5), (2.5, 12.0)), ((2.5, 2.5), (-12.0, 2.5)),
               ((2.5, -2.5), (2.5, -12.0)), ((2.5, -2.5), (-12.0, -2.5))])


def _clutter(rng: np.random.Generator) -> WorldState:
    """Slow crawl through scattered static obstacles."""
    boxes = []
    for i in range(rng.integers(4, 7)):
        radius = rng.uniform(1.8, 4.5)
        angle = rng.uniform(-math.pi, math.pi)
        boxes.append(Box(i + 1,
                         np.array([radius * math.cos(angle),
                                   radius * math.sin(angle)]),
                         (rng.uniform(0.5, 1.0), rng.uniform(0.4, 0.8)),
                         rng.uniform(0, math.pi), np.zeros(2)))
    return WorldState(ego_xy=np.zeros(2), ego_heading=0.0,
                      ego_speed=rng.uniform(0.8, 1.2), boxes=boxes,
                      walls=[((-6.0, 5.0), (8.0, 5.0))])


SCENARIOS = {"passing": _passing, "intersection": _intersection,
             "clutter": _clutter}


def make_scenario(name: str, rng: np.random.Generator) -> WorldState:
    if name not in SCENARIOS:
        raise GridcastError(
            f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return SCENARIOS[name](rng)


# ---------------------------------------------------------------------------
# Episodes

BOX_DTYPE = np.dtype([("step", "<u4"), ("id", "<u4"), ("cx", "<f4"),
                      ("cy", "<f4"), ("ex", "<f4"), ("ey", "<f4"),
                      ("heading", "<f4")])


@dataclass
class EpisodeRecord:
    """A fused belief sequence with poses and ego-frame box observations."""

    masses: np.ndarray     # (T, 2, H, W) float32: (m_occ, m_free) per step
    poses: np.ndarray      # (T, 3) float32: world x, y, heading
    boxes: np.ndarray      # BOX_DTYPE records
    resolution: float
    conflict_resets: int = 0  # runtime diagnostic, not serialized

    @property
    def length(self) -> int:
        return self.masses.shape[0]

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.masses.shape[2:]

    def boxes_at(self, step: int) -> np.ndarray:
        return self.boxes[self.boxes["step"] == step]

    def frame(self, step: int) -> BeliefGrid:
        return BeliefGrid(self.masses[step, 0].astype(np.float64),
                          self.masses[step, 1].astype(np.float64),
                          self.resolution)


def _transform_belief(m_occ, m_free, old_pose, new_pose, resolution):
    """Resample a belief from the old ego frame into the new one."""
    h, w = m_occ.shape
    centers = cell_centers((h, w), resolution)
    ox, oy, oh = old_pose
    nx, ny, nh = new_pose
    c, s = math.cos(nh), math.sin(nh)
    wx = nx + centers[..., 0] * c - centers[..., 1] * s
    wy = ny + centers[..., 0] * s + centers[..., 1] * c
    co, so = math.cos(oh), math.sin(oh)
    fwd = (wx - ox) * co + (wy - oy) * so
    left = -(wx - ox) * so + (wy - oy) * co
    rows = np.rint(h // 2 - fwd / resolution).astype(int)
    cols = np.rint(w // 2 - left / resolution).astype(int)
    valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    out_o = np.zeros_like(m_occ)
    out_f = np.zeros_like(m_free)
    out_o[valid] = m_occ[rows[valid], cols[valid]]
    out_f[valid] = m_free[rows[valid], cols[valid]]
    return out_o, out_f


def generate_episode(scenario: str, length: int, rng: np.random.Generator,
                     grid_hw: tuple[int, int] = (32, 32),
                     resolution: float = 1.0 / 3.0,
                     sensor: SensorModel | None = None, alpha: float = 0.98,
                     dt: float = 0.1) -> EpisodeRecord:
    """Simulate, scan and fuse a scenario into an episode.

    Per step: advance the world, re-register the prior belief into the new
    ego frame, age it, fuse the new scan, record. Totally conflicting cells
    (impossible with the default sensor) reset to vacuous and are counted.
    """
    world = make_scenario(scenario, rng)
    sensor = sensor or SensorModel()
    h, w = grid_hw
    m_o = np.zeros((h, w))
    m_f = np.zeros((h, w))
    masses = np.zeros((length, 2, h, w), dtype=np.float32)
    poses = np.zeros((length, 3), dtype=np.float32)
    box_rows = []
    resets = 0
    pose = (world.ego_xy[0], world.ego_xy[1], world.ego_heading)
    for t in range(length):
        if t > 0:
            world = world.step(dt)
            new_pose = (world.ego_xy[0], world.ego_xy[1], world.ego_heading)
            m_o, m_f = _transform_belief(m_o, m_f, pose, new_pose, resolution)
            pose = new_pose
        m_o = np.minimum(alpha * m_o, 1.0)
        m_f = np.minimum(alpha * m_f, 1.0)
        scan = raycast_inverse_sensor(world, sensor, grid_hw, resolution, rng)
        m_o, m_f, n = _fuse_grids(m_o, m_f, scan.m_occ, scan.m_free)
        resets += n
        masses[t, 0] = m_o
        masses[t, 1] = m_f
        poses[t] = pose
        for box in world.boxes:
            ego_c = _world_to_ego(box.center, world.ego_xy, world.ego_heading)
            box_rows.append((t, box.box_id, ego_c[0], ego_c[1],
                             box.extent[0], box.extent[1],
                             box.heading - world.ego_heading))
    boxes = np.array(box_rows, dtype=BOX_DTYPE)
    return EpisodeRecord(masses, poses, boxes, resolution, resets)


def scripted_crossing_episode(direction: str = "right", length: int = 30,
                              grid: int = 32, resolution: float = 1.0 / 3.0,
                              alpha: float = 0.98, p_occ: float = 0.9,
                              ) -> EpisodeRecord:
    """Deterministic single-box crossing for metric sanity checks.

    A stationary ego watches one axis-aligned box slide exactly one cell per
    step. The painted measurement marks only the box interior (occupied
    evidence, no free evidence), so the fused belief is a clean monotone
    trail and box-overlap metrics decay predictably for a frozen predictor.
    """
    moves = {"right": (0, 1), "down": (1, 0), "diag": (1, 1)}
    if direction not in moves:
        raise GridcastError(f"unknown direction {direction!r}")
    vr, vc = moves[direction]
    # box footprint in cells at t = 0: 8 long along travel, 3 wide
    if direction == "right":
        rows0, cols0 = (grid // 2 - 1, grid // 2 + 1), (0, 7)
    elif direction == "down":
        rows0, cols0 = (0, 7), (grid // 2 - 1, grid // 2 + 1)
    else:
        rows0, cols0 = (0, 7), (0, 7)
    h = w = grid
    m_o = np.zeros((h, w))
    m_f = np.zeros((h, w))
    masses = np.zeros((length, 2, h, w), dtype=np.float32)
    poses = np.zeros((length, 3), dtype=np.float32)
    box_rows = []
    for t in range(length):
        r_lo, r_hi = rows0[0] + vr * t, rows0[1] + vr * t
        c_lo, c_hi = cols0[0] + vc * t, cols0[1] + vc * t
        r_mid = (r_lo + r_hi) / 2.0
        c_mid = (c_lo + c_hi) / 2.0
        ego_f = (h // 2 - r_mid) * resolution
        ego_l = (w // 2 - c_mid) * resolution
        extent = ((r_hi - r_lo + 1) * resolution,
                  (c_hi - c_lo + 1) * resolution)
        box_rows.append((t, 1, ego_f, ego_l, extent[0], extent[1], 0.0))
        meas_o = np.zeros((h, w))
        mask = box_mask([(ego_f, ego_l, extent[0], extent[1], 0.0)],
                        (h, w), resolution)
        meas_o[mask] = p_occ
        m_o = np.minimum(alpha * m_o, 1.0)
        m_f = np.minimum(alpha * m_f, 1.0)
        m_o, m_f, _ = _fuse_grids(m_o, m_f, meas_o, np.zeros((h, w)))
        masses[t, 0] = m_o
        masses[t, 1] = m_f
    return EpisodeRecord(masses, poses,
                         np.array(box_rows, dtype=BOX_DTYPE), resolution)


# ---------------------------------------------------------------------------
# Episode files

_EP_MAGIC = b"GCEP"
_EP_VERSION = 1


def write_episode(path, ep: EpisodeRecord) -> None:
    t, _, h, w = ep.masses.shape
    with open(path, "wb") as fh:
        fh.write(_EP_MAGIC)
        fh.write(struct.pack("<IIIIfI", _EP_VERSION, h, w, t,
                             ep.resolution, len(ep.boxes)))
        fh.write(ep.masses.astype("<f4", copy=False).tobytes())
        fh.write(ep.poses.astype("<f4", copy=False).tobytes())
        fh.write(ep.boxes.astype(BOX_DTYPE, copy=False).tobytes())


def read_episode(path) -> EpisodeRecord:
    with open(path, "rb") as fh:
        if fh.read(4) != _EP_MAGIC:
            raise GridcastError(f"{path}: not an episode file")
        version, h, w, t, resolution, n_boxes = struct.unpack(
            "<IIIIfI", fh.read(24))
        if version != _EP_VERSION:
            raise GridcastError(f"unsupported episode version {version}")
        def _read_exact(n_bytes: int) -> bytes:
            buf = fh.read(n_bytes)
            if len(buf) != n_bytes:
                raise GridcastError("truncated episode file")
            return buf

        masses = np.frombuffer(_read_exact(t * 2 * h * w * 4), dtype="<f4")
        masses = masses.reshape(t, 2, h, w).copy()
        poses = np.frombuffer(_read_exact(t * 3 * 4), dtype="<f4")
        poses = poses.reshape(t, 3).copy()
        boxes = np.frombuffer(_read_exact(n_boxes * BOX_DTYPE.itemsize),
                              dtype=BOX_DTYPE).copy()
    return EpisodeRecord(masses, poses, boxes, float(resolution))
