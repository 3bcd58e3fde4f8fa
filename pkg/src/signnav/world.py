"""Procedural 2D navigation worlds with unicycle kinematics and ray-cast rendering.

Worlds are rectangular arenas containing circular and axis-aligned box
obstacles.  The agent is a disk of radius ``AGENT_RADIUS`` moving with
unicycle kinematics; motion that would penetrate an obstacle slides along
its boundary.  Observations are a color panorama strip rendered from 64
rays spanning a 90 degree field of view plus the raw ray depths.
"""
from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

AGENT_RADIUS = 0.15
GRID_RESOLUTION = 0.1
DT = 0.1
MAX_STEPS = 500

V_LIN_MAX = 0.25
V_ANG_MAX = math.radians(15.0)
STOP_V_LIN = 0.025
STOP_V_ANG = math.radians(1.5)

N_RAYS = 64
IMAGE_HEIGHT = 16
FIELD_OF_VIEW = math.radians(90.0)
MAX_DEPTH = 3.0

PROFILES = ("sparse", "cluttered", "poles")
WALL_SEGMENT_LENGTH = 1.0
SIDES = ("bottom", "right", "top", "left")

CEILING_COLOR = np.array([0.85, 0.85, 0.85])
FLOOR_COLOR = np.array([0.35, 0.33, 0.30])
BACKGROUND_COLOR = np.array([0.0, 0.0, 0.0])

# Minimum surface-to-surface gap between generated obstacles (and to walls).
# Leaves at least two grid cells of free corridor after inflation.
_GENERATION_GAP = 2 * AGENT_RADIUS + 0.35
_MAX_GENERATION_ATTEMPTS = 100


class WorldGenerationError(RuntimeError):
    """Raised when no connected world could be sampled."""


class SnapError(ValueError):
    """Raised when a point is too far from any free grid cell."""


def wrap_angle(angle):
    """Wrap an angle (or array of angles) into (-pi, pi]."""
    return math.pi - np.mod(math.pi - angle, 2 * math.pi)


# --------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class Action:
    """Physical velocity command: forward speed (m/s) and yaw rate (rad/s)."""

    v_lin: float
    v_ang: float

    def __post_init__(self):
        object.__setattr__(self, "v_lin", float(np.clip(self.v_lin, 0.0, V_LIN_MAX)))
        object.__setattr__(self, "v_ang", float(np.clip(self.v_ang, -V_ANG_MAX, V_ANG_MAX)))

    @classmethod
    def from_normalized(cls, a) -> "Action":
        v_lin, v_ang = normalized_to_physical(np.asarray(a, dtype=float))
        return cls(v_lin, v_ang)

    def normalized(self) -> np.ndarray:
        return physical_to_normalized(np.array([self.v_lin, self.v_ang]))


def normalized_to_physical(a: np.ndarray) -> np.ndarray:
    """Map normalized actions in [-1, 1]^2 (last axis) to physical units."""
    a = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)
    out = np.empty_like(a)
    out[..., 0] = (a[..., 0] + 1.0) * (0.5 * V_LIN_MAX)
    out[..., 1] = a[..., 1] * V_ANG_MAX
    return out


def physical_to_normalized(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    out[..., 0] = v[..., 0] / (0.5 * V_LIN_MAX) - 1.0
    out[..., 1] = v[..., 1] / V_ANG_MAX
    return np.clip(out, -1.0, 1.0)


def is_stop(action: Action) -> bool:
    """Continuous-control stand-in for the discrete stop action."""
    return action.v_lin < STOP_V_LIN and abs(action.v_ang) < STOP_V_ANG


# --------------------------------------------------------------------------
# World map


def _random_color(rng: np.random.Generator) -> np.ndarray:
    h = rng.uniform(0.0, 1.0)
    s = rng.uniform(0.55, 1.0)
    v = rng.uniform(0.55, 1.0)
    return np.array(colorsys.hsv_to_rgb(h, s, v))


def _point_box_distance(px, py, boxes):
    """Distance from points (...,) to boxes (M, 4); returns (..., M)."""
    px = np.asarray(px)[..., None]
    py = np.asarray(py)[..., None]
    dx = np.maximum(np.maximum(boxes[:, 0] - px, px - boxes[:, 2]), 0.0)
    dy = np.maximum(np.maximum(boxes[:, 1] - py, py - boxes[:, 3]), 0.0)
    return np.hypot(dx, dy)


@dataclass(eq=False)
class WorldMap:
    """A rectangular arena with colored obstacles and a derived occupancy grid.

    ``circles`` rows are ``(x, y, radius)``; ``boxes`` rows are
    ``(xmin, ymin, xmax, ymax)``.  ``wall_colors[side]`` holds one color per
    ``WALL_SEGMENT_LENGTH`` stretch of that side, in order of increasing
    coordinate.  The occupancy grid is indexed ``[row, col]`` with rows
    along y.
    """

    seed: int
    profile: str
    bounds: tuple[float, float, float, float]
    circles: np.ndarray
    boxes: np.ndarray
    circle_colors: np.ndarray
    box_colors: np.ndarray
    wall_colors: dict[str, np.ndarray]
    agent_radius: float = AGENT_RADIUS
    resolution: float = GRID_RESOLUTION
    occupancy: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.bounds = tuple(float(b) for b in self.bounds)
        self.circles = np.asarray(self.circles, dtype=float).reshape(-1, 3)
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        self.circle_colors = np.asarray(self.circle_colors, dtype=float).reshape(-1, 3)
        self.box_colors = np.asarray(self.box_colors, dtype=float).reshape(-1, 3)
        self.occupancy = self._rasterize()
        self._graph = None

    # -- geometry -----------------------------------------------------------

    @property
    def grid_shape(self) -> tuple[int, int]:
        xmin, ymin, xmax, ymax = self.bounds
        return (int(round((ymax - ymin) / self.resolution)),
                int(round((xmax - xmin) / self.resolution)))

    def cell_center(self, row, col):
        xmin, ymin = self.bounds[:2]
        return (xmin + (np.asarray(col) + 0.5) * self.resolution,
                ymin + (np.asarray(row) + 0.5) * self.resolution)

    def _rasterize(self) -> np.ndarray:
        nrows, ncols = self.grid_shape
        res = self.resolution
        xmin, ymin, xmax, ymax = self.bounds
        r = self.agent_radius
        x0 = xmin + np.arange(ncols) * res
        y0 = ymin + np.arange(nrows) * res
        X0, Y0 = np.meshgrid(x0, y0)
        X1, Y1 = X0 + res, Y0 + res
        occ = (X0 < xmin + r) | (X1 > xmax - r) | (Y0 < ymin + r) | (Y1 > ymax - r)
        for cx, cy, cr in self.circles:
            dx = np.maximum(np.maximum(X0 - cx, cx - X1), 0.0)
            dy = np.maximum(np.maximum(Y0 - cy, cy - Y1), 0.0)
            occ |= np.hypot(dx, dy) < cr + r
        for bx0, by0, bx1, by1 in self.boxes:
            dx = np.maximum(np.maximum(X0 - bx1, bx0 - X1), 0.0)
            dy = np.maximum(np.maximum(Y0 - by1, by0 - Y1), 0.0)
            occ |= np.hypot(dx, dy) < r
        return occ

    def clearance(self, x, y) -> np.ndarray:
        """Signed clearance of agent centers: negative means penetration."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xmin, ymin, xmax, ymax = self.bounds
        c = np.minimum.reduce([x - xmin, xmax - x, y - ymin, ymax - y])
        if len(self.circles):
            d = np.hypot(x[..., None] - self.circles[:, 0], y[..., None] - self.circles[:, 1])
            c = np.minimum(c, (d - self.circles[:, 2]).min(axis=-1))
        if len(self.boxes):
            c = np.minimum(c, _point_box_distance(x, y, self.boxes).min(axis=-1))
        return c - self.agent_radius

    def is_free(self, x, y) -> np.ndarray:
        return self.clearance(x, y) >= 0.0

    def contact_normals(self, x: float, y: float) -> list[np.ndarray]:
        """Outward unit normals of every inflated shape penetrated at (x, y)."""
        normals = []
        r = self.agent_radius
        xmin, ymin, xmax, ymax = self.bounds
        if x - xmin < r:
            normals.append(np.array([1.0, 0.0]))
        if xmax - x < r:
            normals.append(np.array([-1.0, 0.0]))
        if y - ymin < r:
            normals.append(np.array([0.0, 1.0]))
        if ymax - y < r:
            normals.append(np.array([0.0, -1.0]))
        for cx, cy, cr in self.circles:
            d = math.hypot(x - cx, y - cy)
            if d < cr + r and d > 0:
                normals.append(np.array([x - cx, y - cy]) / d)
        for bx0, by0, bx1, by1 in self.boxes:
            qx = min(max(x, bx0), bx1)
            qy = min(max(y, by0), by1)
            d = math.hypot(x - qx, y - qy)
            if d < r:
                if d > 0:
                    normals.append(np.array([x - qx, y - qy]) / d)
                else:
                    normals.append(np.array([1.0, 0.0]))
        return normals

    # -- grid queries -------------------------------------------------------

    def snap(self, x: float, y: float, max_snap: float = 0.3) -> tuple[int, int]:
        """Nearest free grid cell to (x, y)."""
        nrows, ncols = self.grid_shape
        xmin, ymin = self.bounds[:2]
        col = int(np.clip(math.floor((x - xmin) / self.resolution), 0, ncols - 1))
        row = int(np.clip(math.floor((y - ymin) / self.resolution), 0, nrows - 1))
        if not self.occupancy[row, col]:
            return row, col
        free_r, free_c = np.nonzero(~self.occupancy)
        if len(free_r) == 0:
            raise SnapError("world has no free cells")
        cx, cy = self.cell_center(free_r, free_c)
        d = np.hypot(cx - x, cy - y)
        k = int(np.argmin(d))
        if d[k] > max_snap:
            raise SnapError(f"point ({x:.3f}, {y:.3f}) is {d[k]:.3f} m from free space")
        return int(free_r[k]), int(free_c[k])

    def graph(self):
        """Sparse 8-connected graph over free cells (no corner cutting)."""
        if self._graph is None:
            self._graph = _grid_graph(self.occupancy, self.resolution)
        return self._graph

    def distance_field(self, x: float, y: float) -> np.ndarray:
        """Geodesic distance from (x, y) to every cell; inf where unreachable."""
        row, col = self.snap(x, y)
        ncols = self.grid_shape[1]
        dist = dijkstra(self.graph(), indices=row * ncols + col)
        return dist.reshape(self.grid_shape)

    def free_components(self) -> int:
        _, n = ndimage.label(~self.occupancy)
        return n

    def with_obstacles(self, circles=(), boxes=()) -> "WorldMap":
        return make_world(self.bounds, circles=circles, boxes=boxes, seed=self.seed,
                          profile=self.profile)


def _grid_graph(occupancy: np.ndarray, res: float):
    nrows, ncols = occupancy.shape
    free = ~occupancy
    idx = np.arange(nrows * ncols).reshape(nrows, ncols)
    rows, cols, weights = [], [], []

    def link(a_sl, b_sl, mask, w):
        rows.append(idx[a_sl][mask])
        cols.append(idx[b_sl][mask])
        weights.append(np.full(int(mask.sum()), w))

    # right and up neighbours
    m = free[:, :-1] & free[:, 1:]
    link((slice(None), slice(None, -1)), (slice(None), slice(1, None)), m, res)
    m = free[:-1, :] & free[1:, :]
    link((slice(None, -1), slice(None)), (slice(1, None), slice(None)), m, res)
    diag = math.sqrt(2.0) * res
    # up-right diagonal, requires both orthogonal cells free
    m = free[:-1, :-1] & free[1:, 1:] & free[1:, :-1] & free[:-1, 1:]
    link((slice(None, -1), slice(None, -1)), (slice(1, None), slice(1, None)), m, diag)
    # up-left diagonal
    m = free[:-1, 1:] & free[1:, :-1] & free[1:, 1:] & free[:-1, :-1]
    link((slice(None, -1), slice(1, None)), (slice(1, None), slice(None, -1)), m, diag)
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    w = np.concatenate(weights)
    n = nrows * ncols
    g = coo_matrix((np.concatenate([w, w]), (np.concatenate([r, c]), np.concatenate([c, r]))),
                   shape=(n, n))
    return g.tocsr()


def _default_wall_colors(bounds, rng: np.random.Generator) -> dict[str, np.ndarray]:
    xmin, ymin, xmax, ymax = bounds
    lengths = {"bottom": xmax - xmin, "right": ymax - ymin, "top": xmax - xmin, "left": ymax - ymin}
    return {side: np.array([_random_color(rng)
                            for _ in range(max(1, math.ceil(lengths[side] / WALL_SEGMENT_LENGTH - 1e-9)))])
            for side in SIDES}


def make_world(bounds, circles=(), boxes=(), *, seed: int = 0, profile: str = "custom",
               circle_colors=None, box_colors=None, wall_colors=None) -> WorldMap:
    """Build a world from explicit shapes; missing colors are drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    circles = np.asarray(circles, dtype=float).reshape(-1, 3)
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    if wall_colors is None:
        wall_colors = _default_wall_colors(bounds, rng)
    if circle_colors is None:
        circle_colors = [_random_color(rng) for _ in range(len(circles))]
    if box_colors is None:
        box_colors = [_random_color(rng) for _ in range(len(boxes))]
    return WorldMap(seed=seed, profile=profile, bounds=tuple(bounds), circles=circles,
                    boxes=boxes, circle_colors=circle_colors, box_colors=box_colors,
                    wall_colors={k: np.asarray(v, dtype=float).reshape(-1, 3)
                                 for k, v in wall_colors.items()})


_PROFILE_SPECS = {
    # arena side, obstacle count range, probability of a circle, placement region (fractions)
    "sparse": dict(size=8.0, count=(3, 6), p_circle=0.5, region=(0.0, 0.0, 1.0, 1.0)),
    "cluttered": dict(size=10.0, count=(12, 20), p_circle=0.5, region=(0.0, 0.0, 1.0, 1.0)),
    "poles": dict(size=10.0, count=(6, 12), p_circle=1.0, region=(0.3, 0.15, 0.7, 0.85)),
}


def _shape_gap(shape_a, shape_b) -> float:
    """Surface-to-surface distance between two shapes ('c', x, y, r) / ('b', x0, y0, x1, y1)."""
    ka, kb = shape_a[0], shape_b[0]
    if ka == "c" and kb == "c":
        return math.hypot(shape_a[1] - shape_b[1], shape_a[2] - shape_b[2]) - shape_a[3] - shape_b[3]
    if ka == "b" and kb == "b":
        dx = max(shape_a[1] - shape_b[3], shape_b[1] - shape_a[3], 0.0)
        dy = max(shape_a[2] - shape_b[4], shape_b[2] - shape_a[4], 0.0)
        return math.hypot(dx, dy)
    c, b = (shape_a, shape_b) if ka == "c" else (shape_b, shape_a)
    d = _point_box_distance(c[1], c[2], np.array([b[1:]]))[0]
    return float(d) - c[3]


def _sample_shape(rng, profile, lo, hi):
    spec = _PROFILE_SPECS[profile]
    if rng.uniform() < spec["p_circle"]:
        r = rng.uniform(0.15, 0.3) if profile == "poles" else rng.uniform(0.2, 0.5)
        x = rng.uniform(lo[0] + r, hi[0] - r)
        y = rng.uniform(lo[1] + r, hi[1] - r)
        return ("c", x, y, r)
    w, h = rng.uniform(0.4, 1.5, size=2)
    x0 = rng.uniform(lo[0], hi[0] - w)
    y0 = rng.uniform(lo[1], hi[1] - h)
    return ("b", x0, y0, x0 + w, y0 + h)


def generate_world(seed: int, difficulty_profile: str = "sparse") -> WorldMap:
    """Sample a connected world deterministically from ``seed``.

    Profiles: ``sparse`` (8x8 m, 3-6 mixed obstacles), ``cluttered``
    (10x10 m, 12-20 mixed obstacles) and ``poles`` (10x10 m, 6-12 poles of
    radius 0.15-0.3 m placed in the middle band of the arena).
    """
    if difficulty_profile not in _PROFILE_SPECS:
        raise ValueError(f"unknown profile {difficulty_profile!r}; expected one of {PROFILES}")
    spec = _PROFILE_SPECS[difficulty_profile]
    size = spec["size"]
    fx0, fy0, fx1, fy1 = spec["region"]
    wall_gap = _GENERATION_GAP
    lo = (max(fx0 * size, wall_gap), max(fy0 * size, wall_gap))
    hi = (min(fx1 * size, size - wall_gap), min(fy1 * size, size - wall_gap))
    rng = np.random.default_rng(seed)
    bounds = (0.0, 0.0, size, size)
    for _ in range(_MAX_GENERATION_ATTEMPTS):
        n = int(rng.integers(spec["count"][0], spec["count"][1] + 1))
        shapes = []
        for _ in range(50 * n):
            if len(shapes) == n:
                break
            cand = _sample_shape(rng, difficulty_profile, lo, hi)
            if all(_shape_gap(cand, s) >= _GENERATION_GAP for s in shapes):
                shapes.append(cand)
        if len(shapes) < n:
            continue
        circles = [s[1:] for s in shapes if s[0] == "c"]
        boxes = [s[1:] for s in shapes if s[0] == "b"]
        world = WorldMap(
            seed=seed, profile=difficulty_profile, bounds=bounds,
            circles=np.array(circles, dtype=float).reshape(-1, 3),
            boxes=np.array(boxes, dtype=float).reshape(-1, 4),
            circle_colors=np.array([_random_color(rng) for _ in circles]).reshape(-1, 3),
            box_colors=np.array([_random_color(rng) for _ in boxes]).reshape(-1, 3),
            wall_colors=_default_wall_colors(bounds, rng),
        )
        if world.free_components() == 1:
            return world
    raise WorldGenerationError(
        f"no connected {difficulty_profile} world after {_MAX_GENERATION_ATTEMPTS} attempts (seed={seed})")


@lru_cache(maxsize=64)
def get_world(seed: int, profile: str) -> WorldMap:
    """Cached :func:`generate_world`; worlds are treated as immutable."""
    return generate_world(seed, profile)


def geodesic_distance(p, q, world: WorldMap) -> float:
    """Shortest 8-connected grid path length between ``p`` and ``q``.

    Both endpoints are snapped to their nearest free cell (at most 0.3 m
    away, else :class:`SnapError`).  Returns ``inf`` when disconnected.
    """
    ncols = world.grid_shape[1]
    rp, cp = world.snap(p[0], p[1])
    rq, cq = world.snap(q[0], q[1])
    if (rp, cp) == (rq, cq):
        return 0.0
    d = dijkstra(world.graph(), indices=rp * ncols + cp)
    return float(d[rq * ncols + cq])


# --------------------------------------------------------------------------
# Kinematics


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    time_step: int = 0

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.heading)


def move(state: AgentState, action: Action, world: WorldMap, dt: float = DT) -> tuple[AgentState, bool]:
    """Unicycle update with boundary sliding.

    Returns the new state and whether the attempted translation intersected
    an inflated obstacle.  Translation uses the heading at the start of the
    step; the heading is then advanced by ``v_ang * dt`` and wrapped.
    """
    heading = float(wrap_angle(state.heading + action.v_ang * dt))
    p = np.array([state.x, state.y])
    disp = action.v_lin * dt * np.array([math.cos(state.heading), math.sin(state.heading)])
    target = p + disp
    collided = False
    if action.v_lin > 0 and not world.is_free(target[0], target[1]):
        collided = True
        lo, hi = 0.0, 1.0
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            q = p + mid * disp
            if world.is_free(q[0], q[1]):
                lo = mid
            else:
                hi = mid
        contact = p + lo * disp
        blocked = p + hi * disp
        target = contact
        for n in world.contact_normals(blocked[0], blocked[1]):
            # remove the component of the displacement pushing into the shape
            tangential = disp - min(float(disp @ n), 0.0) * n
            cand = p + tangential
            if world.is_free(cand[0], cand[1]):
                target = cand
                break
        if not world.is_free(target[0], target[1]):
            target = p
    new_state = AgentState(float(target[0]), float(target[1]), heading, state.time_step + 1)
    return new_state, collided


# --------------------------------------------------------------------------
# Rendering


def ray_angles(heading: float, n_rays: int = N_RAYS, fov: float = FIELD_OF_VIEW) -> np.ndarray:
    """Ray directions ordered left-to-right (image column order)."""
    offsets = fov / 2 - (np.arange(n_rays) + 0.5) * (fov / n_rays)
    return heading + offsets


def cast_rays(x: float, y: float, angles: np.ndarray, world: WorldMap) -> tuple[np.ndarray, np.ndarray]:
    """First-hit distance and surface color for rays from (x, y)."""
    dx = np.cos(angles)
    dy = np.sin(angles)
    n = len(angles)
    best = np.full(n, np.inf)
    colors = np.tile(BACKGROUND_COLOR, (n, 1))

    xmin, ymin, xmax, ymax = world.bounds
    inside = xmin <= x <= xmax and ymin <= y <= ymax
    if inside:
        with np.errstate(divide="ignore", invalid="ignore"):
            tx = np.where(dx > 0, (xmax - x) / dx, np.where(dx < 0, (xmin - x) / dx, np.inf))
            ty = np.where(dy > 0, (ymax - y) / dy, np.where(dy < 0, (ymin - y) / dy, np.inf))
        t = np.minimum(tx, ty)
        hx = x + t * dx
        hy = y + t * dy
        on_x = tx <= ty
        for side in SIDES:
            if side == "right":
                sel, coord = on_x & (dx > 0), hy - ymin
            elif side == "left":
                sel, coord = on_x & (dx < 0), hy - ymin
            elif side == "top":
                sel, coord = ~on_x & (dy > 0), hx - xmin
            else:
                sel, coord = ~on_x & (dy < 0), hx - xmin
            if not sel.any():
                continue
            palette = world.wall_colors[side]
            k = np.clip((coord[sel] / WALL_SEGMENT_LENGTH).astype(int), 0, len(palette) - 1)
            colors[sel] = palette[k]
        best = np.where(np.isfinite(t), t, best)

    if len(world.circles):
        ox = x - world.circles[:, 0]
        oy = y - world.circles[:, 1]
        b = dx[:, None] * ox + dy[:, None] * oy
        c = ox * ox + oy * oy - world.circles[:, 2] ** 2
        disc = b * b - c
        with np.errstate(invalid="ignore"):
            t = -b - np.sqrt(disc)
        t = np.where((disc >= 0) & (t > 0), t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(n), k]
        hit = tk < best
        best = np.where(hit, tk, best)
        colors[hit] = world.circle_colors[k[hit]]

    if len(world.boxes):
        sdx = np.where(dx == 0, 1e-300, dx)[:, None]
        sdy = np.where(dy == 0, 1e-300, dy)[:, None]
        tx0 = (world.boxes[:, 0] - x) / sdx
        tx1 = (world.boxes[:, 2] - x) / sdx
        ty0 = (world.boxes[:, 1] - y) / sdy
        ty1 = (world.boxes[:, 3] - y) / sdy
        tnear = np.maximum(np.minimum(tx0, tx1), np.minimum(ty0, ty1))
        tfar = np.minimum(np.maximum(tx0, tx1), np.maximum(ty0, ty1))
        t = np.where((tnear <= tfar) & (tnear > 0), tnear, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(n), k]
        hit = tk < best
        best = np.where(hit, tk, best)
        colors[hit] = world.box_colors[k[hit]]

    return best, colors


def render(pose, world: WorldMap, n_rays: int = N_RAYS, height: int = IMAGE_HEIGHT) -> tuple[np.ndarray, np.ndarray]:
    """Render a (3, height, n_rays) color panorama and n_rays depth values.

    Each column is a pseudo-3D slice: the hit surface occupies a band around
    the horizon whose height shrinks with distance and whose color is shaded
    by distance; the remaining rows show ceiling and floor.  Colors come from
    the first hit at any range; depths are clipped to ``MAX_DEPTH``.
    """
    x, y, theta = pose
    dist, colors = cast_rays(x, y, ray_angles(theta, n_rays), world)
    depth = np.minimum(dist, MAX_DEPTH)

    finite = np.isfinite(dist)
    safe = np.where(finite, np.maximum(dist, 1e-6), 1.0)
    shade = np.where(finite, 1.0 / (1.0 + 0.15 * safe), 0.0)
    half = 0.5 * height * np.where(finite, np.minimum(1.0, 0.8 / safe), 0.0)
    rows = np.abs(np.arange(height) + 0.5 - 0.5 * height)
    coverage = np.clip(half[None, :] - (rows[:, None] - 0.5), 0.0, 1.0)
    surface = (colors * shade[:, None]).T
    upper = (np.arange(height) < height / 2)[:, None]
    backdrop = np.where(upper[None], CEILING_COLOR[:, None, None], FLOOR_COLOR[:, None, None])
    image = coverage[None] * surface[:, None, :] + (1.0 - coverage[None]) * backdrop
    return np.clip(image, 0.0, 1.0).astype(np.float32), depth


# --------------------------------------------------------------------------
# Episodes, reward, environment


@dataclass(frozen=True)
class RewardParams:
    success_distance: float = 1.0
    success_angle: float = 25.0
    success_reward: float = 2.5
    slack_penalty: float = -0.01


def compute_reward(d_t: float, d_prev: float, alpha_t: float, params: RewardParams = RewardParams()) -> float:
    """Approach reward + success bonus + slack penalty (angles in degrees)."""
    success = d_t <= params.success_distance and alpha_t <= params.success_angle
    return (d_prev - d_t) + (params.success_reward if success else 0.0) + params.slack_penalty


def heading_error_deg(theta: float, goal_theta: float) -> float:
    return abs(math.degrees(float(wrap_angle(theta - goal_theta))))


@dataclass(frozen=True)
class EpisodeSpec:
    world_seed: int
    profile: str
    start: tuple[float, float, float]
    goal: tuple[float, float, float]
    difficulty: str
    optimal_length: float

    def world(self) -> WorldMap:
        return get_world(self.world_seed, self.profile)


@dataclass(frozen=True)
class Observation:
    current: np.ndarray  # (3, H, W)
    goal: np.ndarray  # (3, H, W)
    depth: np.ndarray  # (n_rays,)


@dataclass(frozen=True)
class StepInfo:
    distance: float
    heading_error: float
    success: bool
    stopped: bool
    timeout: bool
    path_length: float


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    done: bool
    collision: int
    info: StepInfo


class NavEnv:
    """Single image-goal navigation episode runner.

    Not safe for concurrent stepping; create one instance per worker.
    """

    def __init__(self, world: WorldMap | None = None, *, dt: float = DT, max_steps: int = MAX_STEPS,
                 reward_params: RewardParams = RewardParams(), geodesic: bool = True):
        self.world = world
        self.dt = dt
        self.max_steps = max_steps
        self.reward_params = reward_params
        self.geodesic = geodesic
        self.state: AgentState | None = None
        self.episode: EpisodeSpec | None = None
        self._field = None
        self._goal_image = None
        self.distance = math.nan
        self.path_length = 0.0
        self.done = True

    def distance_to_goal(self, x: float, y: float) -> float:
        gx, gy = self.episode.goal[:2]
        if not self.geodesic:
            return math.hypot(x - gx, y - gy)
        return _interpolated_distance(self.world, self._field, x, y)

    def reset(self, episode: EpisodeSpec, world: WorldMap | None = None) -> Observation:
        self.episode = episode
        self.world = world if world is not None else (self.world if self.world is not None
                                                      and self.world.seed == episode.world_seed
                                                      and self.world.profile == episode.profile
                                                      else episode.world())
        gx, gy, _ = episode.goal
        self._field = self.world.distance_field(gx, gy) if self.geodesic else None
        self._goal_image, _ = render(episode.goal, self.world)
        sx, sy, sth = episode.start
        self.state = AgentState(float(sx), float(sy), float(wrap_angle(sth)), 0)
        self.distance = self.distance_to_goal(sx, sy)
        self.path_length = 0.0
        self.done = False
        return self.observe()

    def observe(self) -> Observation:
        image, depth = render(self.state.pose, self.world)
        return Observation(image, self._goal_image, depth)

    def heading_error(self) -> float:
        return heading_error_deg(self.state.heading, self.episode.goal[2])

    def step(self, action: Action) -> StepResult:
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        prev = self.state
        self.state, collided = move(prev, action, self.world, self.dt)
        self.path_length += math.hypot(self.state.x - prev.x, self.state.y - prev.y)
        d_prev = self.distance
        self.distance = self.distance_to_goal(self.state.x, self.state.y)
        alpha = self.heading_error()
        p = self.reward_params
        reward = compute_reward(self.distance, d_prev, alpha, p)
        in_goal = self.distance <= p.success_distance and alpha <= p.success_angle
        stopped = is_stop(action)
        timeout = self.state.time_step >= self.max_steps
        self.done = stopped or in_goal or timeout
        info = StepInfo(self.distance, alpha, bool(self.done and in_goal), stopped, timeout,
                        self.path_length)
        return StepResult(self.observe(), reward, self.done, int(collided), info)


def _interpolated_distance(world: WorldMap, dist_field: np.ndarray, x: float, y: float) -> float:
    """Bilinear interpolation of a grid distance field between free cell centers.

    Falls back to the snapped cell value when any of the four surrounding
    centers is blocked or unreachable.
    """
    res = world.resolution
    xmin, ymin = world.bounds[:2]
    fx = (x - xmin) / res - 0.5
    fy = (y - ymin) / res - 0.5
    c0 = int(math.floor(fx))
    r0 = int(math.floor(fy))
    nrows, ncols = dist_field.shape
    if 0 <= r0 and r0 + 1 < nrows and 0 <= c0 and c0 + 1 < ncols:
        patch = dist_field[r0:r0 + 2, c0:c0 + 2]
        if np.all(np.isfinite(patch)):
            tx = fx - c0
            ty = fy - r0
            top = patch[0, 0] * (1 - tx) + patch[0, 1] * tx
            bot = patch[1, 0] * (1 - tx) + patch[1, 1] * tx
            return float(top * (1 - ty) + bot * ty)
    row, col = world.snap(x, y)
    return float(dist_field[row, col])


# --------------------------------------------------------------------------
# Text serialization


def world_to_text(world: WorldMap) -> str:
    """Line-oriented ``key = value`` description of a world."""
    lines = ["format = signnav-world/1", f"seed = {world.seed}", f"profile = {world.profile}",
             "bounds = " + " ".join(repr(b) for b in world.bounds),
             f"agent_radius = {world.agent_radius!r}"]
    for (x, y, r), col in zip(world.circles, world.circle_colors):
        lines.append("circle = " + " ".join(repr(float(v)) for v in (x, y, r, *col)))
    for box, col in zip(world.boxes, world.box_colors):
        lines.append("box = " + " ".join(repr(float(v)) for v in (*box, *col)))
    for side in SIDES:
        for col in world.wall_colors[side]:
            lines.append(f"wall = {side} " + " ".join(repr(float(v)) for v in col))
    return "\n".join(lines) + "\n"


def _parse_kv_lines(text: str) -> Iterable[tuple[int, str, str]]:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        yield lineno, key.strip(), value.strip()


def _world_field(fields: dict, key: str, value: str) -> None:
    parts = value.split()
    if key == "format":
        if value != "signnav-world/1":
            raise ValueError(f"unsupported format {value!r}")
    elif key == "seed":
        fields["seed"] = int(value)
    elif key == "profile":
        fields["profile"] = value
    elif key == "bounds":
        fields["bounds"] = tuple(float(v) for v in parts)
    elif key == "agent_radius":
        fields["agent_radius"] = float(value)
    elif key == "circle":
        v = [float(p) for p in parts]
        fields["circles"].append(v[:3])
        fields["circle_colors"].append(v[3:])
    elif key == "box":
        v = [float(p) for p in parts]
        fields["boxes"].append(v[:4])
        fields["box_colors"].append(v[4:])
    elif key == "wall":
        fields["walls"][parts[0]].append([float(p) for p in parts[1:]])
    else:
        raise ValueError(f"unknown key {key!r}")


def world_from_text(text: str) -> WorldMap:
    fields: dict = {"circles": [], "circle_colors": [], "boxes": [], "box_colors": [],
                    "walls": {s: [] for s in SIDES}}
    for lineno, key, value in _parse_kv_lines(text):
        try:
            _world_field(fields, key, value)
        except (ValueError, IndexError, KeyError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    missing = {"seed", "profile", "bounds"} - set(fields)
    if missing:
        raise ValueError(f"world text lacks {sorted(missing)}")
    return WorldMap(seed=fields["seed"], profile=fields["profile"], bounds=fields["bounds"],
                    circles=np.array(fields["circles"]).reshape(-1, 3),
                    boxes=np.array(fields["boxes"]).reshape(-1, 4),
                    circle_colors=np.array(fields["circle_colors"]).reshape(-1, 3),
                    box_colors=np.array(fields["box_colors"]).reshape(-1, 3),
                    wall_colors={s: np.array(c).reshape(-1, 3) for s, c in fields["walls"].items()},
                    agent_radius=fields.get("agent_radius", AGENT_RADIUS))


def episode_to_text(ep: EpisodeSpec) -> str:
    return "\n".join([
        "format = signnav-episode/1",
        f"world_seed = {ep.world_seed}",
        f"profile = {ep.profile}",
        "start = " + " ".join(repr(float(v)) for v in ep.start),
        "goal = " + " ".join(repr(float(v)) for v in ep.goal),
        f"difficulty = {ep.difficulty}",
        f"optimal_length = {ep.optimal_length!r}",
    ]) + "\n"


def episode_from_text(text: str) -> EpisodeSpec:
    parsers = {"start": lambda v: tuple(float(x) for x in v.split()),
               "goal": lambda v: tuple(float(x) for x in v.split()),
               "world_seed": int, "optimal_length": float, "profile": str, "difficulty": str}
    f = {}
    for lineno, key, value in _parse_kv_lines(text):
        if key == "format":
            continue
        if key not in parsers:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            f[key] = parsers[key](value)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    missing = set(parsers) - set(f)
    if missing:
        raise ValueError(f"episode text lacks {sorted(missing)}")
    return EpisodeSpec(**f)


# --------------------------------------------------------------------------
# Trajectory logs

TRAJECTORY_COLUMNS = ("time_step", "x", "y", "theta", "v_lin", "v_ang", "reward", "collision",
                      "q_c", "corrected", "fallback")


@dataclass
class TrajectoryLog:
    """Per-step records; ``q_c`` is NaN when no shield was active."""

    rows: list[tuple] = field(default_factory=list)

    def record(self, state: AgentState, action: Action, reward: float, collision: int,
               q_c: float = math.nan, corrected: bool = False, fallback: bool = False) -> None:
        self.rows.append((state.time_step, state.x, state.y, state.heading, action.v_lin,
                          action.v_ang, reward, int(collision), q_c, int(corrected), int(fallback)))

    def to_csv(self) -> str:
        out = [",".join(TRAJECTORY_COLUMNS)]
        for r in self.rows:
            out.append(",".join([str(r[0])] + [f"{v:.6f}" for v in r[1:7]] +
                                [str(r[7]), f"{r[8]:.6f}", str(r[9]), str(r[10])]))
        return "\n".join(out) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrajectoryLog":
        lines = text.strip().splitlines()
        if not lines or lines[0].split(",") != list(TRAJECTORY_COLUMNS):
            raise ValueError("not a trajectory log")
        rows = []
        for line in lines[1:]:
            p = line.split(",")
            rows.append((int(p[0]), *[float(v) for v in p[1:7]], int(p[7]), float(p[8]), int(p[9]),
                         int(p[10])))
        return cls(rows)


def start_state(pose: Sequence[float]) -> AgentState:
    return AgentState(float(pose[0]), float(pose[1]), float(wrap_angle(pose[2])), 0)

