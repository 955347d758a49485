"""Corridor worlds, occupancy grids, and the coarse global plan.

A world is an axis-aligned corridor (long axis +x) bounded by four walls,
optionally decorated with rectangular insets that protrude from the side
walls.  The goal sits exactly ``goal_distance`` metres ahead of the start
along the corridor axis.  Everything here is pure and deterministic in the
seed, so worlds can be regenerated from their seed for replay.

Planning deliberately ignores pedestrians: the occupancy grid contains only
static walls, and the A* plan is computed on that empty map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from heapq import heappush, heappop

import numpy as np

from .config import WorldConfig
from .errors import ConfigurationError, PlanningError

WORLD_SCHEMA_VERSION = 1

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class CorridorWorld:
    """Static geometry of one generated corridor."""

    walls: np.ndarray  # (W, 4) segments x1,y1,x2,y2 in metres
    width: float
    length: float
    start_xy: np.ndarray  # (2,)
    start_camera_heading: float
    goal_xy: np.ndarray  # (2,)
    free_area: float
    seed: int

    def to_json(self) -> str:
        doc = {
            "schema_version": WORLD_SCHEMA_VERSION,
            "walls": self.walls.tolist(),
            "width": self.width,
            "length": self.length,
            "start_xy": self.start_xy.tolist(),
            "start_camera_heading": self.start_camera_heading,
            "goal_xy": self.goal_xy.tolist(),
            "free_area": self.free_area,
            "seed": self.seed,
        }
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str) -> "CorridorWorld":
        doc = json.loads(text)
        if doc.get("schema_version") != WORLD_SCHEMA_VERSION:
            raise ConfigurationError(
                f"unsupported world schema version {doc.get('schema_version')!r}"
            )
        return CorridorWorld(
            walls=_freeze(np.asarray(doc["walls"], dtype=np.float64).reshape(-1, 4)),
            width=float(doc["width"]),
            length=float(doc["length"]),
            start_xy=_freeze(np.asarray(doc["start_xy"], dtype=np.float64)),
            start_camera_heading=float(doc["start_camera_heading"]),
            goal_xy=_freeze(np.asarray(doc["goal_xy"], dtype=np.float64)),
            free_area=float(doc["free_area"]),
            seed=int(doc["seed"]),
        )


@dataclass(frozen=True)
class OccupancyGrid:
    """Boolean grid over the world's wall bounding box (True = occupied).

    Cells are indexed ``cells[ix, iy]`` with ix along +x.  The grid is not
    inflated; obstacle inflation by the robot radius happens at planning time
    so the raw grid stays usable for ground-truth queries.
    """

    resolution: float
    origin: np.ndarray  # (2,) world position of cell (0, 0)'s lower corner
    cells: np.ndarray  # (nx, ny) bool

    def world_to_cell(self, point) -> tuple[int, int]:
        ix = int(math.floor((point[0] - self.origin[0]) / self.resolution))
        iy = int(math.floor((point[1] - self.origin[1]) / self.resolution))
        return ix, iy

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        return self.origin + (np.array([ix, iy], dtype=np.float64) + 0.5) * self.resolution


@dataclass(frozen=True)
class GlobalPath:
    """Resampled waypoint list with cumulative arc lengths."""

    waypoints: np.ndarray  # (K, 2)
    arc_length: float
    cumulative: np.ndarray  # (K,) arc length at each waypoint
    cost: float = 0.0  # grid cost n_straight + n_diag * sqrt(2)

    def project(self, point, min_arc: float = 0.0) -> float:
        """Arc length of the closest point on the path, floored at min_arc."""
        p = np.asarray(point, dtype=np.float64)
        w = self.waypoints
        if len(w) == 1:
            return max(min_arc, 0.0)
        a = w[:-1]
        b = w[1:]
        ab = b - a
        seg_len2 = np.einsum("ij,ij->i", ab, ab)
        seg_len2 = np.where(seg_len2 == 0.0, 1.0, seg_len2)
        t = np.clip(np.einsum("ij,ij->i", p - a, ab) / seg_len2, 0.0, 1.0)
        closest = a + t[:, None] * ab
        d2 = np.einsum("ij,ij->i", p - closest, p - closest)
        k = int(np.argmin(d2))
        arc = self.cumulative[k] + t[k] * (self.cumulative[k + 1] - self.cumulative[k])
        return max(min_arc, float(arc))

    def active_waypoint(self, progress: float, lookahead: float) -> np.ndarray:
        """First waypoint more than `lookahead` metres ahead of `progress`."""
        idx = int(np.searchsorted(self.cumulative, progress + lookahead, side="right"))
        idx = min(idx, len(self.waypoints) - 1)
        return self.waypoints[idx]


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def generate_corridor(seed: int, params: WorldConfig) -> CorridorWorld:
    """Procedurally generate one corridor world, deterministic in the seed."""
    lo, hi = params.width_range
    if not (2.0 <= lo <= hi <= 4.0):
        raise ConfigurationError(f"width_range {params.width_range} outside [2.0, 4.0]")
    if params.length_range[0] < 7.0 or params.length_range[0] > params.length_range[1]:
        raise ConfigurationError(f"length_range {params.length_range} must be >= 7.0 m")
    if params.inset_max_depth > 0.5:
        raise ConfigurationError("inset_max_depth must be <= 0.5 m")
    robot_radius = 0.3  # placement clearance; planning re-inflates with the true value
    margin = robot_radius + params.clearance_margin

    rng = np.random.default_rng(seed)
    width = float(rng.uniform(lo, hi))
    length = float(rng.uniform(*params.length_range))

    # start anywhere that leaves room for the goal 5 m further down the axis
    x_lo = margin
    x_hi = length - params.goal_distance - margin
    if x_hi < x_lo:
        raise ConfigurationError(
            f"length {length:.2f} too short for a {params.goal_distance} m goal offset"
        )
    start_x = float(rng.uniform(x_lo, x_hi))
    start_y = float(rng.uniform(margin, width - margin))
    start = np.array([start_x, start_y])
    goal = np.array([start_x + params.goal_distance, start_y])

    walls = [
        (0.0, 0.0, length, 0.0),
        (0.0, width, length, width),
        (0.0, 0.0, 0.0, width),
        (length, 0.0, length, width),
    ]

    # rectangular insets protrude from a side wall; they reduce free area and
    # must keep clear of the start/goal columns so both stay wall-free
    inset_area = 0.0
    n_insets = int(rng.integers(params.inset_count_range[0], params.inset_count_range[1] + 1))
    keepout = [
        (start_x - margin, start_x + margin),
        (goal[0] - margin, goal[0] + margin),
    ]
    for _ in range(n_insets):
        depth = float(rng.uniform(0.2, params.inset_max_depth))
        ilen = float(rng.uniform(*params.inset_length_range))
        x0 = float(rng.uniform(0.0, length - ilen))
        side_top = bool(rng.integers(0, 2))
        x1 = x0 + ilen
        if any(x0 < k_hi and x1 > k_lo for (k_lo, k_hi) in keepout):
            continue  # drop insets that would crowd the start or goal column
        if side_top:
            y_wall, y_in = width, width - depth
        else:
            y_wall, y_in = 0.0, depth
        walls.append((x0, y_wall, x0, y_in))
        walls.append((x0, y_in, x1, y_in))
        walls.append((x1, y_in, x1, y_wall))
        inset_area += depth * ilen

    free_area = width * length - inset_area
    assert free_area > 0.0
    return CorridorWorld(
        walls=_freeze(np.array(walls, dtype=np.float64)),
        width=width,
        length=length,
        start_xy=_freeze(start),
        start_camera_heading=0.0,
        goal_xy=_freeze(goal),
        free_area=free_area,
        seed=int(seed),
    )


def rasterize(world: CorridorWorld, resolution: float, pad: float = 0.3) -> OccupancyGrid:
    """Mark every cell touched by a wall segment as occupied (supercover).

    The grid covers the wall bounding box inflated by `pad` (the robot
    radius) so the planner can stand anywhere the robot physically fits.
    """
    if not (0.0 < resolution <= 0.5):
        raise ConfigurationError(f"resolution {resolution} outside (0, 0.5]")
    xs = np.concatenate([world.walls[:, 0], world.walls[:, 2]])
    ys = np.concatenate([world.walls[:, 1], world.walls[:, 3]])
    origin = np.array([xs.min() - pad, ys.min() - pad])
    nx = int(math.ceil((xs.max() + pad - origin[0]) / resolution))
    ny = int(math.ceil((ys.max() + pad - origin[1]) / resolution))
    cells = np.zeros((nx, ny), dtype=bool)
    for x1, y1, x2, y2 in world.walls:
        _trace_segment(cells, origin, resolution, x1, y1, x2, y2)
    return OccupancyGrid(resolution=resolution, origin=_freeze(origin), cells=_freeze(cells))


def _trace_segment(cells, origin, res, x1, y1, x2, y2):
    """Amanatides-Woo traversal marking every cell the segment passes through."""
    nx, ny = cells.shape

    def clamp_ix(v):
        return min(max(v, 0), nx - 1)

    def clamp_iy(v):
        return min(max(v, 0), ny - 1)

    ix = clamp_ix(int(math.floor((x1 - origin[0]) / res)))
    iy = clamp_iy(int(math.floor((y1 - origin[1]) / res)))
    ix_end = clamp_ix(int(math.floor((x2 - origin[0]) / res)))
    iy_end = clamp_iy(int(math.floor((y2 - origin[1]) / res)))
    cells[ix, iy] = True
    dx = x2 - x1
    dy = y2 - y1
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    # parametric distance to the next cell boundary along each axis
    t_max_x = math.inf
    t_max_y = math.inf
    t_dx = math.inf
    t_dy = math.inf
    if dx != 0.0:
        next_x = origin[0] + (ix + (step_x > 0)) * res
        t_max_x = (next_x - x1) / dx
        t_dx = res / abs(dx)
    if dy != 0.0:
        next_y = origin[1] + (iy + (step_y > 0)) * res
        t_max_y = (next_y - y1) / dy
        t_dy = res / abs(dy)
    guard = 4 * (nx + ny)
    while (ix, iy) != (ix_end, iy_end) and guard > 0:
        guard -= 1
        if t_max_x < t_max_y:
            if t_max_x > 1.0:
                break
            ix += step_x
            t_max_x += t_dx
        elif t_max_y < t_max_x:
            if t_max_y > 1.0:
                break
            iy += step_y
            t_max_y += t_dy
        else:
            # exact corner crossing: mark both axis neighbours (supercover)
            if t_max_x > 1.0:
                break
            cells[clamp_ix(ix + step_x), iy] = True
            cells[ix, clamp_iy(iy + step_y)] = True
            ix += step_x
            iy += step_y
            t_max_x += t_dx
            t_max_y += t_dy
        cells[clamp_ix(ix), clamp_iy(iy)] = True


def inflate(cells: np.ndarray, radius_cells: float) -> np.ndarray:
    """Dilate occupied cells by a Euclidean disc of the given cell radius."""
    if radius_cells <= 0.0:
        return cells.copy()
    r = int(math.floor(radius_cells))
    out = cells.copy()
    nx, ny = cells.shape
    for ox in range(-r, r + 1):
        for oy in range(-r, r + 1):
            if ox == 0 and oy == 0:
                continue
            if math.hypot(ox, oy) > radius_cells:
                continue
            src_x = slice(max(0, -ox), min(nx, nx - ox))
            src_y = slice(max(0, -oy), min(ny, ny - oy))
            dst_x = slice(max(0, ox), min(nx, nx + ox))
            dst_y = slice(max(0, oy), min(ny, ny + oy))
            out[dst_x, dst_y] |= cells[src_x, src_y]
    return out


# 8-connected moves; diagonals may not cut corners (both orthogonal
# neighbours must be free).  The Dijkstra oracle in the tests implements the
# same movement rule independently.
_MOVES = (
    (1, 0, False), (-1, 0, False), (0, 1, False), (0, -1, False),
    (1, 1, True), (1, -1, True), (-1, 1, True), (-1, -1, True),
)


def plan_global(
    grid: OccupancyGrid,
    start,
    goal,
    robot_radius: float,
    waypoint_spacing: float = 0.5,
) -> GlobalPath:
    """8-connected A* on the inflated grid, resampled to <= `waypoint_spacing`.

    Path cost is reported exactly as ``n_straight + n_diagonal * sqrt(2)`` so
    an independent shortest-path oracle computing the same quantity matches
    bit for bit.  Ties in the open list break on lower heuristic, then lower
    flattened cell index, which makes the returned path deterministic.
    """
    blocked = inflate(grid.cells, robot_radius / grid.resolution)
    nx, ny = blocked.shape
    start_c = grid.world_to_cell(start)
    goal_c = grid.world_to_cell(goal)
    for name, (ix, iy) in (("start", start_c), ("goal", goal_c)):
        if not (0 <= ix < nx and 0 <= iy < ny):
            raise PlanningError(f"{name} cell {ix, iy} outside the grid")
        if blocked[ix, iy]:
            raise PlanningError(f"{name} lies in an inflated-occupied cell")

    if start_c == goal_c:
        wp = np.asarray(start, dtype=np.float64).reshape(1, 2).copy()
        return GlobalPath(_freeze(wp), 0.0, _freeze(np.zeros(1)))

    def heuristic(c):
        dx = abs(c[0] - goal_c[0])
        dy = abs(c[1] - goal_c[1])
        return max(dx, dy) + (SQRT2 - 1.0) * min(dx, dy)

    g_cost = {start_c: 0.0}
    counts = {start_c: (0, 0)}  # (straight, diagonal) moves on the best path
    came_from: dict[tuple[int, int], tuple[int, int]] = {}
    closed = set()
    h0 = heuristic(start_c)
    open_heap = [(h0, h0, start_c[0] * ny + start_c[1], start_c)]
    while open_heap:
        _, _, _, cur = heappop(open_heap)
        if cur in closed:
            continue
        if cur == goal_c:
            break
        closed.add(cur)
        cx, cy = cur
        for dx, dy, diag in _MOVES:
            tx, ty = cx + dx, cy + dy
            if not (0 <= tx < nx and 0 <= ty < ny) or blocked[tx, ty]:
                continue
            if diag and (blocked[cx + dx, cy] or blocked[cx, cy + dy]):
                continue
            step = SQRT2 if diag else 1.0
            tentative = g_cost[cur] + step
            nbr = (tx, ty)
            if nbr not in g_cost or tentative < g_cost[nbr]:
                g_cost[nbr] = tentative
                s, d = counts[cur]
                counts[nbr] = (s, d + 1) if diag else (s + 1, d)
                came_from[nbr] = cur
                h = heuristic(nbr)
                heappush(open_heap, (tentative + h, h, tx * ny + ty, nbr))
    else:
        raise PlanningError("no path between start and goal")

    cells = [goal_c]
    while cells[-1] != start_c:
        cells.append(came_from[cells[-1]])
    cells.reverse()

    polyline = [np.asarray(start, dtype=np.float64)]
    polyline += [grid.cell_center(ix, iy) for ix, iy in cells[1:-1]]
    polyline.append(np.asarray(goal, dtype=np.float64))
    waypoints = _resample(polyline, waypoint_spacing)
    cumulative = np.concatenate(
        [[0.0], np.cumsum(np.linalg.norm(np.diff(waypoints, axis=0), axis=1))]
    )
    s, d = counts[goal_c]
    return GlobalPath(
        waypoints=_freeze(waypoints),
        arc_length=float(cumulative[-1]),
        cumulative=_freeze(cumulative),
        cost=s + d * SQRT2,  # exact minimal cost from integer move counts
    )


def _resample(polyline, spacing: float) -> np.ndarray:
    """Subdivide each segment so spacing <= `spacing`; keeps every vertex,
    so the resampled arc length equals the original polyline length."""
    out = [polyline[0]]
    for a, b in zip(polyline[:-1], polyline[1:]):
        seg = float(np.linalg.norm(b - a))
        if seg == 0.0:
            continue
        n = max(1, int(math.ceil(seg / spacing)))
        for k in range(1, n + 1):
            out.append(a + (b - a) * (k / n))
    return np.array(out, dtype=np.float64)
