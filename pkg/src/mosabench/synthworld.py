"""Synthetic style-shift world: semantic grids, a cost-aware planner and a
speed/noise-parameterised trajectory sampler.

Coordinates are continuous ``(x, y) = (col, row)`` in grid units; the centre
of cell ``(r, c)`` is ``(c + 0.5, r + 0.5)``.
"""

from __future__ import annotations

import functools
import heapq
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import SplitMix64, _mix

ROAD, SIDEWALK, OBSTACLE, TERRAIN = 0, 1, 2, 3
CLASS_NAMES = ("road", "sidewalk", "obstacle", "terrain")
N_CLASSES = 4
GRID_SIZE = 16
SPEED_CLAMP = (0.2, 4.0)
MIN_SEPARATION = 6.0
_TIE_EPS = 1e-12
_SQRT2 = math.sqrt(2.0)

_MOVES = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


class NoPathError(RuntimeError):
    pass


class PathTooShort(RuntimeError):
    pass


@dataclass
class SceneGrid:
    id: str
    cells: np.ndarray  # H x W int class ids

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64)
        if self.cells.ndim != 2:
            raise ValueError("scene cells must be a 2-D grid")
        if self.cells.min() < 0 or self.cells.max() >= N_CLASSES:
            raise ValueError(f"scene {self.id!r}: class ids must lie in [0, {N_CLASSES})")

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def free_cells(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.cells != OBSTACLE)
        return list(zip(rows.tolist(), cols.tolist()))

    def class_at(self, x: float, y: float) -> int:
        h, w = self.shape
        r = min(max(int(math.floor(y)), 0), h - 1)
        c = min(max(int(math.floor(x)), 0), w - 1)
        return int(self.cells[r, c])


@dataclass
class StyleParams:
    v_pref_mean: float = 0.5
    v_pref_std: float = 0.1
    # road, sidewalk, obstacle, terrain
    class_costs: tuple = (1.0, 1.0, math.inf, 2.0)
    jitter_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.class_costs = tuple(float(c) for c in self.class_costs)
        if not self.v_pref_mean > 0:
            raise ValueError("v_pref_mean must be positive")
        if self.v_pref_std < 0 or self.jitter_sigma < 0:
            raise ValueError("v_pref_std and jitter_sigma must be non-negative")
        if len(self.class_costs) != N_CLASSES:
            raise ValueError("class_costs needs one entry per class")
        for k, c in enumerate(self.class_costs):
            if k == OBSTACLE:
                continue
            if not (math.isfinite(c) and c > 0):
                raise ValueError(f"class cost for {CLASS_NAMES[k]} must be finite and positive")

    def to_dict(self) -> dict:
        costs = [None if k == OBSTACLE else c for k, c in enumerate(self.class_costs)]
        return {"v_pref_mean": self.v_pref_mean, "v_pref_std": self.v_pref_std,
                "class_costs": costs, "jitter_sigma": self.jitter_sigma, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "StyleParams":
        costs = [math.inf if c is None else c for c in d["class_costs"]]
        return cls(d["v_pref_mean"], d["v_pref_std"], tuple(costs), d["jitter_sigma"], d["seed"])


@dataclass
class Sample:
    scene_id: str
    past: np.ndarray    # t_obs x 2
    future: np.ndarray  # t_pred x 2


@dataclass
class Dataset:
    samples: list[Sample]
    scenes: dict[str, SceneGrid]
    style: StyleParams
    tag: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.scenes, self.style, self.tag)


@dataclass
class DatasetSpec:
    scene_ids: tuple[str, ...]
    style: StyleParams
    tag: str = ""


# ---------------------------------------------------------------------------
# scenes


def _authored(scene_id, road_rows, road_cols, blocks, size=GRID_SIZE) -> SceneGrid:
    cells = np.full((size, size), TERRAIN, dtype=np.int64)
    r0, r1 = road_rows
    c0, c1 = road_cols
    cells[r0:r1, :] = ROAD
    cells[:, c0:c1] = ROAD
    road = cells == ROAD
    # one-cell sidewalk ring around the road network
    ring = np.zeros_like(road)
    for dr, dc in _MOVES:
        shifted = np.zeros_like(road)
        shifted[max(dr, 0):size + min(dr, 0), max(dc, 0):size + min(dc, 0)] = \
            road[max(-dr, 0):size + min(-dr, 0), max(-dc, 0):size + min(-dc, 0)]
        ring |= shifted
    cells[ring & ~road] = SIDEWALK
    for br0, bc0, br1, bc1 in blocks:
        block = cells[br0:br1, bc0:bc1]
        block[block == TERRAIN] = OBSTACLE
    return SceneGrid(scene_id, cells)


# (road rows, road cols, obstacle blocks as r0, c0, r1, c1)
_LAYOUTS = {
    "layout1": ((7, 9), (7, 9), [(1, 1, 4, 4), (1, 12, 4, 15), (12, 1, 15, 4), (12, 12, 15, 15)]),
    "layout2": ((6, 10), (7, 9), [(0, 0, 3, 4), (12, 11, 16, 16), (1, 12, 4, 14)]),
    "layout3": ((7, 9), (6, 10), [(1, 1, 3, 4), (12, 1, 15, 3), (0, 12, 4, 16), (13, 12, 15, 15)]),
    # unseen scene: the crossing sits in a corner rather than the centre
    "layout4": ((2, 4), (11, 13), [(7, 2, 10, 7), (11, 3, 14, 8), (8, 14, 10, 16)]),
}

SCENE_PRESETS = tuple(_LAYOUTS)


def build_scene(preset_id: str) -> SceneGrid:
    if preset_id not in _LAYOUTS:
        raise ValueError(f"unknown scene preset {preset_id!r}; expected one of {SCENE_PRESETS}")
    rows, cols, blocks = _LAYOUTS[preset_id]
    return _authored(preset_id, rows, cols, blocks)


# ---------------------------------------------------------------------------
# planning


def _check_cell(grid: SceneGrid, cell) -> None:
    h, w = grid.shape
    if not (0 <= cell[0] < h and 0 <= cell[1] < w):
        raise ValueError(f"cell {cell} outside grid {grid.shape}")
    if grid.cells[cell] == OBSTACLE:
        raise ValueError(f"cell {cell} is an obstacle")


@functools.lru_cache(maxsize=4096)
def _shortest_tree(cells_key: bytes, shape: tuple, costs: tuple, start: tuple) -> dict:
    """Predecessor map of the full Dijkstra tree rooted at ``start``."""
    h, w = shape
    cells = np.frombuffer(cells_key, dtype=np.int64).reshape(shape)
    dist = {start: 0.0}
    pred: dict = {}
    done = set()
    heap = [(0.0, start)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for dr, dc in _MOVES:
            v = (u[0] + dr, u[1] + dc)
            if not (0 <= v[0] < h and 0 <= v[1] < w) or v in done:
                continue
            k = cells[v]
            if k == OBSTACLE:
                continue
            nd = d + costs[k] * (_SQRT2 if dr and dc else 1.0)
            old = dist.get(v)
            if old is None or nd < old - _TIE_EPS:
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
            elif abs(nd - old) <= _TIE_EPS and u < pred[v]:
                # costs are positive, so every equal-cost predecessor is
                # settled before v itself is popped
                pred[v] = u
    return pred


def plan_path(grid: SceneGrid, costs, start, goal) -> list[tuple[int, int]]:
    """Minimum-cost 8-connected path from ``start`` to ``goal`` (cells).

    Entering a cell costs ``costs[class]``, times sqrt(2) for diagonal moves.
    Among equal-cost predecessors the lexicographically smallest (row, col)
    wins.
    """
    start, goal = tuple(int(v) for v in start), tuple(int(v) for v in goal)
    _check_cell(grid, start)
    _check_cell(grid, goal)
    if start == goal:
        return [start]
    pred = _shortest_tree(grid.cells.tobytes(), grid.shape, tuple(float(c) for c in costs), start)
    if goal not in pred:
        raise NoPathError(f"no path from {start} to {goal} in scene {grid.id!r}")
    path = [goal]
    while path[-1] != start:
        path.append(pred[path[-1]])
    return path[::-1]


def path_cost(grid: SceneGrid, costs, path) -> float:
    total = 0.0
    for (r0, c0), (r1, c1) in zip(path, path[1:]):
        diag = r0 != r1 and c0 != c1
        total += costs[grid.cells[r1, c1]] * (_SQRT2 if diag else 1.0)
    return total


# ---------------------------------------------------------------------------
# trajectories


def _centres(path) -> np.ndarray:
    return np.array([(c + 0.5, r + 0.5) for r, c in path], dtype=np.float64)


def interpolate_path(points: np.ndarray, arc: np.ndarray) -> np.ndarray:
    """Positions at arc lengths ``arc`` along a polyline; stops at the end."""
    if len(points) == 1:
        return np.repeat(points, len(arc), axis=0)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    out = np.empty((len(arc), 2))
    for i, s in enumerate(arc):
        if s >= cum[-1]:
            out[i] = points[-1]
            continue
        j = int(np.searchsorted(cum, s, side="right")) - 1
        t = (s - cum[j]) / seg[j]
        out[i] = points[j] + t * (points[j + 1] - points[j])
    return out


def draw_speed(style: StyleParams, rng: SplitMix64) -> float:
    v = rng.gauss(style.v_pref_mean, style.v_pref_std)
    return min(max(v, SPEED_CLAMP[0]), SPEED_CLAMP[1])


def sample_trajectory(grid: SceneGrid, style: StyleParams, start, goal, total_steps: int,
                      rng: SplitMix64, full_window: bool = False) -> np.ndarray:
    """``total_steps`` points walking the planned path at a sampled speed.

    Once the path is used up the walker stays at ``goal``. With
    ``full_window`` a path too short to be walked for the whole window raises
    :class:`PathTooShort` instead (after the speed draw, so the stream
    advances identically either way).
    """
    path = plan_path(grid, style.class_costs, start, goal)
    v = draw_speed(style, rng)
    pts = _centres(path)
    if full_window:
        length = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
        if length < v * (total_steps - 1):
            raise PathTooShort(f"path of length {length:.2f} is exhausted before step {total_steps - 1}")
    pts = interpolate_path(pts, v * np.arange(total_steps, dtype=np.float64))
    if style.jitter_sigma > 0:
        noise = rng.gauss_block(2 * total_steps, 0.0, style.jitter_sigma)
        pts = pts + noise.reshape(total_steps, 2)
    h, w = grid.shape
    pts[:, 0] = np.clip(pts[:, 0], 0.0, float(w))
    pts[:, 1] = np.clip(pts[:, 1], 0.0, float(h))
    return pts


def _endpoint_pairs_exist(free) -> bool:
    arr = np.asarray(free, dtype=np.float64)
    if len(arr) < 2:
        return False
    d = np.linalg.norm(arr[:, None, :] - arr[None, :, :], axis=-1)
    return bool((d >= MIN_SEPARATION).any())


def generate_dataset(scenes: list[SceneGrid], style: StyleParams, n: int, seed: int,
                     t_obs: int = 8, t_pred: int = 12, tag: str = "") -> Dataset:
    if n < 1:
        raise ValueError("n must be at least 1")
    if not scenes:
        raise ValueError("at least one scene is required")
    scenes = sorted(scenes, key=lambda s: s.id)
    free = {}
    for s in scenes:
        free[s.id] = s.free_cells()
        if not _endpoint_pairs_exist(free[s.id]):
            raise ValueError(f"scene {s.id!r} has too few free cells for start/goal pairs")
    rng = SplitMix64(_mix((int(seed) ^ _mix(int(style.seed) & 0xFFFFFFFFFFFFFFFF)) & 0xFFFFFFFFFFFFFFFF))
    total = t_obs + t_pred
    samples = []
    while len(samples) < n:
        scene = scenes[rng.randint(len(scenes))]
        cells = free[scene.id]
        start = cells[rng.randint(len(cells))]
        goal = cells[rng.randint(len(cells))]
        if math.dist(start, goal) < MIN_SEPARATION:
            continue
        try:
            pts = sample_trajectory(scene, style, start, goal, total, rng, full_window=True)
        except (NoPathError, PathTooShort):
            continue
        samples.append(Sample(scene.id, pts[:t_obs].copy(), pts[t_obs:].copy()))
    return Dataset(samples, {s.id: s for s in scenes}, style, tag)


# ---------------------------------------------------------------------------
# scenario presets

SCENARIOS = ("agent_shift", "scene_shift", "class_shift")
_TRAIN_LAYOUTS = ("layout1", "layout2", "layout3")


def scenario_preset(name: str) -> tuple[DatasetSpec, DatasetSpec]:
    base = StyleParams()
    if name == "agent_shift":
        return (DatasetSpec(_TRAIN_LAYOUTS, base, "source"),
                DatasetSpec(_TRAIN_LAYOUTS, replace(base, v_pref_mean=2.0 * base.v_pref_mean), "target"))
    if name == "scene_shift":
        return (DatasetSpec(_TRAIN_LAYOUTS, base, "source"),
                DatasetSpec(("layout4",), replace(base), "target"))
    if name == "class_shift":
        src = replace(base, class_costs=(3.0, 1.0, math.inf, 2.0))
        tgt = replace(base, class_costs=(1.0, 3.0, math.inf, 4.0), v_pref_mean=2.0 * base.v_pref_mean)
        return DatasetSpec(_TRAIN_LAYOUTS, src, "source"), DatasetSpec(_TRAIN_LAYOUTS, tgt, "target")
    raise ValueError(f"unknown scenario {name!r}; expected one of {SCENARIOS}")


def build_spec_dataset(spec: DatasetSpec, n: int, seed: int, t_obs: int = 8, t_pred: int = 12) -> Dataset:
    scenes = [build_scene(s) for s in spec.scene_ids]
    return generate_dataset(scenes, spec.style, n, seed, t_obs, t_pred, spec.tag)


def road_occupancy(ds: Dataset) -> float:
    """Fraction of trajectory points lying on road cells."""
    hits = total = 0
    for s in ds.samples:
        grid = ds.scenes[s.scene_id]
        for x, y in np.concatenate([s.past, s.future]):
            hits += grid.class_at(x, y) == ROAD
            total += 1
    return hits / total


def mean_step_length(ds: Dataset) -> float:
    steps = [np.linalg.norm(np.diff(np.concatenate([s.past, s.future]), axis=0), axis=1)
             for s in ds.samples]
    return float(np.mean(np.concatenate(steps)))
