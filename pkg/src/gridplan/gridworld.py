"""Grid-world path-finding instances and exact planning oracles.

Maps are boolean obstacle grids with a goal cell. The agent moves to one of
its eight neighbours; every move costs one step, diagonals included, and
diagonal moves are legal even when both adjacent orthogonal cells are
blocked (corner cutting). These conventions are recorded in every dataset
manifest rather than assumed.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

# Fixed action order; offsets are (d_row, d_col). Expansion and tie-breaking
# everywhere follow this order, so labels and policies are reproducible.
ACTION_NAMES = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
ACTION_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
NUM_ACTIONS = 8


class GenerationError(Exception):
    """Map generation cannot satisfy the requested configuration."""


class Unreachable(Exception):
    """No path exists from the queried start to the goal."""


def chebyshev(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


@dataclass(frozen=True)
class GridMap:
    """Occupancy grid plus goal cell.

    ``obstacles[r, c]`` is True where the cell is blocked. The goal is
    always a free cell and at least one other free cell exists.
    """

    obstacles: np.ndarray
    goal: tuple[int, int]

    def __post_init__(self):
        obs = np.asarray(self.obstacles, dtype=bool)
        object.__setattr__(self, "obstacles", obs)
        object.__setattr__(self, "goal", (int(self.goal[0]), int(self.goal[1])))
        if obs.ndim != 2:
            raise GenerationError(f"obstacle grid must be 2-D, got shape {obs.shape}")
        gr, gc = self.goal
        if not (0 <= gr < obs.shape[0] and 0 <= gc < obs.shape[1]):
            raise GenerationError(f"goal {self.goal} outside {obs.shape} grid")
        if obs[gr, gc]:
            raise GenerationError(f"goal {self.goal} lies on an obstacle")
        if int((~obs).sum()) < 2:
            raise GenerationError("map needs at least one free non-goal cell")

    @property
    def m(self) -> int:
        return self.obstacles.shape[0]

    @property
    def n(self) -> int:
        return self.obstacles.shape[1]

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        return 0 <= cell[0] < self.m and 0 <= cell[1] < self.n

    def is_free(self, cell: tuple[int, int]) -> bool:
        return self.in_bounds(cell) and not self.obstacles[cell[0], cell[1]]

    def free_cells(self) -> np.ndarray:
        """(k, 2) array of free cell coordinates in row-major order."""
        return np.argwhere(~self.obstacles)


def step_cell(grid: GridMap, cell: tuple[int, int], action: int) -> tuple[int, int]:
    """Apply an action; blocked or out-of-bounds moves leave the agent in place."""
    dr, dc = ACTION_OFFSETS[action]
    target = (cell[0] + dr, cell[1] + dc)
    return target if grid.is_free(target) else cell


def neighbors(grid: GridMap, cell: tuple[int, int]) -> Iterator[tuple[int, tuple[int, int]]]:
    """Free neighbouring cells in fixed action order, with the action taken."""
    for action, (dr, dc) in enumerate(ACTION_OFFSETS):
        target = (cell[0] + dr, cell[1] + dc)
        if grid.is_free(target):
            yield action, target


def generate_map(m: int, n: int, density_range, rng: np.random.Generator) -> GridMap:
    """Draw a random map: obstacle share uniform in ``density_range``, goal uniform on free cells.

    The obstacle count is round(density * m * n). Maps leaving fewer than two
    free cells are rejected and redrawn from the same stream.
    """
    lo, hi = float(density_range[0]), float(density_range[1])
    if m < 4 or n < 4:
        raise GenerationError(f"map must be at least 4x4, got {m}x{n}")
    if not (0.0 <= lo <= hi <= 0.5):
        raise GenerationError(f"density range [{lo}, {hi}] must lie within [0, 0.5]")
    for _ in range(1000):
        density = rng.uniform(lo, hi)
        count = int(round(density * m * n))
        if m * n - count < 2:
            raise GenerationError(f"density {density:.3f} leaves fewer than 2 free cells on {m}x{n}")
        obstacles = np.zeros(m * n, dtype=bool)
        obstacles[rng.choice(m * n, size=count, replace=False)] = True
        obstacles = obstacles.reshape(m, n)
        free = np.argwhere(~obstacles)
        if len(free) < 2:
            continue
        goal = free[rng.integers(len(free))]
        return GridMap(obstacles, (int(goal[0]), int(goal[1])))
    raise GenerationError(f"could not generate a valid {m}x{n} map")


@dataclass(frozen=True)
class PlanningSample:
    """One supervised example: a map, an agent position, and the expert move."""

    grid: GridMap
    agent: tuple[int, int]
    expert_action: int
    optimal_length: int

    def __post_init__(self):
        object.__setattr__(self, "agent", (int(self.agent[0]), int(self.agent[1])))
        if not self.grid.is_free(self.agent):
            raise ValueError(f"agent cell {self.agent} is not free")
        if self.agent == self.grid.goal:
            raise ValueError("agent must start away from the goal")
        if not 0 <= self.expert_action < NUM_ACTIONS:
            raise ValueError(f"expert action {self.expert_action} outside 0..{NUM_ACTIONS - 1}")


def astar_shortest(grid: GridMap, start: tuple[int, int]) -> tuple[list[tuple[int, int]], int]:
    """A* shortest path from ``start`` to the goal under unit move cost.

    The heuristic is Chebyshev distance, which is exact on empty maps and
    admissible in general. The priority queue breaks ties by (f, h, squared
    Euclidean distance to the goal, row, col) and neighbours expand in fixed
    action order, so the returned path is unique across runs and hugs the
    direct line among equal-cost alternatives (a due-east goal labels E, not
    NE). Returns (path including both endpoints, cost in moves). Raises
    :class:`Unreachable` when the goal cannot be reached.
    """
    start = (int(start[0]), int(start[1]))
    if not grid.is_free(start):
        raise ValueError(f"start cell {start} is not free")
    goal = grid.goal

    def priority(g: int, cell: tuple[int, int]):
        h = chebyshev(cell, goal)
        d2 = (cell[0] - goal[0]) ** 2 + (cell[1] - goal[1]) ** 2
        return (g + h, h, d2, cell[0], cell[1])

    g_cost = {start: 0}
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    frontier = [priority(0, start)]
    closed = set()
    while frontier:
        _, _, _, r, c = heapq.heappop(frontier)
        cell = (r, c)
        if cell in closed:
            continue
        closed.add(cell)
        if cell == goal:
            path = [cell]
            while path[-1] != start:
                path.append(parent[path[-1]])
            path.reverse()
            return path, g_cost[goal]
        g_next = g_cost[cell] + 1
        for _, nxt in neighbors(grid, cell):
            if nxt in closed or g_next >= g_cost.get(nxt, np.inf):
                continue
            g_cost[nxt] = g_next
            parent[nxt] = cell
            heapq.heappush(frontier, priority(g_next, nxt))
    raise Unreachable(f"goal {goal} not reachable from {start}")


def dijkstra_field(grid: GridMap, source: tuple[int, int]) -> np.ndarray:
    """Minimum move counts from ``source`` to every cell (inf where unreachable).

    Moves are symmetric, so the field from the goal equals the distance to
    the goal from every cell. Kept free of heuristics: this is the oracle
    the A* search is checked against.
    """
    dist = np.full((grid.m, grid.n), np.inf)
    source = (int(source[0]), int(source[1]))
    if not grid.is_free(source):
        raise ValueError(f"source cell {source} is not free")
    dist[source] = 0.0
    frontier = [(0, source[0], source[1])]
    while frontier:
        d, r, c = heapq.heappop(frontier)
        if d > dist[r, c]:
            continue
        for _, (nr, nc) in neighbors(grid, (r, c)):
            nd = d + 1
            if nd < dist[nr, nc]:
                dist[nr, nc] = nd
                heapq.heappush(frontier, (nd, nr, nc))
    return dist


def label_sample(grid: GridMap, start: tuple[int, int]) -> PlanningSample:
    """Label a start cell with the first move of the A* shortest path."""
    path, length = astar_shortest(grid, start)
    first = path[1]
    delta = (first[0] - path[0][0], first[1] - path[0][1])
    action = ACTION_OFFSETS.index(delta)
    return PlanningSample(grid, start, action, length)


def tabular_vi(grid: GridMap, reward_map: np.ndarray, gamma: float,
               max_iters: int = 10_000, tol: float = 1e-9, *,
               transition: str = "grid", reward_on: str = "enter",
               terminal_goal: bool = True, return_history: bool = False):
    """Exact value iteration on the grid MDP, from a zero-initialized value grid.

    Each sweep applies V(s) <- max_a [R(s, a, s') + gamma * V(s')] until the
    largest change drops below ``tol`` or ``max_iters`` sweeps have run.

    transition:
        "grid"       blocked or out-of-bounds moves leave the agent in place
                     (the dynamics the datasets and rollouts use);
        "freespace"  moves always displace, obstacles are ignored, and cells
                     beyond the border contribute zero value and zero reward.
    reward_on:
        "enter"      R(s, a, s') = reward_map[s'];
        "source"     R(s, a, s') = reward_map[s].
    terminal_goal:
        the goal is absorbing: its value stays 0 and it is never updated
        (only meaningful for "grid" transitions).

    Returns the converged (m, n) value grid, or the list [V_1 .. V_K] of
    per-sweep grids when ``return_history`` is set. This is a deliberately
    plain loop implementation kept independent of the convolutional planners
    it serves as an oracle for.
    """
    if transition not in ("grid", "freespace"):
        raise ValueError(f"unknown transition model {transition!r}")
    if reward_on not in ("enter", "source"):
        raise ValueError(f"unknown reward convention {reward_on!r}")
    reward = np.asarray(reward_map, dtype=np.float64)
    if reward.shape != (grid.m, grid.n):
        raise ValueError(f"reward map shape {reward.shape} does not match grid {(grid.m, grid.n)}")

    value = np.zeros((grid.m, grid.n))
    history = []
    free = ~grid.obstacles
    for _ in range(max_iters):
        new = np.zeros_like(value)
        for r in range(grid.m):
            for c in range(grid.n):
                if transition == "grid":
                    if not free[r, c]:
                        continue
                    if terminal_goal and (r, c) == grid.goal:
                        continue
                best = -np.inf
                for dr, dc in ACTION_OFFSETS:
                    nr, nc = r + dr, c + dc
                    if transition == "grid":
                        if not (0 <= nr < grid.m and 0 <= nc < grid.n and free[nr, nc]):
                            nr, nc = r, c
                        succ_value = value[nr, nc]
                        rew = reward[nr, nc] if reward_on == "enter" else reward[r, c]
                    else:
                        inside = 0 <= nr < grid.m and 0 <= nc < grid.n
                        succ_value = value[nr, nc] if inside else 0.0
                        if reward_on == "enter":
                            rew = reward[nr, nc] if inside else 0.0
                        else:
                            rew = reward[r, c]
                    q = rew + gamma * succ_value
                    if q > best:
                        best = q
                new[r, c] = best
        delta = float(np.max(np.abs(new - value)))
        value = new
        if return_history:
            history.append(value.copy())
        if delta < tol:
            break
    return history if return_history else value


def greedy_action(grid: GridMap, value: np.ndarray, cell: tuple[int, int],
                  reward_map: np.ndarray, gamma: float,
                  reward_on: str = "enter") -> int:
    """Action maximizing R + gamma*V under grid dynamics; ties pick the lowest index."""
    best_action, best_q = 0, -np.inf
    for action in range(NUM_ACTIONS):
        nxt = step_cell(grid, cell, action)
        rew = reward_map[nxt] if reward_on == "enter" else reward_map[cell]
        q = rew + gamma * value[nxt]
        if q > best_q:
            best_q = q
            best_action = action
    return best_action
