"""Deterministic grid-maze MDP with snapshot/restore.

The maze is a static rectangular grid of passages and walls with one start
and one goal cell. The agent moves in four directions or passes; moving
into a wall or off the grid leaves it in place. Every step costs -0.03 and
landing on (or staying at) the goal adds +1, ending the episode. Episodes
also end when ``steps_taken`` reaches ``max_steps``.

Maze and EnvState are immutable values and ``step``/``observe`` are pure
functions, so any number of rollout workers can share them without
coordination.
"""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property

import numpy as np

from .errors import InvalidCellError, InvalidStateError, MazeGenerationError, MazeParseError

Cell = tuple[int, int]

STEP_REWARD = -0.03
GOAL_REWARD = 1.0


class Action(IntEnum):
    PASS = 0
    UP = 1
    DOWN = 2
    LEFT = 3
    RIGHT = 4


# (row, col) deltas; rows grow downward.
ACTION_DELTAS: dict[Action, tuple[int, int]] = {
    Action.PASS: (0, 0),
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}

# Neighbor expansion order used by every deterministic tie-break in the
# package (BFS, A*, greedy descent).
MOVE_ORDER = (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT)


@dataclass(frozen=True)
class Maze:
    """Static maze description. ``id`` is a content hash, stable across runs."""

    width: int
    height: int
    walls: frozenset[Cell]
    start: Cell
    goal: Cell

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("maze dimensions must be positive")
        if self.start == self.goal:
            raise ValueError("start and goal must differ")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self.in_bounds(cell):
                raise ValueError(f"{name} cell {cell} out of bounds")
            if cell in self.walls:
                raise ValueError(f"{name} cell {cell} is a wall")
        for cell in self.walls:
            if not self.in_bounds(cell):
                raise ValueError(f"wall cell {cell} out of bounds")
        if bfs_distances(self)[self.start] < 0:
            raise ValueError("no passage path from start to goal")

    def in_bounds(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def passable(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls

    @cached_property
    def id(self) -> int:
        """64-bit content hash of (width, height, walls, start, goal)."""
        payload = "{}x{};S{},{};G{},{};W{}".format(
            self.width, self.height, self.start[0], self.start[1],
            self.goal[0], self.goal[1], sorted(self.walls),
        )
        digest = hashlib.sha256(payload.encode()).digest()
        return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class EnvState:
    """Snapshot of the environment: agent cell plus elapsed steps.

    The maze is static, so the agent cell fully determines the snapshot;
    restoring to a demonstration state starts a fresh episode with
    ``steps_taken = 0``.
    """

    agent: Cell
    steps_taken: int = 0


@dataclass(frozen=True)
class StepResult:
    state: EnvState
    reward: float
    done: bool
    reached_goal: bool


def reset_to(maze: Maze, cell: Cell) -> EnvState:
    """Restore the environment to ``cell`` with a full horizon remaining."""
    if not maze.passable(cell):
        raise InvalidCellError(f"cannot reset to {cell}: wall or out of bounds")
    return EnvState(agent=cell, steps_taken=0)


def step(maze: Maze, state: EnvState, action: Action | int, max_steps: int) -> StepResult:
    """Advance one step. Pure function of its inputs.

    Blocked moves (wall or boundary) leave the agent in place. The step
    penalty applies on every step including the goal-reaching one, so the
    terminal reward is net +0.97.
    """
    if not maze.passable(state.agent):
        raise InvalidStateError(f"agent cell {state.agent} is a wall or out of bounds")
    if state.steps_taken >= max_steps:
        raise InvalidStateError("episode already at the step limit")
    dr, dc = ACTION_DELTAS[Action(action)]
    target = (state.agent[0] + dr, state.agent[1] + dc)
    nxt = target if maze.passable(target) else state.agent
    steps = state.steps_taken + 1
    reached = nxt == maze.goal
    reward = STEP_REWARD + (GOAL_REWARD if reached else 0.0)
    done = reached or steps >= max_steps
    return StepResult(EnvState(nxt, steps), reward, done, reached)


def observation_static(maze: Maze) -> np.ndarray:
    """The three agent-independent planes (goal, passages, walls), flattened."""
    hw = maze.height * maze.width
    goal_plane = np.zeros(hw)
    goal_plane[maze.goal[0] * maze.width + maze.goal[1]] = 1.0
    walls_plane = np.zeros(hw)
    for r, c in maze.walls:
        walls_plane[r * maze.width + c] = 1.0
    return np.concatenate([goal_plane, 1.0 - walls_plane, walls_plane])


def observe(maze: Maze, state: EnvState, static: np.ndarray | None = None) -> np.ndarray:
    """Four binary planes (agent, goal, passages, walls) in row-major plane order.

    ``static`` may be a cached ``observation_static(maze)`` result; it is
    recomputed when omitted.
    """
    if not maze.passable(state.agent):
        raise InvalidStateError(f"agent cell {state.agent} is a wall or out of bounds")
    hw = maze.height * maze.width
    agent_plane = np.zeros(hw)
    agent_plane[state.agent[0] * maze.width + state.agent[1]] = 1.0
    if static is None:
        static = observation_static(maze)
    return np.concatenate([agent_plane, static])


def observation_dim(maze: Maze) -> int:
    return 4 * maze.height * maze.width


def bfs_distances(maze: Maze) -> dict[Cell, int]:
    """Shortest-path distance from every reachable cell to the goal.

    Unreachable cells report -1 via the returned mapping's default lookup:
    use ``dist.get(cell, -1)`` or index a Maze cell directly with
    ``dist[cell]`` for cells known to be reachable.
    """
    dist: dict[Cell, int] = {maze.goal: 0}
    queue = deque([maze.goal])
    while queue:
        cur = queue.popleft()
        d = dist[cur]
        for action in MOVE_ORDER:
            dr, dc = ACTION_DELTAS[action]
            nxt = (cur[0] + dr, cur[1] + dc)
            if maze.passable(nxt) and nxt not in dist:
                dist[nxt] = d + 1
                queue.append(nxt)

    class _Dist(dict):
        def __missing__(self, key):
            return -1

    return _Dist(dist)


def shortest_len(maze: Maze) -> int:
    """BFS shortest-path length from start to goal."""
    return bfs_distances(maze)[maze.start]


@dataclass(frozen=True)
class MazeConfig:
    width: int = 12
    height: int = 12
    wall_count: int = 30
    min_path_len: int = 10


DESK_MAZE = MazeConfig(12, 12, 30, 10)
PAPER_MAZE = MazeConfig(24, 24, 120, 35)

_MAX_REJECTIONS = 10_000


def generate_maze(rng: np.random.Generator, cfg: MazeConfig) -> Maze:
    """Sample a maze: uniform walls without replacement, rejecting layouts
    whose start-to-goal distance is missing or below ``min_path_len``.

    Deterministic given the generator state. Raises MazeGenerationError
    after 10,000 consecutive rejections.
    """
    n_cells = cfg.width * cfg.height
    if cfg.wall_count >= n_cells - 2:
        raise MazeGenerationError(f"wall_count {cfg.wall_count} leaves no room for start and goal")
    if cfg.min_path_len < 1:
        raise MazeGenerationError("min_path_len must be >= 1")
    cells = [(r, c) for r in range(cfg.height) for c in range(cfg.width)]
    for _ in range(_MAX_REJECTIONS):
        picks = rng.choice(n_cells, size=2, replace=False)
        start, goal = cells[picks[0]], cells[picks[1]]
        remaining = [cell for cell in cells if cell != start and cell != goal]
        wall_idx = rng.choice(len(remaining), size=cfg.wall_count, replace=False)
        walls = frozenset(remaining[i] for i in wall_idx)
        try:
            maze = Maze(cfg.width, cfg.height, walls, start, goal)
        except ValueError:
            continue
        if shortest_len(maze) >= cfg.min_path_len:
            return maze
    raise MazeGenerationError(
        f"no valid maze after {_MAX_REJECTIONS} rejections for {cfg}"
    )


def maze_to_text(maze: Maze) -> str:
    """Serialize to the text format; inverse of maze_from_text, byte-exact."""
    rows = []
    for r in range(maze.height):
        row = []
        for c in range(maze.width):
            cell = (r, c)
            if cell == maze.start:
                row.append("S")
            elif cell == maze.goal:
                row.append("G")
            elif cell in maze.walls:
                row.append("#")
            else:
                row.append(".")
        rows.append("".join(row))
    return f"MAZE v1 {maze.width} {maze.height}\n" + "\n".join(rows) + "\n"


def maze_from_text(text: str) -> Maze:
    """Parse the text format, validating every maze invariant."""
    if not text.endswith("\n"):
        raise MazeParseError(max(1, text.count("\n") + 1), "missing trailing newline")
    lines = text.split("\n")[:-1]
    if not lines:
        raise MazeParseError(1, "empty file")
    header = lines[0].split(" ")
    if len(header) != 4 or header[0] != "MAZE" or header[1] != "v1":
        raise MazeParseError(1, f"bad header {lines[0]!r}")
    try:
        width, height = int(header[2]), int(header[3])
    except ValueError:
        raise MazeParseError(1, f"non-integer dimensions in {lines[0]!r}") from None
    if len(lines) - 1 != height:
        raise MazeParseError(len(lines), f"expected {height} grid rows, found {len(lines) - 1}")
    walls: set[Cell] = set()
    start = goal = None
    for r in range(height):
        row = lines[1 + r]
        if len(row) != width:
            raise MazeParseError(2 + r, f"row has {len(row)} characters, expected {width}")
        for c, ch in enumerate(row):
            if ch == "#":
                walls.add((r, c))
            elif ch == "S":
                if start is not None:
                    raise MazeParseError(2 + r, "duplicate start cell")
                start = (r, c)
            elif ch == "G":
                if goal is not None:
                    raise MazeParseError(2 + r, "duplicate goal cell")
                goal = (r, c)
            elif ch != ".":
                raise MazeParseError(2 + r, f"illegal character {ch!r}")
    if start is None:
        raise MazeParseError(len(lines), "no start cell")
    if goal is None:
        raise MazeParseError(len(lines), "no goal cell")
    try:
        return Maze(width, height, frozenset(walls), start, goal)
    except ValueError as exc:
        raise MazeParseError(len(lines), str(exc)) from None


def save_maze(path, maze: Maze) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(maze_to_text(maze))


def load_maze(path) -> Maze:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return maze_from_text(fh.read())
