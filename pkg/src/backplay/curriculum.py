"""Start-state selection strategies.

The backward-curriculum sampler draws an offset N from a scheduled window
and starts the episode N steps from the demonstration's end, clamping to
the demonstration's initial state when N exceeds its length. The terminal
schedule entry means "initial state only". Uniform draws an offset over
the whole demonstration; Standard always uses the maze start; the
reverse-curriculum baseline grows a start pool by random walks from the
goal, filtered by a success-rate band.

Samplers are immutable per epoch; rollout workers draw from their own rng
streams. Pool updates are single-writer operations between epochs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .demos import Demonstration
from .errors import ConfigError, EmptyPoolError
from .gridworld import Action, Cell, Maze, step, reset_to

log = logging.getLogger(__name__)

Window = tuple[int, int]

# Offsets-from-end windows keyed by the epoch they activate at; the final
# row is the terminal "initial state only" marker.
PAPER_SCHEDULE_ROWS = [
    (0, (0, 4)),
    (350, (4, 8)),
    (700, (8, 16)),
    (1050, (16, 32)),
    (1400, (32, 64)),
    (1750, None),
]


@dataclass(frozen=True)
class WindowSchedule:
    """Ordered (epoch_start, window) entries; ``None`` window = terminal."""

    entries: tuple[tuple[int, Window | None], ...]

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("schedule needs at least one entry")
        if self.entries[0][0] != 0:
            raise ConfigError("first schedule entry must start at epoch 0")
        epochs = [e for e, _ in self.entries]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError("schedule epochs must be strictly increasing")
        for epoch, window in self.entries[:-1]:
            if window is None:
                raise ConfigError(f"terminal entry at epoch {epoch} must be last")
        for epoch, window in self.entries:
            if window is not None:
                j, k = window
                if not (0 <= j < k):
                    raise ConfigError(f"window [{j}, {k}) at epoch {epoch} is not a valid interval")
        if self.entries[-1][1] is not None:
            raise ConfigError("schedule must end with a terminal entry")

    @property
    def terminal_epoch(self) -> int:
        return self.entries[-1][0]

    def scaled(self, divisor: int) -> "WindowSchedule":
        """Same windows with epoch starts divided by ``divisor``."""
        return WindowSchedule(tuple((e // divisor, w) for e, w in self.entries))


PAPER_SCHEDULE = WindowSchedule(tuple(PAPER_SCHEDULE_ROWS))
DESK_SCHEDULE = PAPER_SCHEDULE.scaled(10)


def active_window(schedule: WindowSchedule, epoch: int) -> Window | None:
    """Window of the last entry with epoch_start <= epoch; None = terminal."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    current = schedule.entries[0][1]
    for epoch_start, window in schedule.entries:
        if epoch_start > epoch:
            break
        current = window
    return current


def schedule_from_config(rows: list[dict]) -> WindowSchedule:
    """Build a schedule from config rows: {epoch, j, k} or {epoch, terminal: true}."""
    entries: list[tuple[int, Window | None]] = []
    for i, row in enumerate(rows):
        if not isinstance(row, dict) or "epoch" not in row:
            raise ConfigError(f"schedule row {i}: expected a mapping with an 'epoch' key, got {row!r}")
        epoch = int(row["epoch"])
        if row.get("terminal"):
            entries.append((epoch, None))
        elif "j" in row and "k" in row:
            entries.append((epoch, (int(row["j"]), int(row["k"]))))
        else:
            raise ConfigError(f"schedule row {i}: needs j and k, or terminal: true")
    return WindowSchedule(tuple(entries))


def schedule_to_config(schedule: WindowSchedule) -> list[dict]:
    rows = []
    for epoch, window in schedule.entries:
        if window is None:
            rows.append({"epoch": epoch, "terminal": True})
        else:
            rows.append({"epoch": epoch, "j": window[0], "k": window[1]})
    return rows


def _demo_index(demos) -> dict[int, Demonstration]:
    if isinstance(demos, Demonstration):
        demos = [demos]
    return {d.maze_id: d for d in demos}


class StandardSampler:
    """Always the maze's true initial state."""

    def sample_start(self, maze: Maze, epoch: int, rng: np.random.Generator) -> Cell:
        return maze.start


class BackplaySampler:
    """Scheduled backward window over one demonstration per maze."""

    def __init__(self, schedule: WindowSchedule, demos):
        self.schedule = schedule
        self.demos = _demo_index(demos)

    def _demo_for(self, maze: Maze) -> Demonstration:
        demo = self.demos.get(maze.id)
        if demo is None:
            raise ConfigError(f"no demonstration for maze {maze.id}")
        return demo

    def sample_start(self, maze: Maze, epoch: int, rng: np.random.Generator) -> Cell:
        demo = self._demo_for(maze)
        window = active_window(self.schedule, epoch)
        if window is None:
            return maze.start
        j, k = window
        offset = int(rng.integers(j, k))
        return demo.states[max(demo.length - offset, 0)]


class UniformSampler:
    """Offset uniform over the whole demonstration, initial state included."""

    def __init__(self, demos):
        self.demos = _demo_index(demos)

    def sample_start(self, maze: Maze, epoch: int, rng: np.random.Generator) -> Cell:
        demo = self.demos.get(maze.id)
        if demo is None:
            raise ConfigError(f"no demonstration for maze {maze.id}")
        offset = int(rng.integers(0, demo.length + 1))
        return demo.states[demo.length - offset]


@dataclass(frozen=True)
class RcgParams:
    brownian_steps: int = 50
    n_new: int = 200
    n_old: int = 100
    return_band: tuple[float, float] = (0.1, 0.9)
    pool_cap: int = 10_000
    eval_episodes: int = 8


@dataclass(frozen=True)
class RcgPool:
    """Bounded new/old start pools for reverse curriculum generation."""

    params: RcgParams = field(default_factory=RcgParams)
    new_starts: tuple[Cell, ...] = ()
    old_starts: tuple[Cell, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.new_starts and not self.old_starts


def _brownian_walk(maze: Maze, origin: Cell, steps: int, rng: np.random.Generator) -> list[Cell]:
    """Uniform-random-action walk; the goal is not absorbing here."""
    visited = []
    cell = origin
    for _ in range(steps):
        action = Action(int(rng.integers(5)))
        res = step(maze, reset_to(maze, cell), action, max_steps=1)
        cell = res.state.agent
        visited.append(cell)
    return visited


def rcg_update_pool(
    pool: RcgPool,
    maze: Maze,
    policy,
    rng: np.random.Generator,
    max_steps: int = 100,
) -> RcgPool:
    """Grow the pool by Brownian walks and filter by policy success rate.

    ``policy`` is a callable (maze, cell, rng) -> action, sampled
    stochastically so the per-candidate success estimate over
    ``eval_episodes`` episodes can land strictly inside the return band.
    Candidates succeed/fail by reaching the goal within ``max_steps``.
    An empty filtered set leaves the pool unchanged.
    """
    p = pool.params
    seeds = list(pool.new_starts) if pool.new_starts else [maze.goal]
    candidates: list[Cell] = []
    seen: set[Cell] = set()
    n_walks = max(2, p.n_new // max(1, p.brownian_steps))
    for _ in range(n_walks):
        origin = seeds[int(rng.integers(len(seeds)))]
        for cell in _brownian_walk(maze, origin, p.brownian_steps, rng):
            if cell not in seen and cell != maze.goal:
                seen.add(cell)
                candidates.append(cell)
    # Cap the per-update evaluation cost; each candidate costs eval_episodes
    # full rollouts under the current policy.
    max_candidates = 64
    if len(candidates) > max_candidates:
        idx = rng.choice(len(candidates), size=max_candidates, replace=False)
        candidates = [candidates[i] for i in sorted(idx)]
    lo, hi = p.return_band
    kept: list[Cell] = []
    for cell in candidates:
        wins = 0
        for _ in range(p.eval_episodes):
            state = reset_to(maze, cell)
            for _ in range(max_steps):
                res = step(maze, state, policy(maze, state.agent, rng), max_steps)
                state = res.state
                if res.done:
                    wins += res.reached_goal
                    break
        rate = wins / p.eval_episodes
        if lo <= rate <= hi:
            kept.append(cell)
    if not kept:
        log.info("rcg_update_pool: no candidate inside band %.2f..%.2f, pool unchanged", lo, hi)
        return pool
    old = (tuple(pool.new_starts) + tuple(pool.old_starts))[: p.pool_cap]
    return replace(pool, new_starts=tuple(kept[: p.pool_cap]), old_starts=old)


class ReverseCurriculumSampler:
    """Samples starts from an RcgPool; switches to the true initial state
    after ``start_epoch`` (aligned with the backward schedule's terminal)."""

    def __init__(self, pools: dict[int, RcgPool], start_epoch: int | None = None):
        self.pools = pools
        self.start_epoch = start_epoch

    def sample_start(self, maze: Maze, epoch: int, rng: np.random.Generator) -> Cell:
        if self.start_epoch is not None and epoch >= self.start_epoch:
            return maze.start
        pool = self.pools.get(maze.id)
        if pool is None or pool.empty:
            raise EmptyPoolError(f"reverse-curriculum pool for maze {maze.id} not yet expanded")
        p = pool.params
        weight_new = p.n_new / (p.n_new + p.n_old)
        use_new = pool.new_starts and (not pool.old_starts or rng.random() < weight_new)
        source = pool.new_starts if use_new else pool.old_starts
        return source[int(rng.integers(len(source)))]


StartStateSampler = StandardSampler | BackplaySampler | UniformSampler | ReverseCurriculumSampler
