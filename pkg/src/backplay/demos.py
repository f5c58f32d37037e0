"""Demonstration generation, qualification, and persistence.

A demonstration is a start-to-goal state sequence with its actions and a
recorded optimality gap N (steps beyond the shortest path). Optimal demos
come from A*; N-optimal demos from a noisy A* that follows the planner
with probability p and acts randomly otherwise, rejection-sampled until
the realized gap is exactly N.

Actions are stored even though the backward-curriculum sampler only needs
states; they feed the behavioral-cloning baseline from the same files.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import DemoGenerationError, DemoParseError, DemoValidationError
from .gridworld import (
    ACTION_DELTAS,
    MOVE_ORDER,
    Action,
    Cell,
    Maze,
    bfs_distances,
    reset_to,
    step,
)


@dataclass
class Demonstration:
    """State sequence s_0..s_T from start to goal, with actions and gap."""

    maze_id: int
    states: list[Cell]
    actions: list[int]
    optimal_len: int
    gap_n: int

    @property
    def length(self) -> int:
        return len(self.states) - 1

    def validate(self, maze: Maze) -> None:
        """Check every invariant against ``maze``; raise DemoValidationError."""
        if self.maze_id != maze.id:
            raise DemoValidationError("maze-id", f"demo is for maze {self.maze_id}, got {maze.id}")
        if len(self.actions) != len(self.states) - 1:
            raise DemoValidationError(
                "lengths", f"{len(self.states)} states need {len(self.states) - 1} actions, got {len(self.actions)}"
            )
        if self.states[0] != maze.start:
            raise DemoValidationError("start", f"first state {self.states[0]} is not the maze start")
        if self.states[-1] != maze.goal:
            raise DemoValidationError("goal", f"last state {self.states[-1]} is not the maze goal")
        # Replaying the actions must reproduce the recorded states exactly.
        state = reset_to(maze, self.states[0])
        horizon = len(self.actions) + 1
        for t, action in enumerate(self.actions):
            res = step(maze, state, action, horizon)
            if res.state.agent != self.states[t + 1]:
                raise DemoValidationError(
                    "transition", f"step {t}: action {action} leads to {res.state.agent}, recorded {self.states[t + 1]}"
                )
            state = res.state
        d_star = bfs_distances(maze)[maze.start]
        if self.optimal_len != d_star:
            raise DemoValidationError("optimal-len", f"stored {self.optimal_len}, shortest path is {d_star}")
        if self.gap_n != self.length - d_star:
            raise DemoValidationError("gap", f"stored gap {self.gap_n}, recomputed {self.length - d_star}")
        if self.gap_n < 0:
            raise DemoValidationError("gap", "negative optimality gap")


def _action_between(a: Cell, b: Cell) -> Action:
    for action in MOVE_ORDER:
        dr, dc = ACTION_DELTAS[action]
        if (a[0] + dr, a[1] + dc) == b:
            return action
    raise ValueError(f"{a} -> {b} is not a single move")


def astar_path(maze: Maze, src: Cell) -> list[Cell]:
    """A* from ``src`` to the goal with Manhattan heuristic.

    Tie-break: neighbors expand in Up, Down, Left, Right order and equal
    f-scores pop in insertion order, so the path is deterministic.
    """
    goal = maze.goal

    def h(cell: Cell) -> int:
        return abs(cell[0] - goal[0]) + abs(cell[1] - goal[1])

    counter = 0
    open_heap: list[tuple[int, int, Cell]] = [(h(src), counter, src)]
    came_from: dict[Cell, Cell] = {}
    g_score: dict[Cell, int] = {src: 0}
    closed: set[Cell] = set()
    while open_heap:
        _, _, cur = heapq.heappop(open_heap)
        if cur == goal:
            path = [cur]
            while cur in came_from:
                cur = came_from[cur]
                path.append(cur)
            return path[::-1]
        if cur in closed:
            continue
        closed.add(cur)
        for action in MOVE_ORDER:
            dr, dc = ACTION_DELTAS[action]
            nxt = (cur[0] + dr, cur[1] + dc)
            if not maze.passable(nxt) or nxt in closed:
                continue
            tentative = g_score[cur] + 1
            if tentative < g_score.get(nxt, 1 << 30):
                g_score[nxt] = tentative
                came_from[nxt] = cur
                counter += 1
                heapq.heappush(open_heap, (tentative + h(nxt), counter, nxt))
    raise DemoValidationError("reachability", f"goal unreachable from {src}")


def shortest_path(maze: Maze) -> Demonstration:
    """Optimal demonstration (gap 0) along the deterministic A* path."""
    states = astar_path(maze, maze.start)
    actions = [int(_action_between(a, b)) for a, b in zip(states, states[1:])]
    d_star = len(states) - 1
    return Demonstration(maze.id, states, actions, optimal_len=d_star, gap_n=0)


def default_follow_prob(target_gap: int, d_star: int) -> float:
    """Starting heuristic for the planner-follow probability.

    Exactness comes from the rejection loop, not from this value.
    """
    if target_gap == 0:
        return 1.0
    return float(np.clip(1.0 - target_gap / (4.0 * d_star), 0.5, 0.99))


def noisy_astar_demo(
    maze: Maze,
    target_gap: int,
    p: float | None,
    rng: np.random.Generator,
    max_attempts: int = 1000,
) -> Demonstration:
    """Demonstration exactly ``target_gap`` steps longer than the shortest path.

    Each attempt walks from the start taking the A* action with probability
    ``p`` (replanning after every deviation) and a uniform random action
    otherwise; attempts whose realized length is not exactly
    d* + target_gap are rejected. Raises DemoGenerationError after
    ``max_attempts`` rejections.
    """
    d_star = bfs_distances(maze)[maze.start]
    target_len = d_star + target_gap
    if p is None:
        p = default_follow_prob(target_gap, d_star)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"follow probability must be in (0, 1], got {p}")
    for _ in range(max_attempts):
        states = [maze.start]
        actions: list[int] = []
        plan = astar_path(maze, maze.start)
        plan_pos = 0
        while states[-1] != maze.goal and len(actions) < target_len:
            cur = states[-1]
            if rng.random() < p:
                action = _action_between(plan[plan_pos], plan[plan_pos + 1])
                nxt = plan[plan_pos + 1]
                plan_pos += 1
            else:
                action = Action(int(rng.integers(5)))
                dr, dc = ACTION_DELTAS[action]
                cand = (cur[0] + dr, cur[1] + dc)
                nxt = cand if maze.passable(cand) else cur
                plan = astar_path(maze, nxt)
                plan_pos = 0
            states.append(nxt)
            actions.append(int(action))
        if states[-1] == maze.goal and len(actions) == target_len:
            return Demonstration(maze.id, states, actions, optimal_len=d_star, gap_n=target_gap)
    raise DemoGenerationError(
        f"no length-{target_len} demo in {max_attempts} attempts (p={p:.3f}); adjust p"
    )


def demo_to_text(demo: Demonstration) -> str:
    lines = [f"DEMO v1 {demo.maze_id} {demo.length} {demo.optimal_len} {demo.gap_n}"]
    lines.extend(f"{r} {c}" for r, c in demo.states)
    lines.extend(str(a) for a in demo.actions)
    return "\n".join(lines) + "\n"


def demo_from_text(text: str, maze: Maze | None = None) -> Demonstration:
    """Parse a demo file; validates fully against ``maze`` when provided."""
    if not text.endswith("\n"):
        raise DemoParseError(max(1, text.count("\n") + 1), "missing trailing newline")
    lines = text.split("\n")[:-1]
    if not lines:
        raise DemoParseError(1, "empty file")
    header = lines[0].split(" ")
    if len(header) != 6 or header[0] != "DEMO" or header[1] != "v1":
        raise DemoParseError(1, f"bad header {lines[0]!r}")
    try:
        maze_id, length, optimal_len, gap_n = (int(x) for x in header[2:])
    except ValueError:
        raise DemoParseError(1, f"non-integer header field in {lines[0]!r}") from None
    expected = 1 + (length + 1) + length
    if len(lines) != expected:
        raise DemoParseError(len(lines), f"expected {expected} lines for T={length}, found {len(lines)}")
    states: list[Cell] = []
    for i in range(length + 1):
        parts = lines[1 + i].split(" ")
        if len(parts) != 2:
            raise DemoParseError(2 + i, f"bad state line {lines[1 + i]!r}")
        try:
            states.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise DemoParseError(2 + i, f"non-integer state {lines[1 + i]!r}") from None
    actions: list[int] = []
    for i in range(length):
        idx = length + 2 + i
        try:
            a = int(lines[idx])
        except ValueError:
            raise DemoParseError(idx + 1, f"non-integer action {lines[idx]!r}") from None
        if not 0 <= a <= 4:
            raise DemoParseError(idx + 1, f"action {a} outside 0..4")
        actions.append(a)
    demo = Demonstration(maze_id, states, actions, optimal_len, gap_n)
    if maze is not None:
        demo.validate(maze)
    return demo


def save_demo(path, demo: Demonstration) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(demo_to_text(demo))


def load_demo(path, maze: Maze | None = None) -> Demonstration:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return demo_from_text(fh.read(), maze)
