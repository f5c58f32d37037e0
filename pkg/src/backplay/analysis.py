"""Distance-projected birth-death chains and sample-complexity simulation.

A skip-free chain on levels 0..M (level 0 absorbing) moves down one level
with probability alpha_l, stays with beta_l, and moves up with the
remainder; at the top level the away-mass folds into the stay
probability. Expected absorption times come two independent ways — a
tridiagonal linear solve and the sum of reciprocal one-minus-eigenvalues
of the sub-stochastic block — and Monte-Carlo strategy simulators count
the trials each training regime needs to propagate a learning signal
across the chain.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass

import numpy as np

from .gridworld import Action, Cell, Maze, bfs_distances, reset_to, step

_TOL = 1e-12


@dataclass(frozen=True)
class BirthDeathChain:
    """Per-level probabilities for levels 1..M (index l-1 holds level l)."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.float64))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))
        if self.alpha.ndim != 1 or self.alpha.shape != self.beta.shape or self.alpha.size == 0:
            raise ValueError("alpha and beta must be equal-length non-empty vectors")
        if np.any(self.alpha <= 0.0) or np.any(self.alpha > 1.0 + _TOL):
            raise ValueError("toward-goal probabilities must lie in (0, 1]")
        if np.any(self.beta < -_TOL):
            raise ValueError("stay probabilities must be non-negative")
        if np.any(self.alpha + self.beta > 1.0 + _TOL):
            raise ValueError("alpha_l + beta_l must not exceed 1")

    @property
    def M(self) -> int:
        return self.alpha.size

    def effective_probs(self):
        """(down, stay, up) with the top level's away-mass folded into stay."""
        down = self.alpha.copy()
        up = 1.0 - self.alpha - self.beta
        stay = self.beta.copy()
        stay[-1] += up[-1]
        up[-1] = 0.0
        return down, np.clip(stay, 0.0, 1.0), np.clip(up, 0.0, 1.0)


def constant_chain(M: int, alpha: float, beta: float = 0.0) -> BirthDeathChain:
    return BirthDeathChain(np.full(M, alpha), np.full(M, beta))


def random_chain(rng: np.random.Generator, M: int) -> BirthDeathChain:
    """Random valid chain for property tests (alpha bounded away from 0)."""
    alpha = rng.uniform(0.05, 1.0, size=M)
    beta = rng.uniform(0.0, 1.0, size=M) * (1.0 - alpha)
    return BirthDeathChain(alpha, beta)


def transition_matrix(chain: BirthDeathChain) -> np.ndarray:
    """Row-stochastic (M+1)x(M+1) matrix with absorbing level 0."""
    M = chain.M
    down, stay, up = chain.effective_probs()
    P = np.zeros((M + 1, M + 1))
    P[0, 0] = 1.0
    for l in range(1, M + 1):
        P[l, l - 1] = down[l - 1]
        P[l, l] = stay[l - 1]
        if l < M:
            P[l, l + 1] = up[l - 1]
    return P


def substochastic_block(chain: BirthDeathChain) -> np.ndarray:
    """Transient block (levels 1..M); its spectrum is the non-unit spectrum."""
    return transition_matrix(chain)[1:, 1:]


def first_passage_linear(chain: BirthDeathChain, from_level: int) -> float:
    """Expected steps to absorb from ``from_level`` by tridiagonal solve.

    Solves E_l = 1 + alpha_l E_{l-1} + beta_l E_l + up_l E_{l+1} with
    E_0 = 0 and the reflecting adjustment at l = M, via the Thomas
    algorithm. This is the exact reference implementation the spectral
    route is checked against.
    """
    M = chain.M
    if not 0 <= from_level <= M:
        raise ValueError(f"from_level must be in 0..{M}")
    if from_level == 0:
        return 0.0
    down, stay, up = chain.effective_probs()
    # Row l (1-based): -down_l E_{l-1} + (1-stay_l) E_l - up_l E_{l+1} = 1
    diag = 1.0 - stay
    lower = -down[1:]   # coefficient of E_{l-1} for l = 2..M
    upper = -up[:-1]    # coefficient of E_{l+1} for l = 1..M-1
    rhs = np.ones(M)
    # Forward sweep (E_0 = 0 drops the first lower term).
    c_prime = np.zeros(M - 1) if M > 1 else np.zeros(0)
    d_prime = np.zeros(M)
    denom = diag[0]
    if abs(denom) < _TOL:
        raise np.linalg.LinAlgError("singular tridiagonal system")
    if M > 1:
        c_prime[0] = upper[0] / denom
    d_prime[0] = rhs[0] / denom
    for i in range(1, M):
        denom = diag[i] - lower[i - 1] * c_prime[i - 1]
        if abs(denom) < _TOL:
            raise np.linalg.LinAlgError("singular tridiagonal system")
        if i < M - 1:
            c_prime[i] = upper[i] / denom
        d_prime[i] = (rhs[i] - lower[i - 1] * d_prime[i - 1]) / denom
    expected = np.zeros(M)
    expected[M - 1] = d_prime[M - 1]
    for i in range(M - 2, -1, -1):
        expected[i] = d_prime[i] - c_prime[i] * expected[i + 1]
    return float(expected[from_level - 1])


def first_passage_spectral(chain: BirthDeathChain) -> float:
    """Expected absorption time from level M as sum of 1/(1 - lambda_j)
    over the non-unit eigenvalues of the transition matrix."""
    eigs = np.linalg.eigvals(substochastic_block(chain))
    total = np.sum(1.0 / (1.0 - eigs))
    if abs(total.imag) > 1e-9:
        raise ArithmeticError(f"imaginary residue {total.imag} in spectral sum")
    return float(total.real)


def spectral_gap(chain: BirthDeathChain) -> float:
    """1 minus the largest non-unit eigenvalue magnitude."""
    eigs = np.linalg.eigvals(substochastic_block(chain))
    return float(1.0 - np.abs(eigs).max())


def complexity_rates(M: int, m: int, alpha: float) -> dict[str, float]:
    """Closed-form rates: the exact backward-curriculum expression inside
    the O(.), the exponential standard-regime witness, and the uniform
    regime's rate at the starting state."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if not 1 <= m <= M:
        raise ValueError(f"step size m must be in 1..{M}")
    backplay = M**2 * (1.0 - alpha ** (m + 1)) / (m * (1.0 - alpha)) * alpha ** (-m)
    standard = M * alpha ** (-M / 2.0)
    uniform = M**3 / alpha
    return {
        "backplay_rate": float(backplay),
        "standard_rate": float(standard),
        "uniform_rate": float(uniform),
    }


@dataclass(frozen=True)
class Strategy:
    """Start-level strategy: 'standard', 'uniform', or 'backplay' with step m."""

    kind: str
    m: int = 1

    def __post_init__(self):
        if self.kind not in ("standard", "uniform", "backplay"):
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.m < 1:
            raise ValueError("step size m must be >= 1")

    @property
    def label(self) -> str:
        return f"backplay:{self.m}" if self.kind == "backplay" else self.kind


def parse_strategy(text: str) -> Strategy:
    if ":" in text:
        kind, m = text.split(":", 1)
        return Strategy(kind, int(m))
    return Strategy(text)


@dataclass
class ComplexityRecord:
    M: int
    m: int
    strategy: str
    alpha: float
    predicted_rate: float
    mean_trials: float
    std_trials: float
    n_runs: int
    censored: int


def _run_trial(
    down: np.ndarray,
    stay: np.ndarray,
    start: int,
    conquered: frozenset[int],
    cap: int,
    rng: np.random.Generator,
) -> bool:
    """One bounded episode; success = hitting any conquered (absorbing) level."""
    level = start
    if level in conquered:
        return True
    for _ in range(cap):
        u = rng.random()
        if u < down[level - 1]:
            level -= 1
        elif u >= down[level - 1] + stay[level - 1]:
            level += 1
        if level in conquered:
            return True
    return False


def simulate_strategy(
    chain: BirthDeathChain,
    strategy: Strategy,
    rng: np.random.Generator,
    n_runs: int = 200,
    trial_cap: int | None = None,
    max_trials: int = 1_000_000,
) -> ComplexityRecord:
    """Count trials until the start state carries a learning signal.

    standard: trials from level M until one reaches the absorbing set {0}.
    uniform: trials start uniform over 1..M; a successful trial merges its
      origin into the absorbing set; stops when a trial initiated at M
      succeeds with every level 1..M-1 previously merged.
    backplay(m): stages at levels m, 2m, ..., M; each stage counts trials
      from its level until one reaches the absorbing set, then merges the
      stage level; total is the sum over stages.

    A trial is an episode of at most ``trial_cap`` steps (default: the
    chain length M). Runs whose trial count hits ``max_trials`` are
    recorded as censored at that value.
    """
    M = chain.M
    if strategy.kind == "backplay" and strategy.m > M:
        raise ValueError(f"step size {strategy.m} exceeds chain length {M}")
    down, stay, _ = chain.effective_probs()
    cap = trial_cap if trial_cap is not None else M
    alpha_nominal = float(chain.alpha[0]) if np.allclose(chain.alpha, chain.alpha[0]) else float("nan")
    totals = np.zeros(n_runs)
    censored = 0
    for run in range(n_runs):
        run_rng = np.random.default_rng(rng.integers(2**63))
        trials = 0
        hit_cap = False
        if strategy.kind == "standard":
            conquered = frozenset([0])
            while trials < max_trials:
                trials += 1
                if _run_trial(down, stay, M, conquered, cap, run_rng):
                    break
            else:
                hit_cap = True
        elif strategy.kind == "backplay":
            conquered = {0}
            stages = list(range(strategy.m, M + 1, strategy.m))
            if stages[-1] != M:
                stages.append(M)
            for stage in stages:
                while trials < max_trials:
                    trials += 1
                    if _run_trial(down, stay, stage, frozenset(conquered), cap, run_rng):
                        conquered.add(stage)
                        break
                else:
                    hit_cap = True
                if hit_cap:
                    break
        else:  # uniform
            conquered = {0}
            while trials < max_trials:
                trials += 1
                origin = int(run_rng.integers(1, M + 1))
                prerequisites = all(l in conquered for l in range(1, M))
                if _run_trial(down, stay, origin, frozenset(conquered), cap, run_rng):
                    conquered.add(origin)
                    if origin == M and prerequisites:
                        break
            else:
                hit_cap = True
        totals[run] = trials
        censored += hit_cap
    if strategy.kind == "backplay":
        predicted = complexity_rates(M, strategy.m, alpha_nominal)["backplay_rate"] if np.isfinite(alpha_nominal) else float("nan")
    elif strategy.kind == "standard":
        predicted = complexity_rates(M, 1, alpha_nominal)["standard_rate"] if np.isfinite(alpha_nominal) else float("nan")
    else:
        predicted = complexity_rates(M, 1, alpha_nominal)["uniform_rate"] if np.isfinite(alpha_nominal) else float("nan")
    return ComplexityRecord(
        M=M,
        m=strategy.m if strategy.kind == "backplay" else 0,
        strategy=strategy.label,
        alpha=alpha_nominal,
        predicted_rate=predicted,
        mean_trials=float(totals.mean()),
        std_trials=float(totals.std()),
        n_runs=n_runs,
        censored=censored,
    )


def run_sweep(
    Ms: list[int],
    alpha: float,
    strategies: list[Strategy],
    n_runs: int,
    seed: int,
    trial_cap: int | None = None,
) -> list[ComplexityRecord]:
    """Simulate every (M, strategy) pair with derived seeds, merged in
    deterministic (M, strategy) order."""
    records = []
    for M in sorted(Ms):
        chain = constant_chain(M, alpha)
        for strat in strategies:
            rng = np.random.default_rng(np.random.SeedSequence([seed, M, zlib.crc32(strat.label.encode())]))
            records.append(simulate_strategy(chain, strat, rng, n_runs=n_runs, trial_cap=trial_cap))
    return records


SWEEP_COLUMNS = ["M", "m", "strategy", "alpha", "predicted_rate", "mean_trials", "std_trials", "n_runs", "censored"]


def sweep_to_csv(records: list[ComplexityRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for r in records:
            writer.writerow([
                r.M, r.m, r.strategy, f"{r.alpha:.6g}", f"{r.predicted_rate:.6g}",
                f"{r.mean_trials:.6g}", f"{r.std_trials:.6g}", r.n_runs, r.censored,
            ])


def sweep_from_csv(path) -> list[ComplexityRecord]:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(ComplexityRecord(
                M=int(row["M"]), m=int(row["m"]), strategy=row["strategy"],
                alpha=float(row["alpha"]), predicted_rate=float(row["predicted_rate"]),
                mean_trials=float(row["mean_trials"]), std_trials=float(row["std_trials"]),
                n_runs=int(row["n_runs"]), censored=int(row["censored"]),
            ))
    return records


# -- chain estimation from maze rollouts --------------------------------------


def uniform_random_policy(maze: Maze, cell: Cell, rng: np.random.Generator) -> int:
    return int(rng.integers(5))


def bfs_descent_policy(maze: Maze):
    """Deterministic optimal policy: first move (fixed order) that lowers
    the BFS distance to goal."""
    dist = bfs_distances(maze)
    from .gridworld import ACTION_DELTAS, MOVE_ORDER

    def policy(m: Maze, cell: Cell, rng: np.random.Generator) -> int:
        d = dist[cell]
        for action in MOVE_ORDER:
            dr, dc = ACTION_DELTAS[action]
            nxt = (cell[0] + dr, cell[1] + dc)
            if m.passable(nxt) and dist[nxt] == d - 1:
                return int(action)
        return int(Action.PASS)

    return policy


def net_policy(net, stochastic: bool = True):
    """Adapter from a PolicyValueNet to the (maze, cell, rng) -> action shape."""
    from .gridworld import observation_static, observe
    from .nets import log_softmax as _ls

    statics: dict[int, np.ndarray] = {}

    def policy(maze: Maze, cell: Cell, rng: np.random.Generator) -> int:
        static = statics.get(maze.id)
        if static is None:
            static = observation_static(maze)
            statics[maze.id] = static
        logits, _ = net.policy_value(observe(maze, reset_to(maze, cell), static))
        if not stochastic:
            return int(logits[0].argmax())
        probs = np.exp(_ls(logits))[0]
        u = rng.random()
        return min(int(np.searchsorted(np.cumsum(probs), u)), len(probs) - 1)

    return policy


def estimate_chain(
    maze: Maze,
    policy,
    episodes: int,
    rng: np.random.Generator,
    rollout_cap: int | None = None,
) -> BirthDeathChain:
    """Empirical distance-transition chain under ``policy``.

    M is the largest goal distance among reachable cells. Each episode
    restarts at a uniformly random reachable cell (a quasi-stationary
    surrogate for the occupancy measure) and runs until absorption or
    ``rollout_cap`` steps. Counts are Laplace-smoothed with pseudocount 1
    on each of the three outcomes, so every alpha_l is positive.
    """
    dist = bfs_distances(maze)
    cells = [
        (r, c)
        for r in range(maze.height)
        for c in range(maze.width)
        if maze.passable((r, c)) and dist[(r, c)] >= 0
    ]
    M = max(dist[cell] for cell in cells)
    cap = rollout_cap if rollout_cap is not None else max(4 * M, 16)
    counts = np.zeros((M + 1, 3))  # rows: level; cols: down, stay, up
    for _ in range(episodes):
        cell = cells[int(rng.integers(len(cells)))]
        for _ in range(cap):
            if cell == maze.goal:
                break
            level = dist[cell]
            res = step(maze, reset_to(maze, cell), policy(maze, cell, rng), max_steps=1)
            nxt = res.state.agent
            counts[level, dist[nxt] - level + 1] += 1
            cell = nxt
    smoothed = counts[1:] + 1.0
    totals = smoothed.sum(axis=1)
    return BirthDeathChain(alpha=smoothed[:, 0] / totals, beta=smoothed[:, 1] / totals)
