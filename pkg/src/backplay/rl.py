"""PPO trainer over any start-state sampler, plus the evaluation metrics.

Rollouts come from ``cfg.workers`` lockstep episode streams, each owning
its own rng stream derived from (seed, epoch, worker), so collection is
bit-reproducible regardless of how the streams are scheduled. The learner
is a single writer: parameters only change inside ``ppo_update`` between
collection phases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDivergedError
from .gridworld import Maze, bfs_distances, observation_static, observe, reset_to, step
from .nets import Adam, PolicyValueNet, log_softmax, softmax


@dataclass
class PPOConfig:
    gamma: float = 0.99
    learning_rate: float = 1e-3
    clip: float = 0.2
    gae_tau: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    ppo_epochs: int = 4
    workers: int = 8
    horizon: int = 0  # 0 = ceil(batch_size / workers)
    batch_size: int = 1024
    minibatch_size: int = 256

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not 0.0 <= self.gae_tau <= 1.0:
            raise ValueError("gae_tau must be in [0, 1]")
        if self.batch_size % self.minibatch_size != 0:
            raise ValueError("minibatch_size must divide batch_size")
        if self.horizon == 0:
            self.horizon = math.ceil(self.batch_size / self.workers)
        if self.workers * self.horizon < self.batch_size:
            raise ValueError("workers * horizon must cover batch_size")


@dataclass
class RolloutBatch:
    """Per-timestep arrays in (horizon, workers) layout.

    ``advantages``/``returns`` stay None until compute_gae fills them.
    ``bootstrap`` holds V(s_T) per worker for segments truncated mid-episode
    (zero where the last transition was terminal).
    """

    obs: np.ndarray        # (T, W, D)
    actions: np.ndarray    # (T, W) int
    logp: np.ndarray       # (T, W) behavior-time log-probs
    rewards: np.ndarray    # (T, W)
    values: np.ndarray     # (T, W)
    dones: np.ndarray      # (T, W) bool
    bootstrap: np.ndarray  # (W,)
    batch_size: int
    episode_starts: list = field(default_factory=list)  # (maze_idx, cell) per started episode
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape(arr.shape[0] * arr.shape[1], *arr.shape[2:])[: self.batch_size]


def _sample_from_probs(probs: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    return min(int(np.searchsorted(np.cumsum(probs), u)), len(probs) - 1)


class _WorkerEnv:
    """One episode stream: maze choice, start sampling, incremental obs row."""

    def __init__(self, mazes, statics, sampler, epoch, rng, max_steps):
        self.mazes = mazes
        self.statics = statics
        self.sampler = sampler
        self.epoch = epoch
        self.rng = rng
        self.max_steps = max_steps
        self.obs_row = np.empty(0)
        self.starts: list[tuple[int, tuple[int, int]]] = []
        self.reset()

    def reset(self):
        self.maze_idx = int(self.rng.integers(len(self.mazes)))
        maze = self.mazes[self.maze_idx]
        cell = self.sampler.sample_start(maze, self.epoch, self.rng)
        self.state = reset_to(maze, cell)
        self.starts.append((self.maze_idx, cell))
        hw = maze.height * maze.width
        row = np.zeros(4 * hw)
        row[cell[0] * maze.width + cell[1]] = 1.0
        row[hw:] = self.statics[self.maze_idx]
        self.obs_row = row

    def step(self, action: int):
        maze = self.mazes[self.maze_idx]
        res = step(maze, self.state, action, self.max_steps)
        if res.done:
            self.reset()
        else:
            old = self.state.agent
            new = res.state.agent
            if new != old:
                self.obs_row[old[0] * maze.width + old[1]] = 0.0
                self.obs_row[new[0] * maze.width + new[1]] = 1.0
            self.state = res.state
        return res


def collect_rollouts(
    mazes: list[Maze],
    sampler,
    net: PolicyValueNet,
    cfg: PPOConfig,
    epoch: int,
    seed: int,
    max_steps: int = 100,
) -> RolloutBatch:
    """Gather exactly ``cfg.batch_size`` transitions from lockstep workers.

    Worker w draws from a stream seeded by (seed, epoch, w); episodes start
    at the sampler's choice and restart immediately on termination.
    """
    T, W = cfg.horizon, cfg.workers
    dim = 4 * mazes[0].height * mazes[0].width
    statics = [observation_static(m) for m in mazes]
    workers = [
        _WorkerEnv(
            mazes, statics, sampler, epoch,
            np.random.default_rng(np.random.SeedSequence([seed, epoch, 0, w])),
            max_steps,
        )
        for w in range(W)
    ]
    obs = np.empty((T, W, dim))
    actions = np.empty((T, W), dtype=np.int64)
    logp = np.empty((T, W))
    rewards = np.empty((T, W))
    values = np.empty((T, W))
    dones = np.zeros((T, W), dtype=bool)
    for t in range(T):
        for w, worker in enumerate(workers):
            obs[t, w] = worker.obs_row
        logits, vals = net.policy_value(obs[t])
        logps = log_softmax(logits)
        probs = np.exp(logps)
        values[t] = vals
        for w, worker in enumerate(workers):
            a = _sample_from_probs(probs[w], worker.rng)
            actions[t, w] = a
            logp[t, w] = logps[w, a]
            res = worker.step(a)
            rewards[t, w] = res.reward
            dones[t, w] = res.done
    final_obs = np.stack([worker.obs_row for worker in workers])
    _, final_vals = net.policy_value(final_obs)
    bootstrap = np.where(dones[-1], 0.0, final_vals)
    starts = [s for worker in workers for s in worker.starts]
    return RolloutBatch(
        obs, actions, logp, rewards, values, dones, bootstrap,
        batch_size=cfg.batch_size, episode_starts=starts,
    )


def compute_gae(batch: RolloutBatch, gamma: float, tau: float) -> RolloutBatch:
    """Fill advantages and returns-to-go in place (also returned).

    advantage_t = sum_l (gamma*tau)^l delta_{t+l} within each episode,
    delta_t = r_t + gamma V(s_{t+1}) (1 - done_t) - V(s_t); the value after
    the final step is the stored bootstrap.
    """
    T, W = batch.rewards.shape
    adv = np.zeros((T, W))
    next_adv = np.zeros(W)
    next_value = batch.bootstrap.copy()
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - batch.dones[t]
        delta = batch.rewards[t] + gamma * next_value * nonterminal - batch.values[t]
        next_adv = delta + gamma * tau * nonterminal * next_adv
        adv[t] = next_adv
        next_value = batch.values[t]
    batch.advantages = adv
    batch.returns = adv + batch.values
    return batch


@dataclass
class Minibatch:
    obs: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def ppo_loss_terms(net: PolicyValueNet, mb: Minibatch, cfg: PPOConfig):
    """Clipped-surrogate loss pieces and their exact gradients.

    Returns ((loss, policy_loss, value_loss, entropy), grads).
    """
    n = len(mb.actions)
    logits, values, cache = net.forward(mb.obs)
    logps = log_softmax(logits)
    probs = np.exp(logps)
    idx = np.arange(n)
    logp_a = logps[idx, mb.actions]
    ratio = np.exp(logp_a - mb.old_logp)
    surr1 = ratio * mb.advantages
    surr2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * mb.advantages
    policy_loss = -np.minimum(surr1, surr2).mean()
    v_err = values - mb.returns
    value_loss = np.mean(v_err**2)
    entropy_rows = -(probs * logps).sum(axis=1)
    entropy = entropy_rows.mean()
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    # d(loss)/d(logits): the min() gate passes gradient only where the
    # unclipped surrogate is the active branch.
    active = (surr1 <= surr2).astype(np.float64)
    onehot = np.zeros_like(probs)
    onehot[idx, mb.actions] = 1.0
    coeff = -(mb.advantages * ratio * active) / n
    d_logits = coeff[:, None] * (onehot - probs)
    d_logits += cfg.entropy_coef * probs * (logps + entropy_rows[:, None]) / n
    d_values = 2.0 * cfg.value_coef * v_err / n
    grads = net.backward(cache, d_logits, d_values)
    return (loss, policy_loss, value_loss, entropy), grads


def ppo_minibatch_loss(net: PolicyValueNet, mb: Minibatch, cfg: PPOConfig) -> float:
    """Loss alone, for finite-difference checks against the gradients."""
    (loss, _, _, _), _ = ppo_loss_terms(net, mb, cfg)
    return float(loss)


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float


def ppo_update(
    net: PolicyValueNet,
    batch: RolloutBatch,
    cfg: PPOConfig,
    optimizer: Adam | None = None,
    rng: np.random.Generator | None = None,
) -> UpdateStats:
    """cfg.ppo_epochs passes of minibatch Adam steps on the clipped loss.

    Advantages are normalized once per update. Raises
    TrainingDivergedError on a non-finite loss.
    """
    if batch.advantages is None:
        raise ValueError("run compute_gae before ppo_update")
    if optimizer is None:
        optimizer = Adam(cfg.learning_rate)
    if rng is None:
        rng = np.random.default_rng(0)
    obs = batch.flat("obs")
    actions = batch.flat("actions")
    old_logp = batch.flat("logp")
    returns = batch.flat("returns")
    adv = batch.flat("advantages")
    # Center, and scale down when spread is large; never scale up. Dividing
    # by a tiny std amplifies noise once a start distribution is mastered
    # and makes the policy oscillate around convergence.
    adv = (adv - adv.mean()) / max(float(adv.std()), 1.0)
    n = batch.batch_size
    stats = np.zeros(3)
    n_steps = 0
    for _ in range(cfg.ppo_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch_size):
            sel = order[lo : lo + cfg.minibatch_size]
            mb = Minibatch(obs[sel], actions[sel], old_logp[sel], adv[sel], returns[sel])
            (loss, pol, val, ent), grads = ppo_loss_terms(net, mb, cfg)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} (policy {pol}, value {val}, entropy {ent})"
                )
            optimizer.step(net.params, grads)
            stats += (pol, val, ent)
            n_steps += 1
    stats /= n_steps
    return UpdateStats(policy_loss=float(stats[0]), value_loss=float(stats[1]), entropy=float(stats[2]))


@dataclass
class BCResult:
    accuracy: float
    loss: float
    epochs_run: int


def behavior_clone(
    pairs: list,
    net: PolicyValueNet,
    epochs: int = 2000,
    lr: float = 1e-3,
    target_accuracy: float | None = 1.0,
) -> BCResult:
    """Fit the policy head to (state, action) pairs by cross-entropy.

    ``pairs`` is a list of (maze, demonstration). Stops early once
    ``target_accuracy`` is reached (set None to always run all epochs).
    """
    if not pairs:
        raise ValueError("nothing to fit: empty demonstration list")
    rows = []
    labels = []
    for maze, demo in pairs:
        static = observation_static(maze)
        for cell, action in zip(demo.states[:-1], demo.actions):
            rows.append(observe(maze, reset_to(maze, cell), static))
            labels.append(action)
    x = np.stack(rows)
    y = np.asarray(labels, dtype=np.int64)
    n = len(y)
    optimizer = Adam(lr)
    loss = float("nan")
    accuracy = 0.0
    epochs_run = 0
    for epoch in range(epochs):
        logits, _, cache = net.forward(x)
        logps = log_softmax(logits)
        loss = float(-logps[np.arange(n), y].mean())
        probs = np.exp(logps)
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), y] = 1.0
        grads = net.backward(cache, (probs - onehot) / n, np.zeros(n))
        optimizer.step(net.params, grads)
        epochs_run = epoch + 1
        accuracy = float((logits.argmax(axis=1) == y).mean())
        if target_accuracy is not None and accuracy >= target_accuracy:
            break
    return BCResult(accuracy=accuracy, loss=loss, epochs_run=epochs_run)


def greedy_rollout(net: PolicyValueNet, maze: Maze, max_steps: int, start=None):
    """Argmax rollout from ``start`` (default: maze start).

    Returns (reached_goal, length, cells visited).
    """
    static = observation_static(maze)
    state = reset_to(maze, maze.start if start is None else start)
    cells = [state.agent]
    for _ in range(max_steps):
        logits, _ = net.policy_value(observe(maze, state, static))
        res = step(maze, state, int(logits[0].argmax()), max_steps)
        state = res.state
        cells.append(state.agent)
        if res.done:
            return res.reached_goal, state.steps_taken, cells
    return False, state.steps_taken, cells


@dataclass
class EvalRow:
    maze_id: int
    success: bool
    length: int
    optimal_len: int

    @property
    def suboptimality(self) -> int:
        return self.length - self.optimal_len


@dataclass
class EvalReport:
    pct_optimal: float
    pct_within_5: float
    avg_suboptimality: float | None
    std_suboptimality: float | None
    success_rate: float
    rows: list[EvalRow]


def evaluate_policy(
    net: PolicyValueNet,
    mazes: list[Maze],
    episodes_per_maze: int = 1,
    max_steps: int = 100,
) -> EvalReport:
    """Greedy evaluation from each maze's initial state.

    A maze counts as optimal when the realized length equals the BFS
    shortest path, within-5 when at most five steps longer. Suboptimality
    statistics cover successful episodes only.
    """
    rows: list[EvalRow] = []
    for maze in mazes:
        d_star = bfs_distances(maze)[maze.start]
        for _ in range(episodes_per_maze):
            reached, length, _ = greedy_rollout(net, maze, max_steps)
            rows.append(EvalRow(maze.id, reached, length, d_star))
    n = len(rows)
    optimal = sum(1 for r in rows if r.success and r.length == r.optimal_len)
    within5 = sum(1 for r in rows if r.success and r.length <= r.optimal_len + 5)
    succ = [r for r in rows if r.success]
    subopts = np.array([r.suboptimality for r in succ], dtype=np.float64)
    return EvalReport(
        pct_optimal=100.0 * optimal / n,
        pct_within_5=100.0 * within5 / n,
        avg_suboptimality=float(subopts.mean()) if len(succ) else None,
        std_suboptimality=float(subopts.std()) if len(succ) else None,
        success_rate=len(succ) / n,
        rows=rows,
    )


def action_histogram(batch: RolloutBatch, n_actions: int = 5) -> np.ndarray:
    """Counts of each action over the batch (behavior-distribution logging)."""
    flat = batch.flat("actions")
    return np.bincount(flat, minlength=n_actions)
