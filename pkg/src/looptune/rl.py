"""Reinforcement-learning search over unroll factors.

The state space is the lattice of unroll-factor choices (one ladder of
candidate values per loop); actions increment or decrement one factor or stop
the episode.  Rewards are relative performance changes reported by a pluggable
evaluator.  An epsilon-greedy agent picks actions from a Q network - two
blocks of dense / batch-normalization / dropout layers with rectifier
activations and one output neuron per action - trained from a replay buffer
with temporal-difference targets.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .codegen import (
    TOTAL_VECTOR_REGISTERS,
    KernelSpec,
    VECTOR_LANES,
    check_register_budget,
    kernel_spec_for,
    RegisterPressureError,
)

ACTIONS = ("inc_i", "dec_i", "inc_j", "dec_j", "inc_k", "dec_k", "stop")
STOP = ACTIONS.index("stop")


class NoFeasibleKernelError(Exception):
    """Every state in the lattice is infeasible."""


@dataclass(frozen=True)
class Ladders:
    """Candidate unroll values per loop; u_j entries honor the vector width."""

    i: tuple[int, ...]
    j: tuple[int, ...]
    k: tuple[int, ...]

    def __post_init__(self):
        for name in "ijk":
            vals = getattr(self, name)
            if not vals or any(v < 1 for v in vals):
                raise ValueError(f"ladder {name} needs positive entries")
            if list(vals) != sorted(set(vals)):
                raise ValueError(f"ladder {name} must be strictly increasing")
        if any(v % VECTOR_LANES for v in self.j):
            raise ValueError(
                f"ladder j entries must be multiples of {VECTOR_LANES}: {self.j}"
            )

    @property
    def dims(self) -> tuple[tuple[int, ...], ...]:
        return (self.i, self.j, self.k)

    def states(self):
        for a in range(len(self.i)):
            for b in range(len(self.j)):
                for c in range(len(self.k)):
                    yield RLState((a, b, c))


def default_ladders() -> Ladders:
    return Ladders(i=(1, 2, 4, 8), j=(16, 32, 48, 64), k=(1, 2, 4))


@dataclass(frozen=True)
class RLState:
    """Indices into the per-loop ladders."""

    idx: tuple[int, int, int]

    def unrolls(self, ladders: Ladders) -> tuple[int, int, int]:
        return tuple(lad[i] for lad, i in zip(ladders.dims, self.idx))


@dataclass
class RLConfig:
    epsilon0: float = 1.0
    decay: float = 0.97
    epsilon_min: float = 0.05
    gamma: float = 0.9
    episodes: int = 200
    steps_per_episode: int = 16
    replay_capacity: int = 2048
    batch_size: int = 32
    learning_rate: float = 1e-3
    hidden: tuple[int, int] = (64, 64)
    dropout: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon0 <= 1.0 or not 0.0 <= self.epsilon_min <= 1.0:
            raise ValueError("epsilon bounds must lie in [0, 1]")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


def epsilon_at(config: RLConfig, episode: int) -> float:
    """Exploration rate for a 0-based episode index: max(eps_min, eps0*decay^n)."""
    return max(config.epsilon_min, config.epsilon0 * config.decay ** episode)


def step(ladders: Ladders, state: RLState, action: int | str) -> RLState:
    """Move one rung on the chosen ladder; boundary moves clamp to the same state."""
    if isinstance(action, str):
        action = ACTIONS.index(action)
    if action == STOP:
        raise ValueError("stop does not transition; it ends the episode")
    dim, direction = divmod(action, 2)
    delta = 1 if direction == 0 else -1
    idx = list(state.idx)
    moved = idx[dim] + delta
    if 0 <= moved < len(ladders.dims[dim]):
        idx[dim] = moved
    return RLState(tuple(idx))


# ---------------------------------------------------------------------------
# Q network: two blocks of (dense+relu, batchnorm, dropout), linear output head

class QNetwork:
    """Action-value network matching the described policy architecture."""

    def __init__(self, input_dim: int, hidden: tuple[int, int] = (64, 64),
                 n_actions: int = len(ACTIONS), dropout: float = 0.25,
                 seed: int = 0, bn_momentum: float = 0.9, bn_eps: float = 1e-5):
        self.input_dim = input_dim
        self.hidden = tuple(hidden)
        self.n_actions = n_actions
        self.dropout = dropout
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        rng = np.random.default_rng(seed)
        dims = [input_dim, *self.hidden]
        self.W = []
        self.b = []
        self.gamma = []
        self.beta = []
        self.run_mean = []
        self.run_var = []
        for fan_in, fan_out in zip(dims, dims[1:]):
            self.W.append(rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                     size=(fan_in, fan_out)))
            self.b.append(np.zeros(fan_out))
            self.gamma.append(np.ones(fan_out))
            self.beta.append(np.zeros(fan_out))
            self.run_mean.append(np.zeros(fan_out))
            self.run_var.append(np.ones(fan_out))
        self.W_out = rng.normal(0.0, math.sqrt(2.0 / dims[-1]),
                                size=(dims[-1], n_actions))
        self.b_out = np.zeros(n_actions)

    def parameters(self):
        return self.W + self.b + self.gamma + self.beta + [self.W_out, self.b_out]

    def forward(self, X: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None, cache: dict | None = None
                ) -> np.ndarray:
        """Q values, shape (n, n_actions).  Dropout is active only in training."""
        a = np.asarray(X, dtype=np.float64)
        if cache is not None:
            cache["inputs"] = []
            cache["relu_pre"] = []
            cache["bn"] = []
            cache["drop_mask"] = []
            cache["training"] = training
        for layer in range(len(self.W)):
            if cache is not None:
                cache["inputs"].append(a)
            z = a @ self.W[layer] + self.b[layer]
            h = np.maximum(z, 0.0)
            if training:
                mean = h.mean(axis=0)
                var = h.var(axis=0)
                self.run_mean[layer] = (self.bn_momentum * self.run_mean[layer]
                                        + (1 - self.bn_momentum) * mean)
                self.run_var[layer] = (self.bn_momentum * self.run_var[layer]
                                       + (1 - self.bn_momentum) * var)
            else:
                mean = self.run_mean[layer]
                var = self.run_var[layer]
            inv_std = 1.0 / np.sqrt(var + self.bn_eps)
            xhat = (h - mean) * inv_std
            bn = xhat * self.gamma[layer] + self.beta[layer]
            if training and self.dropout > 0:
                if rng is None:
                    raise ValueError("training-mode forward needs an rng for dropout")
                mask = (rng.random(bn.shape) >= self.dropout) / (1.0 - self.dropout)
            else:
                mask = np.ones_like(bn)
            if cache is not None:
                cache["relu_pre"].append(z)
                cache["bn"].append((h, mean, inv_std, xhat))
                cache["drop_mask"].append(mask)
            a = bn * mask
        if cache is not None:
            cache["head_in"] = a
        return a @ self.W_out + self.b_out

    def backward(self, cache: dict, d_out: np.ndarray) -> dict:
        """Gradients of a scalar loss given d(loss)/d(q_values)."""
        grads = {"W": [None] * len(self.W), "b": [None] * len(self.b),
                 "gamma": [None] * len(self.W), "beta": [None] * len(self.W)}
        grads["W_out"] = cache["head_in"].T @ d_out
        grads["b_out"] = d_out.sum(axis=0)
        d = d_out @ self.W_out.T
        training = cache["training"]
        n = d_out.shape[0]
        for layer in range(len(self.W) - 1, -1, -1):
            d = d * cache["drop_mask"][layer]
            h, mean, inv_std, xhat = cache["bn"][layer]
            grads["gamma"][layer] = (d * xhat).sum(axis=0)
            grads["beta"][layer] = d.sum(axis=0)
            dxhat = d * self.gamma[layer]
            if training:
                dvar = (dxhat * (h - mean) * -0.5 * inv_std ** 3).sum(axis=0)
                dmean = (dxhat * -inv_std).sum(axis=0) + dvar * (-2.0 * (h - mean)).mean(axis=0)
                dh = dxhat * inv_std + dvar * 2.0 * (h - mean) / n + dmean / n
            else:
                dh = dxhat * inv_std
            dz = dh * (cache["relu_pre"][layer] > 0)
            grads["W"][layer] = cache["inputs"][layer].T @ dz
            grads["b"][layer] = dz.sum(axis=0)
            d = dz @ self.W[layer].T
        return grads

    def td_update(self, X, actions, targets, lr, rng) -> float:
        """One SGD step on mean squared TD error for the taken actions."""
        cache: dict = {}
        q = self.forward(X, training=True, rng=rng, cache=cache)
        n = X.shape[0]
        taken = q[np.arange(n), actions]
        err = taken - targets
        loss = float((err ** 2).mean())
        d_out = np.zeros_like(q)
        d_out[np.arange(n), actions] = 2.0 * err / n
        grads = self.backward(cache, d_out)
        for layer in range(len(self.W)):
            self.W[layer] -= lr * grads["W"][layer]
            self.b[layer] -= lr * grads["b"][layer]
            self.gamma[layer] -= lr * grads["gamma"][layer]
            self.beta[layer] -= lr * grads["beta"][layer]
        self.W_out -= lr * grads["W_out"]
        self.b_out -= lr * grads["b_out"]
        return loss

    def save(self, path: str) -> None:
        data = {
            "format_version": 1,
            "kind": "q-network",
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "n_actions": self.n_actions,
            "dropout": self.dropout,
            "tensors": {
                "W": [w.tolist() for w in self.W],
                "b": [b.tolist() for b in self.b],
                "gamma": [g.tolist() for g in self.gamma],
                "beta": [b.tolist() for b in self.beta],
                "run_mean": [m.tolist() for m in self.run_mean],
                "run_var": [v.tolist() for v in self.run_var],
                "W_out": self.W_out.tolist(),
                "b_out": self.b_out.tolist(),
            },
        }
        with open(path, "w") as f:
            json.dump(data, f)

    @classmethod
    def load(cls, path: str) -> "QNetwork":
        with open(path) as f:
            data = json.load(f)
        net = cls(input_dim=data["input_dim"], hidden=tuple(data["hidden"]),
                  n_actions=data["n_actions"], dropout=data["dropout"])
        t = data["tensors"]
        net.W = [np.asarray(w) for w in t["W"]]
        net.b = [np.asarray(b) for b in t["b"]]
        net.gamma = [np.asarray(g) for g in t["gamma"]]
        net.beta = [np.asarray(b) for b in t["beta"]]
        net.run_mean = [np.asarray(m) for m in t["run_mean"]]
        net.run_var = [np.asarray(v) for v in t["run_var"]]
        net.W_out = np.asarray(t["W_out"])
        net.b_out = np.asarray(t["b_out"])
        return net


def encode_state(ladders: Ladders, state: RLState) -> np.ndarray:
    """One-hot encoding of the ladder indices, concatenated per dimension."""
    total = sum(len(d) for d in ladders.dims)
    x = np.zeros(total)
    offset = 0
    for dim_vals, idx in zip(ladders.dims, state.idx):
        x[offset + idx] = 1.0
        offset += len(dim_vals)
    return x


# ---------------------------------------------------------------------------
# Agent and search driver

class MemoizedEvaluator:
    """Thread-safe cache around an evaluator callable keyed by unroll triple."""

    def __init__(self, fn):
        self.fn = fn
        self._cache: dict[tuple[int, int, int], float | None] = {}
        self._lock = threading.Lock()

    def __call__(self, unrolls: tuple[int, int, int]) -> float | None:
        """Performance for the triple, or None if the evaluator rejects it."""
        with self._lock:
            if unrolls in self._cache:
                return self._cache[unrolls]
        try:
            perf = float(self.fn(unrolls))
        except Exception:
            perf = None
        with self._lock:
            self._cache[unrolls] = perf
        return perf


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class TuneResult:
    best_state: RLState
    best_unrolls: tuple[int, int, int]
    best_perf: float
    best_spec: KernelSpec | None
    log: list[dict]
    visited: dict[tuple[int, int, int], float]
    network: "QNetwork | None" = None


class Agent:
    def __init__(self, ladders: Ladders, config: RLConfig):
        self.ladders = ladders
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.network = QNetwork(
            input_dim=sum(len(d) for d in ladders.dims),
            hidden=config.hidden, dropout=config.dropout, seed=config.seed,
        )
        self.replay: list[Transition] = []

    def choose(self, state: RLState, epsilon: float) -> int:
        if self.rng.random() < epsilon:
            return int(self.rng.integers(len(ACTIONS)))
        q = self.network.forward(encode_state(self.ladders, state)[None, :])
        return int(np.argmax(q[0]))

    def remember(self, tr: Transition) -> None:
        self.replay.append(tr)
        if len(self.replay) > self.config.replay_capacity:
            self.replay.pop(0)

    def learn(self) -> float | None:
        if len(self.replay) < self.config.batch_size:
            return None
        sel = self.rng.choice(len(self.replay), size=self.config.batch_size,
                              replace=False)
        batch = [self.replay[idx] for idx in sel]
        states = np.stack([t.state for t in batch])
        next_states = np.stack([t.next_state for t in batch])
        rewards = np.array([t.reward for t in batch])
        terminal = np.array([t.terminal for t in batch])
        actions = np.array([t.action for t in batch])
        next_q = self.network.forward(next_states).max(axis=1)
        targets = rewards + np.where(terminal, 0.0, self.config.gamma * next_q)
        return self.network.td_update(states, actions, targets,
                                      self.config.learning_rate, self.rng)


def _feasible(ladders: Ladders, unrolls: tuple[int, int, int],
              max_u_j: int | None) -> bool:
    spec = KernelSpec(u_i=unrolls[0], u_j=unrolls[1], u_k=unrolls[2],
                      a_stride=1, b_stride=1, c_stride=1)
    try:
        check_register_budget(spec)
    except RegisterPressureError:
        return False
    if max_u_j is not None and unrolls[1] > max_u_j:
        return False
    return True


def episode(agent: Agent, evaluator: MemoizedEvaluator, config: RLConfig,
            episode_index: int, start: RLState, start_perf: float,
            infeasible: set[tuple[int, int, int]],
            visited: dict[tuple[int, int, int], float],
            max_u_j: int | None) -> list[dict]:
    """One epsilon-greedy episode; returns its log rows."""
    eps = epsilon_at(config, episode_index)
    ladders = agent.ladders
    state, perf = start, start_perf
    rows = []
    for t in range(config.steps_per_episode):
        action = agent.choose(state, eps)
        enc = encode_state(ladders, state)
        if action == STOP:
            agent.remember(Transition(enc, action, 0.0, enc, True))
            agent.learn()
            rows.append({"episode": episode_index, "step": t,
                         "state": list(state.unrolls(ladders)),
                         "action": ACTIONS[action], "reward": 0.0,
                         "perf": perf, "epsilon": eps})
            break
        proposal = step(ladders, state, action)
        reward = 0.0
        if proposal != state:
            unrolls = proposal.unrolls(ladders)
            if unrolls in infeasible or not _feasible(ladders, unrolls, max_u_j):
                infeasible.add(unrolls)
                reward = -1.0
            else:
                new_perf = evaluator(unrolls)
                if new_perf is None:
                    infeasible.add(unrolls)
                    reward = -1.0
                else:
                    reward = (new_perf - perf) / perf
                    state, perf = proposal, new_perf
                    visited[unrolls] = new_perf
        next_enc = encode_state(ladders, state)
        agent.remember(Transition(enc, action, reward, next_enc, False))
        agent.learn()
        rows.append({"episode": episode_index, "step": t,
                     "state": list(state.unrolls(ladders)),
                     "action": ACTIONS[action], "reward": reward,
                     "perf": perf, "epsilon": eps})
    return rows


def tune(evaluator_fn, config: RLConfig, ladders: Ladders | None = None,
         problem: tuple[int, int, int] | None = None,
         max_u_j: int | None = None) -> TuneResult:
    """Search the unroll lattice; return the best feasible state ever visited.

    `evaluator_fn` maps an unroll triple to a performance figure and may raise
    for infeasible states.  When `problem` (M, N, K) is given, the result
    carries a KernelSpec with row-major strides and u_j is capped at N.
    """
    if ladders is None:
        ladders = default_ladders()
    if problem is not None and max_u_j is None:
        max_u_j = problem[1]
    evaluator = MemoizedEvaluator(evaluator_fn)
    agent = Agent(ladders, config)

    feasible_states = [s for s in ladders.states()
                       if _feasible(ladders, s.unrolls(ladders), max_u_j)]
    if not feasible_states:
        raise NoFeasibleKernelError("no state on the ladders is feasible")

    infeasible: set[tuple[int, int, int]] = set()
    visited: dict[tuple[int, int, int], float] = {}
    log: list[dict] = []
    for ep in range(config.episodes):
        start = None
        order = agent.rng.permutation(len(feasible_states))
        for pick in order:
            candidate = feasible_states[pick]
            perf = evaluator(candidate.unrolls(ladders))
            if perf is not None:
                start = (candidate, perf)
                visited[candidate.unrolls(ladders)] = perf
                break
            infeasible.add(candidate.unrolls(ladders))
        if start is None:
            raise NoFeasibleKernelError("evaluator rejected every lattice state")
        log.extend(episode(agent, evaluator, config, ep, start[0], start[1],
                           infeasible, visited, max_u_j))

    best_unrolls = max(visited, key=lambda u: (visited[u], tuple(-x for x in u)))
    best_perf = visited[best_unrolls]
    idx = tuple(ladders.dims[d].index(best_unrolls[d]) for d in range(3))
    spec = None
    if problem is not None:
        spec = kernel_spec_for(*best_unrolls, *problem)
    return TuneResult(best_state=RLState(idx), best_unrolls=best_unrolls,
                      best_perf=best_perf, best_spec=spec, log=log,
                      visited=visited, network=agent.network)
