"""Controlling agents: DDPG actor-critic and the random baseline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .forge import EPS_MAX
from .nn import Adam, Linear, ReLU, Sequential, Tensor, concat, mse_loss, no_grad
from .nn.functional import softmax_np


@dataclass(frozen=True)
class ControlAction:
    target: np.ndarray  # desired soft label
    epsilon: float

    def __post_init__(self):
        if abs(float(np.sum(self.target)) - 1.0) > 1e-5 or (np.asarray(self.target) < 0).any():
            raise ValueError("target must lie on the probability simplex")


def logistic(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def squash(raw: np.ndarray, eps_max: float = EPS_MAX) -> ControlAction:
    """First C entries -> softmax target, last entry -> eps_max * logistic."""
    raw = np.asarray(raw, dtype=np.float64)
    target = softmax_np(raw[:-1])
    eps = float(np.clip(eps_max * logistic(raw[-1]), 1e-6, eps_max))
    return ControlAction(target=target, epsilon=eps)


@dataclass
class AgentConfig:
    obs_dim: int = 42
    action_dim: int = 11
    hidden: tuple[int, ...] = (64, 64)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    replay_capacity: int = 10_000
    batch_size: int = 64
    warmup: int = 256
    noise_std: float = 0.1
    noise_steps: int = 2_000
    final_init: float = 3e-3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if min(self.replay_capacity, self.batch_size, self.obs_dim, self.action_dim) < 1:
            raise ValueError("capacities and dimensions must be positive")
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        return asdict(self)


class ReplayBuffer:
    """Fixed-capacity FIFO ring buffer of (obs, raw action, reward, next obs)."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.action = np.zeros((capacity, action_dim), dtype=np.float32)
        self.reward = np.zeros(capacity, dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, obs, action, reward, next_obs) -> None:
        i = self._next
        self.obs[i], self.action[i], self.reward[i], self.next_obs[i] = obs, action, reward, next_obs
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self._size, size=batch_size)
        return self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx]


def _mlp(sizes, rng, final_init: float) -> Sequential:
    layers = []
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        layers += [Linear(a, b), ReLU()]
    layers.append(Linear(sizes[-2], sizes[-1]))
    net = Sequential(*layers)
    net.reset_parameters(rng)
    last = net.layers[-1]
    last.weight.data = rng.uniform(-final_init, final_init, last.weight.shape).astype(np.float32)
    last.bias.data = rng.uniform(-final_init, final_init, last.bias.shape).astype(np.float32)
    return net


def soft_update(target: Sequential, online: Sequential, tau: float) -> None:
    for t, o in zip(target.parameters(), online.parameters()):
        t.data = (tau * o.data + (1.0 - tau) * t.data).astype(t.data.dtype)


class DDPGAgent:
    """Deterministic actor, Q critic on [obs, raw action], target networks, one update per step."""

    def __init__(self, config: AgentConfig | None = None):
        self.config = cfg = config or AgentConfig()
        rng = np.random.default_rng(cfg.seed)
        self.actor = _mlp((cfg.obs_dim, *cfg.hidden, cfg.action_dim), rng, cfg.final_init)
        self.critic = _mlp((cfg.obs_dim + cfg.action_dim, *cfg.hidden, 1), rng, cfg.final_init)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.parameters(), lr=cfg.actor_lr)
        self.critic_opt = Adam(self.critic.parameters(), lr=cfg.critic_lr)
        self.replay = ReplayBuffer(cfg.replay_capacity, cfg.obs_dim, cfg.action_dim)
        self._replay_rng = np.random.default_rng([cfg.seed, 1])
        self.updates = 0
        self.last_losses: dict[str, float] = {}

    def raw_action(self, obs: np.ndarray, step: int, explore: bool = True) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float32).reshape(1, -1)
        raw = self.actor.logits(obs)[0].astype(np.float64)
        cfg = self.config
        if explore and step < cfg.noise_steps and cfg.noise_std > 0:
            raw = raw + np.random.default_rng([cfg.seed, 2, step]).normal(0.0, cfg.noise_std, size=raw.shape)
        return raw.astype(np.float32)

    def observe(self, obs, raw_action, reward: float, next_obs) -> None:
        self.replay.push(obs, raw_action, reward, next_obs)
        if len(self.replay) >= max(self.config.warmup, 1):
            self.update()

    def critic_targets(self, reward: np.ndarray, next_obs: np.ndarray) -> np.ndarray:
        """Bellman targets from the target networks only."""
        with no_grad():
            next_action = self.actor_target(Tensor(next_obs)).data
            q_next = self.critic_target(Tensor(np.concatenate([next_obs, next_action], axis=1))).data[:, 0]
        return (reward + self.config.gamma * q_next).astype(np.float32)

    def update(self) -> None:
        cfg = self.config
        obs, action, reward, next_obs = self.replay.sample(cfg.batch_size, self._replay_rng)
        y = self.critic_targets(reward, next_obs)

        q = self.critic(Tensor(np.concatenate([obs, action], axis=1)))
        critic_loss = mse_loss(q, y[:, None])
        self.critic_opt.zero_grad()
        critic_loss.backward()
        self.critic_opt.step()

        with self.critic.frozen():
            q_pi = self.critic(concat([Tensor(obs), self.actor(Tensor(obs))], axis=1))
            actor_loss = -q_pi.mean()
            self.actor_opt.zero_grad()
            actor_loss.backward()
            self.actor_opt.step()

        soft_update(self.actor_target, self.actor, cfg.tau)
        soft_update(self.critic_target, self.critic, cfg.tau)
        self.updates += 1
        self.last_losses = {"critic": critic_loss.item(), "actor": actor_loss.item()}


class DDPGController:
    """DDPG agent whose raw outputs are squashed into (target soft label, epsilon)."""

    name = "ddpg"

    def __init__(self, config: AgentConfig | None = None, eps_max: float = EPS_MAX):
        self.agent = DDPGAgent(config)
        self.eps_max = eps_max

    def act(self, obs: np.ndarray, step: int) -> tuple[ControlAction, np.ndarray]:
        raw = self.agent.raw_action(obs, step)
        return squash(raw, self.eps_max), raw

    def observe(self, obs, raw_action, reward, next_obs) -> None:
        self.agent.observe(obs, raw_action, reward, next_obs)


def random_action(rng: np.random.Generator, num_classes: int = 10, eps_max: float = EPS_MAX) -> ControlAction:
    """Dirichlet(1) target (uniform on the simplex) and epsilon ~ U(0, eps_max]."""
    target = rng.dirichlet(np.ones(num_classes))
    eps = eps_max * (1.0 - rng.random())
    return ControlAction(target=target, epsilon=float(eps))


@dataclass
class RandomController:
    seed: int = 0
    num_classes: int = 10
    eps_max: float = EPS_MAX
    name: str = field(default="random", init=False)

    def act(self, obs: np.ndarray, step: int) -> tuple[ControlAction, np.ndarray]:
        action = random_action(np.random.default_rng([self.seed, 3, step]), self.num_classes, self.eps_max)
        return action, np.append(action.target, action.epsilon).astype(np.float32)

    def observe(self, obs, raw_action, reward, next_obs) -> None:
        pass
