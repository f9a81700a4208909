"""DQN training with experience replay and a periodically synced target network.

Two agent kinds share the loop: ``eps_greedy`` explores with a linearly
decaying epsilon, ``noisy`` uses factorized parameter noise and acts greedily.
"""

from __future__ import annotations

import copy
import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .envs import ToyEnv, ValueTable, make_env
from .networks import (
    Architecture,
    Kind,
    NoisyLinearLayer,
    QNetwork,
    TargetNetwork,
    forward,
    init_parameters,
    q_values,
    sample_noise,
    sync_target,
)
from .seeding import Streams

log = logging.getLogger(__name__)

EVAL_SEED_BASE = 1_000_000


class AgentKind(str, enum.Enum):
    EPS_GREEDY = "eps_greedy"
    NOISY = "noisy"


class NoiseMode(str, enum.Enum):
    SAMPLE = "sample"
    MEAN = "mean"


class ConfigError(ValueError):
    """Raised for an inconsistent trainer configuration."""


@dataclass
class TrainerConfig:
    kind: AgentKind = AgentKind.EPS_GREEDY
    gamma: float = 0.99
    lr: float = 0.1
    batch_size: int = 32
    buffer_capacity: int = 10_000
    target_sync: int = 500
    total_steps: int = 50_000
    learning_start: int = 1_000
    eps_start: float = 1.0
    eps_end: float = 0.02
    # None: 10% of total_steps
    eps_decay_steps: int | None = None
    hidden: tuple[int, ...] = (64, 64)
    sigma0: float = 0.35
    target_noise: str = "frozen"
    noise_mode: NoiseMode = NoiseMode.SAMPLE
    eval_every: int = 1_000
    eval_episodes: int = 10
    final_eval_episodes: int = 100
    grad_backend: str = "kernel"
    seed: int = 0

    def __post_init__(self):
        self.kind = AgentKind(self.kind)
        self.noise_mode = NoiseMode(self.noise_mode)
        self.hidden = tuple(int(h) for h in self.hidden)

    def validate(self) -> "TrainerConfig":
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.target_sync < 1:
            raise ConfigError(f"target_sync must be >= 1, got {self.target_sync}")
        if not 1 <= self.batch_size <= self.buffer_capacity:
            raise ConfigError(
                f"batch_size {self.batch_size} must be in [1, buffer_capacity={self.buffer_capacity}]"
            )
        if self.total_steps < 0 or self.learning_start < 0:
            raise ConfigError("total_steps and learning_start must be non-negative")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.target_noise not in ("frozen", "resample"):
            raise ConfigError(f"target_noise must be 'frozen' or 'resample', got {self.target_noise!r}")
        if self.grad_backend not in ("kernel", "autodiff"):
            raise ConfigError(f"grad_backend must be 'kernel' or 'autodiff', got {self.grad_backend!r}")
        if self.eval_every < 1 or self.eval_episodes < 1 or self.final_eval_episodes < 1:
            raise ConfigError("eval cadence and episode counts must be >= 1")
        return self

    @property
    def decay_steps(self) -> int:
        if self.eps_decay_steps is not None:
            return self.eps_decay_steps
        return max(1, self.total_steps // 10)

    def architecture(self, env: ToyEnv) -> Architecture:
        kind = Kind.NOISY if self.kind is AgentKind.NOISY else Kind.PLAIN
        return Architecture(env.spec.obs_length, env.spec.n_actions, self.hidden, kind, self.sigma0)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["noise_mode"] = self.noise_mode.value
        d["hidden"] = list(self.hidden)
        return d


# -- action selection -------------------------------------------------------


def epsilon(step: int, config: TrainerConfig) -> float:
    """Linear decay from eps_start to eps_end over decay_steps, then constant."""
    frac = min(max(step, 0) / config.decay_steps, 1.0)
    return config.eps_start + frac * (config.eps_end - config.eps_start)


def greedy(q: np.ndarray) -> int:
    """Argmax with ties broken toward the lowest action index."""
    return int(np.argmax(q))


def select_action(
    net: QNetwork,
    obs: np.ndarray,
    step: int,
    config: TrainerConfig,
    rng: np.random.Generator,
    stats: dict | None = None,
) -> int:
    if config.kind is AgentKind.NOISY:
        sample_noise(net, rng)
        return greedy(q_values(net, obs))
    if rng.random() < epsilon(step, config):
        if stats is not None:
            stats["random_actions"] = stats.get("random_actions", 0) + 1
        return int(rng.integers(net.arch.n_actions))
    return greedy(q_values(net, obs))


def clip_reward(r: float) -> float:
    return min(max(float(r), -1.0), 1.0)


# -- replay -----------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray
    indices: np.ndarray | None = None

    @classmethod
    def of(cls, transitions: Sequence[Transition]) -> "Batch":
        return cls(
            np.stack([t.s for t in transitions]),
            np.array([t.a for t in transitions], dtype=np.intp),
            np.array([t.r for t in transitions], dtype=np.float64),
            np.stack([t.s_next for t in transitions]),
            np.array([t.terminal for t in transitions], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, obs_length: int):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, obs_length))
        self.s_next = np.zeros((capacity, obs_length))
        self.a = np.zeros(capacity, dtype=np.intp)
        self.r = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, s, a: int, r: float, s_next, terminal: bool) -> None:
        r = float(r)
        if not -1.0 <= r <= 1.0:
            raise ValueError(f"unclipped reward {r} stored in replay")
        i = self._next
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s_next[i] = s_next
        self.terminal[i] = terminal
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def push(self, t: Transition) -> None:
        self.add(t.s, t.a, t.r, t.s_next, t.terminal)

    def oldest_first(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        start = self._next if self._size == self.capacity else 0
        return (start + np.arange(self._size)) % self.capacity

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        if self._size < batch_size:
            raise ValueError(f"replay holds {self._size} transitions, batch needs {batch_size}")
        idx = rng.integers(0, self._size, size=batch_size)
        slots = self.oldest_first()[idx] if self._size == self.capacity else idx
        return Batch(
            self.s[slots], self.a[slots], self.r[slots], self.s_next[slots], self.terminal[slots], slots
        )


# -- learning ---------------------------------------------------------------


def compute_target(batch: Batch, target: TargetNetwork | QNetwork, gamma: float) -> np.ndarray:
    """y = r for terminal rows, else r + gamma * max_a' Q_target(s', a')."""
    weights = target.weights() if isinstance(target, TargetNetwork) else target.effective_weights()
    q_next = kernels.mlp_forward(weights, batch.s_next)
    boot = batch.r + gamma * q_next.max(axis=1)
    return np.where(batch.terminal, batch.r, boot)


def td_gradients(net: QNetwork, batch: Batch, y: np.ndarray, backend: str = "kernel"):
    """Squared TD loss and its gradient for every named parameter of ``net``."""
    if backend == "autodiff":
        fw = forward(net, batch.s)
        taken = ad.pick(fw.q, batch.a)
        loss = ad.squared_error(taken, fw.record.leaf(y, "target"))
        grads = ad.backward(fw.record, loss)
        return loss.data.item(), {name: grads[t] for name, t in fw.params.items()}

    loss, layer_grads = kernels.td_grad(net.effective_weights(), batch.s, batch.a, y)
    out: dict[str, np.ndarray] = {}
    for i, (layer, (dW, db)) in enumerate(zip(net.layers, layer_grads)):
        if isinstance(layer, NoisyLinearLayer):
            out[f"layer{i}.mu_W"] = dW
            out[f"layer{i}.mu_b"] = db
            if net.use_noise:
                eps_W, eps_b = layer.weight_noise()
                out[f"layer{i}.sigma_W"] = dW * eps_W
                out[f"layer{i}.sigma_b"] = db * eps_b
            else:
                out[f"layer{i}.sigma_W"] = np.zeros_like(dW)
                out[f"layer{i}.sigma_b"] = np.zeros_like(db)
        else:
            out[f"layer{i}.W"] = dW
            out[f"layer{i}.b"] = db
    return loss, out


def apply_sgd(net: QNetwork, grads: dict[str, np.ndarray], lr: float) -> None:
    if lr == 0.0:
        return
    for name, param in net.parameters():
        param -= lr * grads[name]


# -- policies ---------------------------------------------------------------


class Policy(Protocol):
    def act(self, obs: np.ndarray) -> int: ...


@dataclass
class PolicySnapshot:
    """Greedy policy over a frozen copy of a network.

    In ``sample`` mode a noisy network draws fresh noise per decision from
    ``rng``; parameters never change.
    """

    net: QNetwork
    noise_mode: NoiseMode = NoiseMode.SAMPLE
    rng: np.random.Generator | None = None

    @classmethod
    def of(cls, net: QNetwork, noise_mode=NoiseMode.SAMPLE, rng=None) -> "PolicySnapshot":
        snap = net.copy()
        mode = NoiseMode(noise_mode)
        snap.use_noise = mode is NoiseMode.SAMPLE
        return cls(snap, mode, rng)

    @property
    def noisy(self) -> bool:
        return self.net.kind is Kind.NOISY and self.noise_mode is NoiseMode.SAMPLE

    def resample(self) -> None:
        if self.noisy:
            if self.rng is None:
                raise ValueError("a sampling noisy snapshot needs an rng")
            sample_noise(self.net, self.rng)

    def q(self, obs) -> np.ndarray:
        return q_values(self.net, obs)

    def act(self, obs) -> int:
        self.resample()
        return greedy(self.q(obs))


@dataclass
class TabularPolicy:
    """Policy read from a value-iteration table via the env's frame decoder."""

    env: ToyEnv
    table: ValueTable

    def act(self, obs) -> int:
        return self.table.policy[self.env.decode(obs)]

    def q(self, obs) -> np.ndarray:
        return self.table.q[self.env.decode(obs)]


def eval_seeds(episodes: int) -> list[int]:
    return [EVAL_SEED_BASE + k for k in range(episodes)]


def evaluate_policy(
    policy: Policy,
    env: ToyEnv,
    episodes: int,
    perturber: Callable[[np.ndarray], np.ndarray] | None = None,
    seeds: Sequence[int] | None = None,
) -> list[float]:
    """Raw (unclipped) per-episode reward sums of greedy play.

    ``perturber(obs)`` replaces every observation before the policy sees it.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    seeds = list(seeds) if seeds is not None else eval_seeds(episodes)
    returns = []
    for seed in seeds[:episodes]:
        obs = env.reset(seed)
        total, done = 0.0, False
        while not done:
            seen = perturber(obs) if perturber is not None else obs
            res = env.step(policy.act(seen))
            total += res.reward
            obs, done = res.obs, res.terminal
        returns.append(total)
    return returns


def oracle_return(env: ToyEnv, table: ValueTable, episodes: int) -> float:
    """Mean undiscounted return of the value-iteration policy on the eval seeds."""
    return float(np.mean(evaluate_policy(TabularPolicy(env, table), env, episodes)))


# -- training loop ----------------------------------------------------------


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    step: int
    return_mean: float
    return_std: float
    td_loss: float
    exploration: str
    clean_return: float | None = None
    attack_success: float | None = None
    transfer_rate: float | None = None
    episodes: int = 0


class Observer(Protocol):
    """Hook the training-time attacker plugs into the loop."""

    def intercept(self, trainer: "Trainer", s, a: int, r: float, s_next, terminal: bool) -> np.ndarray: ...

    def on_eval(self, trainer: "Trainer", mean_return: float) -> None: ...

    def eval_perturber(self, trainer: "Trainer") -> Callable | None: ...

    def extra_metrics(self) -> dict: ...


@dataclass
class Learner:
    """Online net, frozen target, replay buffer, and the update counter."""

    net: QNetwork
    target: TargetNetwork
    buffer: ReplayBuffer
    updates: int = 0

    @classmethod
    def create(cls, net: QNetwork, capacity: int, rng: np.random.Generator | None) -> "Learner":
        target_rng = rng if net.kind is Kind.NOISY else None
        return cls(net, TargetNetwork.from_network(net, target_rng), ReplayBuffer(capacity, net.arch.input_width))


def train_step(
    learner: Learner,
    config: TrainerConfig,
    rng: np.random.Generator,
    noise_rng: np.random.Generator | None = None,
) -> float:
    """One SGD step on a uniform replay batch; syncs the target every ``target_sync`` calls."""
    batch = learner.buffer.sample(rng, config.batch_size)
    net = learner.net
    noisy = net.kind is Kind.NOISY
    if noisy:
        # one draw held constant across the whole batch
        sample_noise(net, noise_rng)
        if config.target_noise == "resample":
            learner.target.resample_noise(noise_rng)
    y = compute_target(batch, learner.target, config.gamma)
    loss, grads = td_gradients(net, batch, y, config.grad_backend)
    apply_sgd(net, grads, config.lr)
    learner.updates += 1
    if learner.updates % config.target_sync == 0:
        sync_target(net, learner.target, noise_rng if noisy else None)
    return loss


class Trainer:
    """Owns one agent's learner, environments, and RNG substreams."""

    def __init__(self, env: ToyEnv, config: TrainerConfig, run_id: str = "run", net: QNetwork | None = None):
        self.config = config.validate()
        self.env = env
        self.eval_env = make_env(env.spec.name, **_spec_overrides(env))
        self.run_id = run_id
        self.streams = Streams(config.seed)
        net = net if net is not None else init_parameters(config.architecture(env), self.streams.init)
        self.learner = Learner.create(net, config.buffer_capacity, self.streams.noise)
        self.step = 0
        self.stats: dict[str, int] = {"random_actions": 0}
        self.episode_returns: list[float] = []

    @property
    def net(self) -> QNetwork:
        return self.learner.net

    @property
    def target(self) -> TargetNetwork:
        return self.learner.target

    @property
    def buffer(self) -> ReplayBuffer:
        return self.learner.buffer

    @property
    def action_rng(self) -> np.random.Generator:
        return self.streams.noise if self.config.kind is AgentKind.NOISY else self.streams.explore

    def act(self, obs) -> int:
        return select_action(self.net, obs, self.step, self.config, self.action_rng, self.stats)

    def train_step(self) -> float:
        return train_step(self.learner, self.config, self.streams.replay, self.streams.noise)

    def snapshot(self, rng: np.random.Generator | None = None) -> PolicySnapshot:
        return PolicySnapshot.of(self.net, self.config.noise_mode, rng or self.streams.eval)

    def evaluate(self, episodes: int, perturber=None, rng=None) -> list[float]:
        return evaluate_policy(self.snapshot(rng), self.eval_env, episodes, perturber)

    def run(self, observer: Observer | None = None, on_eval=None) -> list[MetricsRecord]:
        cfg = self.config
        records: list[MetricsRecord] = []
        env = self.env
        obs = env.reset(int(self.streams.env.integers(2**31)))
        ep_return = 0.0
        window: list[float] = []
        while self.step < cfg.total_steps:
            self.step += 1
            a = self.act(obs)
            res = env.step(a)
            s_next = res.obs
            if observer is not None:
                s_next = observer.intercept(self, obs, a, res.reward, res.obs, res.terminal)
            self.buffer.add(obs, a, clip_reward(res.reward), s_next, res.terminal)
            ep_return += res.reward
            if self.step >= cfg.learning_start and len(self.buffer) >= cfg.batch_size:
                window.append(self.train_step())
            if res.terminal:
                self.episode_returns.append(ep_return)
                ep_return = 0.0
                obs = env.reset(int(self.streams.env.integers(2**31)))
            else:
                obs = s_next
            if self.step % cfg.eval_every == 0:
                rec = self._evaluate_record(cfg.eval_episodes, observer, window)
                window = []
                records.append(rec)
                if on_eval is not None:
                    on_eval(self, rec)
        return records

    def _evaluate_record(self, episodes, observer, window) -> MetricsRecord:
        # attacked evaluation replays the clean run's noise draws
        paired_rng = copy.deepcopy(self.streams.eval)
        clean = self.evaluate(episodes)
        extra: dict = {}
        attacked = None
        if observer is not None:
            perturber = observer.eval_perturber(self)
            if perturber is not None:
                attacked = self.evaluate(episodes, perturber, paired_rng)
            extra = observer.extra_metrics()
        shown = attacked if attacked is not None else clean
        rec = MetricsRecord(
            run_id=self.run_id,
            seed=self.config.seed,
            step=self.step,
            return_mean=float(np.mean(shown)),
            return_std=float(np.std(shown)),
            td_loss=float(np.mean(window)) if window else float("nan"),
            exploration=self.exploration_label(),
            clean_return=float(np.mean(clean)),
            episodes=len(shown),
            **extra,
        )
        if observer is not None:
            observer.on_eval(self, float(np.mean(clean)))
        return rec

    def exploration_label(self) -> str:
        if self.config.kind is AgentKind.NOISY:
            return f"noise:{self.config.noise_mode.value}"
        return f"eps:{epsilon(self.step, self.config):.4f}"


def _spec_overrides(env: ToyEnv) -> dict:
    from dataclasses import fields

    from .envs import DEFAULT_SPECS

    default = DEFAULT_SPECS[env.spec.name]
    return {f.name: getattr(env.spec, f.name) for f in fields(env.spec) if getattr(env.spec, f.name) != getattr(default, f.name)}


@dataclass
class TrainingResult:
    trainer: Trainer
    metrics: list[MetricsRecord] = field(default_factory=list)

    @property
    def net(self) -> QNetwork:
        return self.trainer.net


def run_training(env: ToyEnv, config: TrainerConfig, run_id: str = "run", observer=None, on_eval=None) -> TrainingResult:
    trainer = Trainer(env, config, run_id)
    metrics = trainer.run(observer, on_eval)
    return TrainingResult(trainer, metrics)
