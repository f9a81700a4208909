"""Deterministic toy pixel environments and their exact value-iteration oracle.

Observations are two stacked frames, frame t-1 first, each row-major over
``height x width`` cells with intensities in {0, 0.5, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Hashable

import numpy as np

EMPTY, DIM, BRIGHT = 0.0, 0.5, 1.0


class EnvError(RuntimeError):
    """Raised on invalid use of an environment (step after terminal, bad action)."""


@dataclass(frozen=True)
class EnvSpec:
    name: str
    width: int
    height: int
    episode_cap: int
    n_actions: int
    patrol_length: int = 12
    frames: int = 2

    def __post_init__(self):
        if self.width < 4 or self.height < 4:
            raise ValueError(f"{self.name}: grid must be at least 4x4, got {self.width}x{self.height}")
        if self.episode_cap < 10:
            raise ValueError(f"{self.name}: episode cap must be >= 10, got {self.episode_cap}")

    @property
    def obs_length(self) -> int:
        return self.frames * self.width * self.height


@dataclass(frozen=True)
class StepResult:
    obs: np.ndarray
    reward: float
    terminal: bool


class ToyEnv:
    """Shared episode bookkeeping; subclasses define the compact dynamics."""

    spec: EnvSpec
    rewards: frozenset[float]

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self._state: Hashable | None = None
        self._frames: list[np.ndarray] = []
        self._t = 0
        self._done = True

    # -- compact-state interface used by the oracle -------------------------
    def initial_state(self, seed: int) -> Hashable:
        raise NotImplementedError

    def transition(self, state: Hashable, action: int) -> tuple[Hashable, float, bool]:
        raise NotImplementedError

    def states(self) -> list[Hashable]:
        """Every non-terminal compact state."""
        raise NotImplementedError

    def render(self, state: Hashable) -> np.ndarray:
        raise NotImplementedError

    def decode(self, obs: np.ndarray) -> Hashable:
        """Compact state shown in the newest frame of a clean observation."""
        raise NotImplementedError

    # -- episode interface --------------------------------------------------
    @property
    def state(self) -> Hashable:
        return self._state

    @property
    def t(self) -> int:
        return self._t

    def observation(self) -> np.ndarray:
        return np.concatenate(self._frames[-self.spec.frames :])

    def reset(self, episode_seed: int) -> np.ndarray:
        return self.reset_to(self.initial_state(episode_seed))

    def reset_to(self, state: Hashable) -> np.ndarray:
        self._state = state
        frame = self.render(state)
        self._frames = [frame] * self.spec.frames
        self._t = 0
        self._done = False
        return self.observation()

    def step(self, action: int) -> StepResult:
        if self._done:
            raise EnvError(f"{self.spec.name}: step() after terminal; call reset()")
        if not 0 <= int(action) < self.spec.n_actions:
            raise EnvError(f"{self.spec.name}: invalid action {action}")
        nxt, reward, terminal = self.transition(self._state, int(action))
        self._t += 1
        if self._t >= self.spec.episode_cap:
            terminal = True
        self._state = nxt
        self._frames = self._frames[1:] + [self.render(nxt)]
        self._done = terminal
        return StepResult(self.observation(), reward, terminal)


class GridPursuit(ToyEnv):
    """Agent (bright) chases prey (dim) that walks a fixed cyclic patrol.

    Actions: 0 up, 1 down, 2 left, 3 right; walls clamp.  The agent moves,
    then the prey advances one patrol cell; landing on the prey's new cell
    ends the episode with +1, every other step costs 0.01.
    """

    rewards = frozenset({1.0, -0.01})
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
    CATCH, STEP_COST = 1.0, -0.01

    def __init__(self, spec: EnvSpec | None = None):
        super().__init__(spec or EnvSpec("grid_pursuit", 8, 8, 100, 4))
        self.patrol = _rectangle_loop(self.spec.width, self.spec.height, self.spec.patrol_length)
        self._phase_of = {cell: k for k, cell in enumerate(self.patrol)}

    def initial_state(self, seed: int) -> tuple[int, int, int]:
        rng = np.random.default_rng([int(seed), 0x9E11])
        phase = int(rng.integers(len(self.patrol)))
        prey = self.patrol[phase]
        while True:
            cell = (int(rng.integers(self.spec.height)), int(rng.integers(self.spec.width)))
            if cell != prey:
                return (*cell, phase)

    def transition(self, state, action):
        r, c, phase = state
        dr, dc = self.MOVES[action]
        r = min(max(r + dr, 0), self.spec.height - 1)
        c = min(max(c + dc, 0), self.spec.width - 1)
        phase = (phase + 1) % len(self.patrol)
        if (r, c) == self.patrol[phase]:
            return (r, c, phase), self.CATCH, True
        return (r, c, phase), self.STEP_COST, False

    def states(self):
        return [
            (r, c, k)
            for r in range(self.spec.height)
            for c in range(self.spec.width)
            for k in range(len(self.patrol))
            if (r, c) != self.patrol[k]
        ]

    def render(self, state):
        r, c, phase = state
        w = self.spec.width
        frame = np.zeros(w * self.spec.height)
        pr, pc = self.patrol[phase]
        frame[pr * w + pc] = DIM
        frame[r * w + c] = BRIGHT
        return frame

    def decode(self, obs):
        n = self.spec.width * self.spec.height
        frame = np.asarray(obs)[-n:]
        agent = int(np.flatnonzero(frame == BRIGHT)[0])
        prey = int(np.flatnonzero(frame == DIM)[0])
        w = self.spec.width
        return (agent // w, agent % w, self._phase_of[(prey // w, prey % w)])


class Catcher(ToyEnv):
    """An object (bright) falls one row per step; the paddle (dim) must catch it.

    Actions: 0 left, 1 stay, 2 right.  Reaching the bottom row ends the episode
    with +1 if the paddle is under the object and -1 otherwise.
    """

    rewards = frozenset({1.0, -1.0, 0.0})
    MOVES = (-1, 0, 1)

    def __init__(self, spec: EnvSpec | None = None):
        super().__init__(spec or EnvSpec("catcher", 8, 10, 10, 3))

    def initial_state(self, seed: int) -> tuple[int, int, int]:
        rng = np.random.default_rng([int(seed), 0xCA7C])
        w = self.spec.width
        return (0, int(rng.integers(w)), int(rng.integers(w)))

    def transition(self, state, action):
        row, col, paddle = state
        paddle = min(max(paddle + self.MOVES[action], 0), self.spec.width - 1)
        row += 1
        if row == self.spec.height - 1:
            return (row, col, paddle), (1.0 if paddle == col else -1.0), True
        return (row, col, paddle), 0.0, False

    def states(self):
        w = self.spec.width
        return [
            (row, col, p)
            for row in range(self.spec.height - 1)
            for col in range(w)
            for p in range(w)
        ]

    def render(self, state):
        row, col, paddle = state
        w = self.spec.width
        frame = np.zeros(w * self.spec.height)
        frame[(self.spec.height - 1) * w + paddle] = DIM
        frame[row * w + col] = BRIGHT
        return frame

    def decode(self, obs):
        w, h = self.spec.width, self.spec.height
        frame = np.asarray(obs)[-w * h :]
        obj = int(np.flatnonzero(frame == BRIGHT)[0])
        paddle = int(np.flatnonzero(frame[(h - 1) * w :] == DIM)[0])
        return (obj // w, obj % w, paddle)


def _rectangle_loop(width: int, height: int, length: int) -> list[tuple[int, int]]:
    """Clockwise perimeter of a centred square with ``length`` cells."""
    if length % 4 or length < 4:
        raise ValueError(f"patrol length must be a positive multiple of 4, got {length}")
    side = length // 4 + 1
    if side > min(width, height):
        raise ValueError(f"patrol of length {length} does not fit a {width}x{height} grid")
    r0, c0 = (height - side) // 2, (width - side) // 2
    path = [(r0, c0 + k) for k in range(side - 1)]
    path += [(r0 + k, c0 + side - 1) for k in range(side - 1)]
    path += [(r0 + side - 1, c0 + side - 1 - k) for k in range(side - 1)]
    path += [(r0 + side - 1 - k, c0) for k in range(side - 1)]
    return path


ENVIRONMENTS = {"grid_pursuit": GridPursuit, "catcher": Catcher}

DEFAULT_SPECS = {
    "grid_pursuit": EnvSpec("grid_pursuit", 8, 8, 100, 4),
    "catcher": EnvSpec("catcher", 8, 10, 10, 3),
}


def make_env(name: str, **overrides) -> ToyEnv:
    if name not in ENVIRONMENTS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    spec = replace(DEFAULT_SPECS[name], **overrides) if overrides else DEFAULT_SPECS[name]
    return ENVIRONMENTS[name](spec)


@dataclass
class ValueTable:
    values: dict[Hashable, float]
    policy: dict[Hashable, int]
    q: dict[Hashable, np.ndarray]
    residual: float
    sweeps: int


def optimal_values(
    env: ToyEnv,
    gamma: float,
    tol: float = 1e-10,
    max_states: int = 100_000,
    reward_fn=None,
) -> ValueTable:
    """Value iteration on the compact state space (episode cap ignored).

    ``reward_fn(reward) -> reward`` rewrites rewards, e.g. an attacker's R'.
    Greedy ties go to the lowest action index.
    """
    states = env.states()
    if len(states) > max_states:
        raise ValueError(f"{len(states)} states exceed the enumeration cap {max_states}")
    index = {s: i for i, s in enumerate(states)}
    n, m = len(states), env.spec.n_actions
    nxt = np.full((n, m), -1, dtype=np.intp)
    rew = np.zeros((n, m))
    for s, i in index.items():
        for a in range(m):
            s2, r, term = env.transition(s, a)
            rew[i, a] = reward_fn(r) if reward_fn else r
            if not term:
                nxt[i, a] = index[s2]
    cont = nxt >= 0
    safe = np.where(cont, nxt, 0)
    V = np.zeros(n)
    sweeps = 0
    while True:
        Q = rew + gamma * np.where(cont, V[safe], 0.0)
        V_new = Q.max(axis=1)
        residual = float(np.max(np.abs(V_new - V))) if n else 0.0
        V = V_new
        sweeps += 1
        if residual < tol or gamma == 0.0:
            break
        if sweeps > 1_000_000:
            raise RuntimeError("value iteration did not converge")
    Q = rew + gamma * np.where(cont, V[safe], 0.0)
    pi = Q.argmax(axis=1)
    return ValueTable(
        values={s: float(V[i]) for s, i in index.items()},
        policy={s: int(pi[i]) for s, i in index.items()},
        q={s: Q[i] for s, i in index.items()},
        residual=residual,
        sweeps=sweeps,
    )
