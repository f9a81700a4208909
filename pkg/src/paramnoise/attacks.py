"""Adversarial-example attacks on DQN agents.

Covers FGSM crafting (untargeted and targeted), a magnitude-matched
random-sign baseline, blackbox replicas trained only from observed
transitions, test-time attack evaluation, transferability measurement, and
the training-time policy-induction attack.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .agent import (
    AgentKind,
    Learner,
    PolicySnapshot,
    TabularPolicy,
    Trainer,
    TrainerConfig,
    Transition,
    clip_reward,
    eval_seeds,
    evaluate_policy,
    greedy,
    train_step,
)
from .envs import ToyEnv, optimal_values
from .networks import Architecture, Kind, QNetwork, forward, init_parameters, q_values, sample_noise

log = logging.getLogger(__name__)


class AttackError(ValueError):
    """Raised for an invalid attack configuration."""


@dataclass(frozen=True)
class PerturbationBudget:
    """Per-entry max-norm cap on observation perturbations."""

    lam: float

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise AttackError(f"perturbation budget must be finite and >= 0, got {self.lam}")


@dataclass
class AdversarialExample:
    clean: np.ndarray
    delta: np.ndarray
    perturbed: np.ndarray
    mode: str
    target_action: int | None = None
    crafted_on: str = ""
    # targeted: argmax on the crafting net equals target_action;
    # untargeted: argmax on the crafting net moved away from the clean one
    success: bool | None = None

    def check_budget(self, lam: float) -> None:
        if np.max(np.abs(self.delta), initial=0.0) > lam:
            raise AssertionError(f"perturbation exceeds budget {lam}")
        if np.max(np.abs(self.perturbed - self.clean), initial=0.0) > lam:
            raise AssertionError(f"perturbed observation moved more than {lam}")
        if self.perturbed.min(initial=0.0) < 0.0 or self.perturbed.max(initial=1.0) > 1.0:
            raise AssertionError("perturbed observation left [0, 1]")


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def ce_input_gradient(net: QNetwork, obs: np.ndarray, label: int, backend: str = "kernel") -> np.ndarray:
    """d/d obs of -log softmax(Q(obs, .))[label]."""
    if backend == "autodiff":
        fw = forward(net, obs)
        loss = ad.cross_entropy_on_logits(fw.q, label)
        return ad.backward(fw.record, loss)[fw.obs][0]
    weights = net.effective_weights()
    q = kernels.mlp_forward(weights, obs[None, :])[0]
    gq = softmax(q)
    gq[label] -= 1.0
    return kernels.input_grad(weights, obs, gq)


def neg_q_input_gradient(net: QNetwork, obs: np.ndarray, label: int, backend: str = "kernel") -> np.ndarray:
    """d/d obs of -Q(obs, label)."""
    if backend == "autodiff":
        fw = forward(net, obs[None, :])
        loss = ad.scale(ad.pick(fw.q, [label]), -1.0)
        return ad.backward(fw.record, ad.total(loss))[fw.obs][0]
    gq = np.zeros(net.arch.n_actions)
    gq[label] = -1.0
    return kernels.input_grad(net.effective_weights(), obs, gq)


# surrogate losses FGSM can ascend; "ce" treats the greedy action as a class label
LOSSES = {"ce": ce_input_gradient, "neg_q": neg_q_input_gradient}


def loss_gradient(loss: str):
    try:
        return LOSSES[loss]
    except KeyError:
        raise AttackError(f"unknown FGSM loss {loss!r}; choose from {sorted(LOSSES)}") from None


def _apply(obs: np.ndarray, delta: np.ndarray) -> np.ndarray:
    lam = np.max(np.abs(delta), initial=0.0)
    out = np.clip(obs + delta, 0.0, 1.0)
    # obs + delta can round one ulp past the budget; step back toward obs
    over = np.abs(out - obs) > lam
    while over.any():
        out[over] = np.nextafter(out[over], obs[over])
        over = np.abs(out - obs) > lam
    return out


def fgsm_untargeted(
    net: QNetwork, obs, lam: float, name: str = "", backend: str = "kernel", loss: str = "ce"
) -> AdversarialExample:
    """Step of size lam along the sign of the loss gradient for the currently greedy action."""
    lam = PerturbationBudget(lam).lam
    grad = loss_gradient(loss)
    obs = np.asarray(obs, dtype=np.float64)
    q_clean = q_values(net, obs)
    a_star = greedy(q_clean)
    delta = lam * np.sign(grad(net, obs, a_star, backend))
    perturbed = _apply(obs, delta)
    success = greedy(q_values(net, perturbed)) != a_star
    return AdversarialExample(obs, delta, perturbed, "untargeted", None, name, success)


def fgsm_targeted(
    net: QNetwork, obs, a_adv: int, lam: float, name: str = "", backend: str = "kernel", loss: str = "ce"
) -> AdversarialExample:
    """Step of size lam against the loss gradient for ``a_adv``."""
    lam = PerturbationBudget(lam).lam
    grad = loss_gradient(loss)
    if not 0 <= a_adv < net.arch.n_actions:
        raise AttackError(f"target action {a_adv} out of range for {net.arch.n_actions} actions")
    obs = np.asarray(obs, dtype=np.float64)
    delta = -lam * np.sign(grad(net, obs, a_adv, backend))
    perturbed = _apply(obs, delta)
    success = greedy(q_values(net, perturbed)) == a_adv
    return AdversarialExample(obs, delta, perturbed, "targeted", int(a_adv), name, success)


def random_noise_baseline(obs, lam: float, rng: np.random.Generator) -> AdversarialExample:
    """Uniform random signs scaled to lam: same max-norm as FGSM."""
    lam = PerturbationBudget(lam).lam
    obs = np.asarray(obs, dtype=np.float64)
    delta = lam * (2.0 * rng.integers(0, 2, size=obs.shape) - 1.0)
    return AdversarialExample(obs, delta, _apply(obs, delta), "random", None, "random")


# -- crafting sources -------------------------------------------------------


class CraftingNet:
    """The network an attacker differentiates through.

    A noisy network is evaluated with noise the attacker draws itself: the
    model (mu, sigma) is known, the victim's per-decision draw is not.
    """

    def __init__(self, net: QNetwork, rng: np.random.Generator | None = None, name: str = ""):
        self.net = net.copy()
        self.rng = rng
        self.name = name
        self.noisy = self.net.kind is Kind.NOISY and self.net.use_noise
        if self.noisy and rng is None:
            raise AttackError("crafting on a noisy network needs an rng for its noise draws")

    def current(self) -> QNetwork:
        if self.noisy:
            sample_noise(self.net, self.rng)
        return self.net


# -- replica ----------------------------------------------------------------


@dataclass
class Replica:
    """Attacker's stand-in DQN, trained only from observed transitions."""

    learner: Learner
    config: TrainerConfig
    rng: np.random.Generator
    noise_rng: np.random.Generator
    steps: int = 0

    @classmethod
    def create(cls, arch: Architecture, config: TrainerConfig, seed: int) -> "Replica":
        from .seeding import Streams

        streams = Streams(seed)
        net = init_parameters(arch, streams.replica)
        # own replay/noise streams so batches never line up with the target's
        noise = streams.replica_noise
        return cls(Learner.create(net, config.buffer_capacity, noise), config, streams.replica_replay, noise)

    @property
    def net(self) -> QNetwork:
        return self.learner.net

    @property
    def crafting_net(self) -> QNetwork:
        """The replica's frozen target copy, used for training-time crafting."""
        return self.learner.target.net

    def observe(self, t: Transition) -> float | None:
        self.learner.buffer.push(t)
        self.steps += 1
        if self.steps >= self.config.learning_start and len(self.learner.buffer) >= self.config.batch_size:
            return train_step(self.learner, self.config, self.rng, self.noise_rng)
        return None


def replica_config(target_config: TrainerConfig, kind: str = "plain") -> TrainerConfig:
    """Attacker's estimate of the target's training setup."""
    cfg = copy.deepcopy(target_config)
    if kind == "plain":
        cfg.kind = AgentKind.EPS_GREEDY
    elif kind != "same":
        raise AttackError(f"replica kind must be 'plain' or 'same', got {kind!r}")
    return cfg


def replica_architecture(arch: Architecture, kind: str = "plain", hidden: Sequence[int] | None = None) -> Architecture:
    return Architecture(
        arch.input_width,
        arch.n_actions,
        tuple(hidden) if hidden is not None else arch.hidden,
        Kind.PLAIN if kind == "plain" else arch.kind,
        arch.sigma0,
    )


def train_replica(replica: Replica, observed: Sequence[Transition]) -> Replica:
    for t in observed:
        replica.observe(Transition(t.s, t.a, clip_reward(t.r), t.s_next, t.terminal))
    return replica


class ReplicaObserver:
    """Passive attacker: watches a training run and fits its replica, never perturbs."""

    def __init__(self, replica: Replica):
        self.replica = replica

    def intercept(self, trainer, s, a, r, s_next, terminal):
        self.replica.observe(Transition(s, a, clip_reward(r), s_next, terminal))
        return s_next

    def on_eval(self, trainer, mean_return: float) -> None:
        pass

    def eval_perturber(self, trainer):
        return None

    def extra_metrics(self) -> dict:
        return {}


def rollout_transitions(
    policy, env: ToyEnv, steps: int, rng: np.random.Generator
) -> list[Transition]:
    """Observe ``policy`` interacting with ``env`` for ``steps`` environment steps."""
    out: list[Transition] = []
    obs = env.reset(int(rng.integers(2**31)))
    while len(out) < steps:
        a = policy.act(obs)
        res = env.step(a)
        out.append(Transition(obs, a, res.reward, res.obs, res.terminal))
        obs = env.reset(int(rng.integers(2**31))) if res.terminal else res.obs
    return out


def sample_states(env: ToyEnv, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` distinct-episode observations visited by a uniformly random walker."""
    states = []
    while len(states) < n:
        obs = env.reset(int(rng.integers(2**31)))
        depth = int(rng.integers(0, env.spec.episode_cap))
        for _ in range(depth):
            res = env.step(int(rng.integers(env.spec.n_actions)))
            if res.terminal:
                break
            obs = res.obs
        states.append(obs)
    return np.stack(states)


def agreement_rate(a, b, states: np.ndarray) -> float:
    """Fraction of states where two networks (or policies) pick the same greedy action."""
    qa = a.q(states) if hasattr(a, "q") else q_values(a, states)
    qb = b.q(states) if hasattr(b, "q") else q_values(b, states)
    return float(np.mean(np.argmax(qa, axis=1) == np.argmax(qb, axis=1)))


# -- test-time attack -------------------------------------------------------


@dataclass
class AttackReport:
    clean: list[float]
    random: list[float]
    adversarial: list[float]
    attack_success: float
    transfer_rate: float
    lam: float
    mode: str
    source: str
    agreement: float | None = None

    @staticmethod
    def _mean(xs):
        return float(np.mean(xs)) if len(xs) else float("nan")

    @property
    def clean_mean(self) -> float:
        return self._mean(self.clean)

    @property
    def random_mean(self) -> float:
        return self._mean(self.random)

    @property
    def adversarial_mean(self) -> float:
        return self._mean(self.adversarial)

    def degradation(self, condition: str = "adversarial") -> float:
        """(clean - attacked) / |clean| for the given condition."""
        attacked = self._mean(getattr(self, condition))
        return (self.clean_mean - attacked) / abs(self.clean_mean) if self.clean_mean else float("nan")


def _untargeted_loop(
    victim: PolicySnapshot,
    env: ToyEnv,
    craft: Callable[[np.ndarray], AdversarialExample],
    seeds: Sequence[int],
    lam: float,
) -> tuple[list[float], int, int, int]:
    """Adversarial episodes; returns (returns, steps, source successes, victim flips)."""
    returns, steps, successes, flips = [], 0, 0, 0
    for seed in seeds:
        obs = env.reset(seed)
        total, done = 0.0, False
        while not done:
            victim.resample()
            a_clean = greedy(victim.q(obs))
            ex = craft(obs)
            ex.check_budget(lam)
            a = greedy(victim.q(ex.perturbed))
            steps += 1
            successes += bool(ex.success)
            flips += a != a_clean
            res = env.step(a)
            total += res.reward
            obs, done = res.obs, res.terminal
        returns.append(total)
    return returns, steps, successes, flips


def test_time_attack(
    target: PolicySnapshot,
    env: ToyEnv,
    source: str,
    lam: float,
    episodes: int,
    rng: np.random.Generator,
    replica: QNetwork | None = None,
    loss: str = "ce",
) -> AttackReport:
    """Clean, random-sign, and FGSM-perturbed evaluation of one target policy.

    ``source`` is ``whitebox`` (craft on the target's own model) or
    ``blackbox`` (craft on ``replica``).  Each condition replays the same
    victim noise draws and episode seeds.
    """
    lam = PerturbationBudget(lam).lam
    if source not in ("whitebox", "blackbox"):
        raise AttackError(f"source must be 'whitebox' or 'blackbox', got {source!r}")
    if source == "blackbox" and replica is None:
        raise AttackError("blackbox attack needs a trained replica")
    if target.noisy and target.rng is None:
        raise AttackError("a sampling noisy target needs its own rng")

    victim_rng_state = copy.deepcopy(target.rng)
    random_rng, craft_rng = rng.spawn(2)
    seeds = eval_seeds(episodes)

    def fresh_victim() -> PolicySnapshot:
        return PolicySnapshot(target.net.copy(), target.noise_mode, copy.deepcopy(victim_rng_state))

    clean = evaluate_policy(fresh_victim(), env, episodes, seeds=seeds)
    rand = evaluate_policy(
        fresh_victim(), env, episodes, lambda o: random_noise_baseline(o, lam, random_rng).perturbed, seeds
    )
    crafting = CraftingNet(target.net if source == "whitebox" else replica, craft_rng, source)
    adv, steps, successes, flips = _untargeted_loop(
        fresh_victim(), env, lambda o: fgsm_untargeted(crafting.current(), o, lam, source, loss=loss), seeds, lam
    )
    return AttackReport(
        clean=clean,
        random=rand,
        adversarial=adv,
        attack_success=successes / steps if steps else 0.0,
        transfer_rate=flips / steps if steps else 0.0,
        lam=lam,
        mode="untargeted",
        source=source,
    )


# not a pytest test despite the name
test_time_attack.__test__ = False


def transferability_rate(
    source: QNetwork,
    victim: QNetwork,
    states: np.ndarray,
    lam: float,
    rng: np.random.Generator,
    mode: str = "untargeted",
    targets: Sequence[int] | None = None,
    loss: str = "ce",
) -> float:
    """Fraction of states where an example crafted on ``source`` changes ``victim``.

    Untargeted: the victim's greedy action moves.  Targeted: it becomes
    ``targets[i]``.  A noisy victim is compared under one shared noise draw
    per state so only the perturbation can cause a change.
    """
    lam = PerturbationBudget(lam).lam
    if len(states) == 0:
        raise AttackError("transferability needs a non-empty state sample")
    if mode == "targeted" and targets is None:
        raise AttackError("targeted transferability needs target actions")
    crafting = CraftingNet(source, rng, "source")
    vict = victim.copy()
    noisy_victim = vict.kind is Kind.NOISY and vict.use_noise
    hits = 0
    for i, obs in enumerate(states):
        if mode == "targeted":
            ex = fgsm_targeted(crafting.current(), obs, int(targets[i]), lam, loss=loss)
        else:
            ex = fgsm_untargeted(crafting.current(), obs, lam, loss=loss)
        if noisy_victim:
            sample_noise(vict, rng)
        q_adv = q_values(vict, ex.perturbed)
        if mode == "targeted":
            hits += greedy(q_adv) == targets[i]
        else:
            hits += greedy(q_adv) != greedy(q_values(vict, obs))
    return hits / len(states)


# -- training-time policy induction -----------------------------------------


def adversarial_policy(env: ToyEnv, gamma: float = 0.99, kind: str = "negated", action: int = 0):
    """Attacker's target policy.

    ``negated`` is optimal for R' = -R (computed exactly on the toy MDP);
    ``fixed`` always asks for ``action``.
    """
    if kind == "negated":
        return TabularPolicy(env, optimal_values(env, gamma, reward_fn=lambda r: -r))
    if kind == "fixed":
        return FixedActionPolicy(action)
    raise AttackError(f"unknown adversarial policy {kind!r}")


@dataclass
class FixedActionPolicy:
    action: int

    def act(self, obs) -> int:
        return self.action


class PolicyInductionAttacker:
    """Runs the observe / craft / reveal / retrain cycle alongside a training target.

    Plugs into :meth:`Trainer.run` as its observer.  Before the trigger the
    attacker only watches and trains its replica; afterwards every
    non-terminal next state is replaced by an FGSM example that makes the
    replica's frozen target net prefer the adversarial policy's action.
    """

    def __init__(
        self,
        policy,
        replica: Replica,
        lam: float,
        trigger_return: float | None,
        attack_rate: float = 1.0,
        rng: np.random.Generator | None = None,
        loss: str = "ce",
    ):
        self.lam = PerturbationBudget(lam).lam
        self.loss = loss
        loss_gradient(loss)
        self.policy = policy
        self.replica = replica
        self.trigger_return = trigger_return
        self.attack_rate = attack_rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        # no trigger return: armed from the first step
        self.triggered_at: int | None = 0 if trigger_return is None else None
        self._pending: int | None = None
        self.window_steps = 0
        self.window_hits = 0
        self.total_steps = 0
        self.total_hits = 0
        self.ignored = 0

    @property
    def triggered(self) -> bool:
        return self.triggered_at is not None

    def craft(self, obs) -> AdversarialExample:
        a_adv = self.policy.act(obs)
        ex = fgsm_targeted(self.replica.crafting_net, obs, a_adv, self.lam, "replica", loss=self.loss)
        ex.check_budget(self.lam)
        return ex

    def intercept(self, trainer: Trainer, s, a, r, s_next, terminal):
        if self._pending is not None:
            self.window_steps += 1
            self.total_steps += 1
            hit = int(a == self._pending)
            self.window_hits += hit
            self.total_hits += hit
            self._pending = None
        seen = s_next
        if not terminal:
            if self.triggered and (self.attack_rate >= 1.0 or self.rng.random() < self.attack_rate):
                ex = self.craft(s_next)
                seen = ex.perturbed
                self._pending = ex.target_action
            elif not self.triggered:
                self.ignored += 1
        self.replica.observe(Transition(s, a, clip_reward(r), seen, terminal))
        return seen

    def on_eval(self, trainer: Trainer, mean_return: float) -> None:
        if not self.triggered and mean_return >= self.trigger_return:
            self.triggered_at = trainer.step
            log.info("policy-induction attack triggered at step %d", trainer.step)

    def eval_perturber(self, trainer: Trainer):
        if not self.triggered:
            return None
        return lambda obs: self.craft(obs).perturbed

    def extra_metrics(self) -> dict:
        if not self.triggered:
            return {"attack_success": None}
        rate = self.window_hits / self.window_steps if self.window_steps else None
        self.window_steps = self.window_hits = 0
        return {"attack_success": rate}

    @property
    def success_rate(self) -> float:
        return self.total_hits / self.total_steps if self.total_steps else 0.0


@dataclass
class InductionResult:
    metrics: list
    report: AttackReport
    trainer: Trainer
    attacker: PolicyInductionAttacker
    final_returns: list[float] = field(default_factory=list)
    final_clean: list[float] = field(default_factory=list)


def policy_induction_attack(
    target_trainer: Trainer,
    policy,
    replica: Replica,
    lam: float,
    trigger_return: float | None,
    attack_rate: float = 1.0,
    rng: np.random.Generator | None = None,
    loss: str = "ce",
) -> InductionResult:
    """Train ``target_trainer`` to completion under the policy-induction attack.

    The final report evaluates the trained target on the eval seeds with
    the attacker still active (adversarial) and without it (clean).
    """
    attacker = PolicyInductionAttacker(policy, replica, lam, trigger_return, attack_rate, rng, loss)
    metrics = target_trainer.run(observer=attacker)
    episodes = target_trainer.config.final_eval_episodes
    paired = copy.deepcopy(target_trainer.streams.eval)
    clean = target_trainer.evaluate(episodes)
    perturber = attacker.eval_perturber(target_trainer)
    attacked = target_trainer.evaluate(episodes, perturber, paired) if perturber else list(clean)
    report = AttackReport(
        clean=clean,
        random=[],
        adversarial=attacked,
        attack_success=attacker.success_rate,
        transfer_rate=float("nan"),
        lam=attacker.lam,
        mode="targeted",
        source="replica",
    )
    return InductionResult(metrics, report, target_trainer, attacker, attacked, clean)
