"""Run orchestration behind the CLI: training, attacks, replicas, and the canned suites.

Every run writes into its own directory: an audit copy of the resolved
config, CSV tables, checkpoints, and a manifest written last.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import (
    AgentKind,
    PolicySnapshot,
    Trainer,
    TrainerConfig,
    Transition,
    greedy,
    oracle_return,
)
from .attacks import (
    AttackReport,
    Replica,
    ReplicaObserver,
    adversarial_policy,
    agreement_rate,
    policy_induction_attack,
    replica_architecture,
    replica_config,
    sample_states,
    test_time_attack,
    transferability_rate,
)
from .config import ExperimentConfig
from .envs import ToyEnv, optimal_values
from .networks import ArchitectureError, QNetwork, load_checkpoint, q_values, save_checkpoint
from .seeding import substream
from .tables import RunManifest, atomic_write_text, write_table

log = logging.getLogger(__name__)

AGENTS = ("eps_greedy", "noisy")


def run_id(env: str, agent: str, seed: int, tag: str = "") -> str:
    return f"{env}-{agent}-s{seed}" + (f"-{tag}" if tag else "")


def metrics_rows(records, variant: str) -> list[dict]:
    rows = []
    for rec in records:
        rows.append(
            {
                "run_id": rec.run_id,
                "variant": variant,
                "seed": rec.seed,
                "step": rec.step,
                "return_mean": rec.return_mean,
                "return_std": rec.return_std,
                "return_stderr": rec.return_std / np.sqrt(max(1, rec.episodes)),
                "td_loss": rec.td_loss,
                "exploration": rec.exploration,
                "clean_return": rec.clean_return,
                "attack_success": rec.attack_success,
                "transfer_rate": rec.transfer_rate,
            }
        )
    return rows


class Audit:
    """Output directory bookkeeping: config copy first, manifest last."""

    def __init__(self, out: Path, command: str, cfg: ExperimentConfig):
        self.out = Path(out)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            atomic_write_text(self.out / "config.ini", cfg.text)
        except OSError as exc:
            raise RunError(f"output directory {self.out} is not writable: {exc}") from exc
        self.manifest = RunManifest(command=command, config_hash=cfg.digest)
        self.start = time.perf_counter()

    def checkpoint(self, path: Path) -> None:
        self.manifest.checkpoints.append(str(Path(path).relative_to(self.out)))

    def output(self, path: Path) -> None:
        self.manifest.outputs.append(str(Path(path).relative_to(self.out)))

    def finish(self, status: str = "complete", message: str = "") -> None:
        self.manifest.status = status
        self.manifest.message = message
        self.manifest.wall_clock_seconds = time.perf_counter() - self.start
        self.manifest.write(self.out / "manifest.ini")


class RunError(RuntimeError):
    """A run could not complete (missing inputs, unwritable output, ...)."""


# -- replica helpers --------------------------------------------------------


def make_replica(cfg: ExperimentConfig, tcfg: TrainerConfig, env: ToyEnv, seed: int) -> Replica:
    rc = cfg.attack.replica
    arch = replica_architecture(tcfg.architecture(env), rc.kind, rc.hidden)
    return Replica.create(arch, replica_config(tcfg, rc.kind), seed)


def shared_states(env: ToyEnv, n: int, seed: int) -> np.ndarray:
    """State sample shared by every agent kind evaluated under ``seed``."""
    return sample_states(env, n, substream(seed, "states"))


def deterministic_policy_net(net: QNetwork) -> QNetwork:
    """Mean-weight view of a noisy net; plain nets unchanged."""
    out = net.copy()
    out.use_noise = False
    return out


# -- train ------------------------------------------------------------------


@dataclass
class TrainOutcome:
    trainer: Trainer
    metrics: list
    replica: Replica | None
    directory: Path
    final_returns: list[float] = field(default_factory=list)
    oracle: float = float("nan")


def _oracle(env: ToyEnv, gamma: float, episodes: int) -> float:
    return oracle_return(env, optimal_values(env, gamma), episodes)


def train_one(
    cfg: ExperimentConfig,
    seed: int,
    out: Path,
    audit: Audit,
    with_replica: bool = False,
) -> TrainOutcome:
    env = cfg.make_env()
    tcfg = cfg.trainer_for(seed)
    rid = run_id(env.spec.name, tcfg.kind.value, seed)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(env, tcfg, rid)
    replica = make_replica(cfg, tcfg, env, seed) if with_replica else None
    every = tcfg.eval_every if cfg.checkpoint_every is None else cfg.checkpoint_every

    def on_eval(tr: Trainer, rec) -> None:
        if every and tr.step % every == 0 and tr.step < tcfg.total_steps:
            path = out / "checkpoints" / f"step_{tr.step:09d}.ckpt"
            save_checkpoint(tr.net, path, seed=seed, step=tr.step)
            audit.checkpoint(path)

    metrics = trainer.run(ReplicaObserver(replica) if replica else None, on_eval)
    final = out / "final.ckpt"
    save_checkpoint(trainer.net, final, seed=seed, step=trainer.step)
    audit.checkpoint(final)
    if replica is not None:
        path = out / "replica.ckpt"
        save_checkpoint(replica.net, path, seed=seed, step=replica.steps)
        audit.checkpoint(path)
    table = out / "metrics.csv"
    write_table(table, "metrics/1", metrics_rows(metrics, "train"))
    audit.output(table)

    returns = trainer.evaluate(tcfg.final_eval_episodes)
    oracle = _oracle(env, tcfg.gamma, tcfg.final_eval_episodes)
    final_table = out / "final.csv"
    write_table(
        final_table,
        "final/1",
        [
            {
                "run_id": rid,
                "seed": seed,
                "env": env.spec.name,
                "agent": tcfg.kind.value,
                "variant": "train",
                "episodes": len(returns),
                "final_return": float(np.mean(returns)),
                "final_clean_return": float(np.mean(returns)),
                "oracle_return": oracle,
            }
        ],
    )
    audit.output(final_table)
    return TrainOutcome(trainer, metrics, replica, out, returns, oracle)


def cli_train(cfg: ExperimentConfig, with_replica: bool = False) -> list[TrainOutcome]:
    audit = Audit(Path(cfg.out), "train", cfg)
    outcomes = []
    try:
        for seed in cfg.seeds:
            outcomes.append(train_one(cfg, seed, audit.out / f"seed_{seed}", audit, with_replica))
    except BaseException as exc:
        audit.finish("failed", repr(exc))
        raise
    audit.finish()
    return outcomes


# -- test-time attack -------------------------------------------------------


def load_target(cfg: ExperimentConfig, env: ToyEnv, seed: int, path: str | Path) -> QNetwork:
    if not path or not Path(path).exists():
        raise RunError(f"missing target checkpoint: {path!r}")
    expect = cfg.trainer_for(seed).architecture(env)
    return load_checkpoint(path, expect=expect).net


def load_replica(env: ToyEnv, path: str | Path) -> QNetwork:
    if not path or not Path(path).exists():
        raise RunError(f"missing replica checkpoint: {path!r}")
    net = load_checkpoint(path).net
    if net.arch.input_width != env.spec.obs_length or net.arch.n_actions != env.spec.n_actions:
        raise ArchitectureError(
            f"replica {net.arch.describe()} does not fit {env.spec.name} "
            f"({env.spec.obs_length} inputs, {env.spec.n_actions} actions)"
        )
    return net


def attack_rows(report: AttackReport, rid: str, seed: int, env: str, agent: str) -> list[dict]:
    base = {"run_id": rid, "seed": seed, "env": env, "agent": agent, "source": report.source,
            "mode": report.mode, "lam": report.lam}
    rows = []
    for condition in ("clean", "random", "adversarial"):
        for i, ret in enumerate(getattr(report, condition)):
            rows.append({**base, "condition": condition, "episode": i, "return": ret})
    rows.append(
        {
            **base,
            "condition": "summary",
            "clean_mean": report.clean_mean,
            "random_mean": report.random_mean,
            "adversarial_mean": report.adversarial_mean,
            "degradation": report.degradation("adversarial"),
            "random_degradation": report.degradation("random"),
            "attack_success": report.attack_success,
            "transfer_rate": report.transfer_rate,
            "agreement": report.agreement,
        }
    )
    return rows


def attack_test_one(
    cfg: ExperimentConfig,
    seed: int,
    target: QNetwork,
    replica: QNetwork | None,
    source: str,
) -> AttackReport:
    env = cfg.make_env()
    tcfg = cfg.trainer_for(seed)
    snapshot = PolicySnapshot.of(target, tcfg.noise_mode, substream(seed, "eval"))
    report = test_time_attack(
        snapshot, env, source, cfg.attack.lam, cfg.attack.episodes, substream(seed, "attack"), replica,
        cfg.attack.loss,
    )
    if replica is not None:
        states = shared_states(env, cfg.attack.states, seed)
        report.agreement = agreement_rate(replica, deterministic_policy_net(target), states)
    return report


def cli_attack_test(cfg: ExperimentConfig) -> list[AttackReport]:
    audit = Audit(Path(cfg.out), "attack-test", cfg)
    reports = []
    try:
        env = cfg.make_env()
        a = cfg.attack
        seed = cfg.seeds[0]
        target = load_target(cfg, env, seed, a.target_checkpoint)
        replica = None
        if a.source == "blackbox":
            replica = load_replica(env, a.replica_checkpoint)
        report = attack_test_one(cfg, seed, target, replica, a.source)
        path = audit.out / "report.csv"
        agent = cfg.trainer.kind.value
        write_table(path, "attack/1", attack_rows(report, run_id(env.spec.name, agent, seed), seed, env.spec.name, agent))
        audit.output(path)
        reports.append(report)
    except BaseException as exc:
        audit.finish("failed", repr(exc))
        raise
    audit.finish()
    return reports


# -- training-time attack ---------------------------------------------------


@dataclass
class InductionOutcome:
    control: Trainer
    attacked: Trainer
    control_metrics: list
    attacked_metrics: list
    control_final: list[float]
    attacked_final: list[float]
    attacked_clean_final: list[float]
    attack_success: float
    triggered_at: int | None
    oracle: float


def interleave(control_rows: list[dict], attacked_rows: list[dict]) -> list[dict]:
    order = {"control": 0, "attacked": 1}
    return sorted(control_rows + attacked_rows, key=lambda r: (r["step"], order[r["variant"]]))


def attack_train_one(cfg: ExperimentConfig, seed: int, out: Path, audit: Audit) -> InductionOutcome:
    env = cfg.make_env()
    tcfg = cfg.trainer_for(seed)
    a = cfg.attack
    agent = tcfg.kind.value
    out.mkdir(parents=True, exist_ok=True)

    control = Trainer(env, tcfg, run_id(env.spec.name, agent, seed, "control"))
    control_metrics = control.run()
    control_final = control.evaluate(tcfg.final_eval_episodes)

    oracle = _oracle(env, tcfg.gamma, tcfg.eval_episodes)
    attacked = Trainer(env, tcfg, run_id(env.spec.name, agent, seed, "attacked"))
    policy = adversarial_policy(env, tcfg.gamma, a.adversary, a.adversary_action)
    replica = make_replica(cfg, tcfg, env, seed)
    result = policy_induction_attack(
        attacked, policy, replica, a.lam, a.trigger * oracle if a.trigger > 0 else None, a.rate, substream(seed, "attack"),
        a.loss,
    )

    for name, net in (("control.ckpt", control.net), ("attacked.ckpt", attacked.net), ("replica.ckpt", replica.net)):
        save_checkpoint(net, out / name, seed=seed, step=tcfg.total_steps)
        audit.checkpoint(out / name)
    table = out / "metrics.csv"
    write_table(
        table,
        "metrics/1",
        interleave(metrics_rows(control_metrics, "control"), metrics_rows(result.metrics, "attacked")),
    )
    audit.output(table)
    triggered = result.attacker.triggered_at
    base = {"seed": seed, "env": env.spec.name, "agent": agent, "lam": a.lam,
            "episodes": tcfg.final_eval_episodes, "oracle_return": oracle}
    final_rows = [
        {**base, "run_id": control.run_id, "variant": "control",
         "final_return": float(np.mean(control_final)), "final_clean_return": float(np.mean(control_final))},
        {**base, "run_id": attacked.run_id, "variant": "attacked",
         "final_return": float(np.mean(result.final_returns)),
         "final_clean_return": float(np.mean(result.final_clean)),
         "attack_success": result.attacker.success_rate if triggered is not None else None,
         "triggered_at": triggered},
    ]
    final_table = out / "final.csv"
    write_table(final_table, "final/1", final_rows)
    audit.output(final_table)
    return InductionOutcome(
        control, attacked, control_metrics, result.metrics, control_final, result.final_returns,
        result.final_clean, result.attacker.success_rate, triggered, oracle,
    )


def cli_attack_train(cfg: ExperimentConfig) -> list[InductionOutcome]:
    audit = Audit(Path(cfg.out), "attack-train", cfg)
    outcomes = []
    try:
        for seed in cfg.seeds:
            outcomes.append(attack_train_one(cfg, seed, audit.out / f"seed_{seed}", audit))
    except BaseException as exc:
        audit.finish("failed", repr(exc))
        raise
    audit.finish()
    return outcomes


# -- replicate --------------------------------------------------------------


class ObservedTarget:
    """The target's behaviour as an outside observer sees it.

    Noisy targets sample fresh noise per decision; plain targets act
    epsilon-greedily with a small residual epsilon.
    """

    def __init__(self, net: QNetwork, explore: float, seed: int):
        self.net = net.copy()
        self.noisy = self.net.kind.value == "noisy"
        self.explore = explore
        self.rng = substream(seed, "noise" if self.noisy else "explore")

    def act(self, obs) -> int:
        if self.noisy:
            from .networks import sample_noise

            sample_noise(self.net, self.rng)
        elif self.rng.random() < self.explore:
            return int(self.rng.integers(self.net.arch.n_actions))
        return greedy(q_values(self.net, obs))


def replicate_one(cfg: ExperimentConfig, seed: int, target: QNetwork, out: Path, audit: Audit) -> Replica:
    env = cfg.make_env()
    tcfg = cfg.trainer_for(seed)
    rc = cfg.attack.replica
    replica = make_replica(cfg, tcfg, env, seed)
    states = shared_states(env, cfg.attack.states, seed)
    reference = deterministic_policy_net(target)
    behaviour = ObservedTarget(target, rc.explore, seed)
    env_rng = substream(seed, "env")
    rid = run_id(env.spec.name, tcfg.kind.value, seed, "replica")
    rows = [{"run_id": rid, "seed": seed, "observed_steps": 0,
             "agreement": agreement_rate(replica.net, reference, states)}]
    obs = env.reset(int(env_rng.integers(2**31)))
    for step in range(1, rc.steps + 1):
        a = behaviour.act(obs)
        res = env.step(a)
        replica.observe(Transition(obs, a, res.reward, res.obs, res.terminal))
        obs = env.reset(int(env_rng.integers(2**31))) if res.terminal else res.obs
        if step % rc.eval_every == 0 or step == rc.steps:
            rows.append({"run_id": rid, "seed": seed, "observed_steps": step,
                         "agreement": agreement_rate(replica.net, reference, states)})
    out.mkdir(parents=True, exist_ok=True)
    path = out / "replica.ckpt"
    save_checkpoint(replica.net, path, seed=seed, step=replica.steps)
    audit.checkpoint(path)
    table = out / "agreement.csv"
    write_table(table, "agreement/1", rows)
    audit.output(table)
    return replica


def cli_replicate(cfg: ExperimentConfig) -> Replica:
    audit = Audit(Path(cfg.out), "replicate", cfg)
    try:
        env = cfg.make_env()
        seed = cfg.seeds[0]
        target = load_target(cfg, env, seed, cfg.attack.target_checkpoint)
        replica = replicate_one(cfg, seed, target, audit.out, audit)
    except BaseException as exc:
        audit.finish("failed", repr(exc))
        raise
    audit.finish()
    return replica


# -- canned suites ----------------------------------------------------------


def _with(cfg: ExperimentConfig, env_name: str, agent: str) -> ExperimentConfig:
    out = copy.deepcopy(cfg)
    if env_name != cfg.env_name:
        out.env_name, out.env_overrides = env_name, {}
    out.trainer.kind = AgentKind(agent)
    return out


def suite_test_time(cfg: ExperimentConfig, envs=("grid_pursuit", "catcher"), agents=AGENTS) -> Path:
    """Train both agent kinds per env and seed (replicas watching), then attack them at test time."""
    from .compare import compare_files

    audit = Audit(Path(cfg.out), "suite-test-time", cfg)
    try:
        for env_name in envs:
            transfer_rows = []
            for seed in cfg.seeds:
                for agent in agents:
                    sub = _with(cfg, env_name, agent)
                    d = audit.out / env_name / agent / f"seed_{seed}"
                    log.info("suite-test-time: %s %s seed %d", env_name, agent, seed)
                    done = train_one(sub, seed, d, audit, with_replica=True)
                    env = sub.make_env()
                    target = load_target(sub, env, seed, d / "final.ckpt")
                    replica = load_replica(env, d / "replica.ckpt")
                    for source in ("whitebox", "blackbox"):
                        report = attack_test_one(sub, seed, target, replica if source == "blackbox" else None, source)
                        path = d / f"attack_{source}.csv"
                        write_table(path, "attack/1", attack_rows(report, done.trainer.run_id, seed, env_name, agent))
                        audit.output(path)
                    states = shared_states(env, sub.attack.states, seed)
                    transfer_rows.append(
                        {
                            "env": env_name,
                            "seed": seed,
                            "agent": agent,
                            "lam": sub.attack.lam,
                            "states": len(states),
                            "rate": transferability_rate(
                                replica, target, states, sub.attack.lam, substream(seed, "transfer"), loss=sub.attack.loss
                            ),
                            "agreement": agreement_rate(replica, deterministic_policy_net(target), states),
                        }
                    )
            path = audit.out / env_name / "transfer.csv"
            write_table(path, "transfer/1", transfer_rows)
            audit.output(path)
        compare_files(sorted(audit.out.rglob("*.csv"), key=str), audit.out / "summary", kinds=("final/1", "attack/1", "transfer/1"), strict=False)
        audit.output(audit.out / "summary.csv")
    except BaseException as exc:
        audit.finish("failed", repr(exc))
        raise
    audit.finish()
    return audit.out


def suite_train_time(cfg: ExperimentConfig, envs=("grid_pursuit",), agents=AGENTS) -> Path:
    """Policy-induction attack vs matched unattacked control for both agent kinds."""
    from .compare import compare_files

    audit = Audit(Path(cfg.out), "suite-train-time", cfg)
    try:
        for env_name in envs:
            for seed in cfg.seeds:
                for agent in agents:
                    sub = _with(cfg, env_name, agent)
                    log.info("suite-train-time: %s %s seed %d", env_name, agent, seed)
                    attack_train_one(sub, seed, audit.out / env_name / agent / f"seed_{seed}", audit)
        compare_files(sorted(audit.out.rglob("final.csv"), key=str), audit.out / "summary", kinds=("final/1",), strict=False)
        audit.output(audit.out / "summary.csv")
    except BaseException as exc:
        audit.finish("failed", repr(exc))
        raise
    audit.finish()
    return audit.out
