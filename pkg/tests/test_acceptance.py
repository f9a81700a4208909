"""End-to-end acceptance criteria 1-11.

Criteria 2 and 5-9 train 50k-step agents over five seeds on both toy
environments (about an hour on one core).  Set ``PARAMNOISE_SUITE_DIR`` to
reuse finished suite directories (``<dir>/test_time``, ``<dir>/train_time``).
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from paramnoise import attacks as atk
from paramnoise import autodiff as ad
from paramnoise import networks as nw
from paramnoise.agent import Trainer, TrainerConfig
from paramnoise.cli import main
from paramnoise.compare import compare
from paramnoise.config import load_config
from paramnoise.envs import make_env
from paramnoise.experiments import suite_test_time, suite_train_time
from paramnoise.networks import Architecture, Kind
from paramnoise.tables import RunManifest

from conftest import central_difference, rel_err

SEEDS = "0..4"
LAM = 1.0 / 255.0


def _suite(tmp_path_factory, name, runner):
    base = os.environ.get("PARAMNOISE_SUITE_DIR")
    out = Path(base) / name if base else tmp_path_factory.mktemp(name)
    manifest = out / "manifest.ini"
    if manifest.exists() and RunManifest.read(manifest).status == "complete":
        return out
    cfg = load_config(None, [f"run.seeds={SEEDS}", f"run.out={out}"])
    return runner(cfg)


@pytest.fixture(scope="session")
def test_time_suite(tmp_path_factory):
    out = _suite(tmp_path_factory, "test_time", suite_test_time)
    return compare(sorted(out.rglob("*.csv"), key=str), kinds=("final/1", "attack/1", "transfer/1"), strict=False)[0]


@pytest.fixture(scope="session")
def train_time_suite(tmp_path_factory):
    out = _suite(tmp_path_factory, "train_time", suite_train_time)
    return compare(sorted(out.rglob("final.csv"), key=str), kinds=("final/1",), strict=False)[0]


def _pick(verdicts, claim, groups):
    found = {v.group: v for v in verdicts if v.claim == claim}
    missing = [g for g in groups if g not in found]
    assert not missing, f"{claim}: no verdict for {missing}"
    chosen = [found[g] for g in groups]
    detail = "; ".join(f"{v.group} {v.passed}/{v.seeds} {v.verdict}" for v in chosen)
    return all(v.verdict == "pass" for v in chosen), detail


# -- exact property criteria -------------------------------------------------


def test_criterion_01_gradient_oracle(criterion):
    r = np.random.default_rng(1)
    start, worst, nets = time.perf_counter(), 0.0, 0
    for trial in range(100):
        kind = Kind.NOISY if trial % 2 else Kind.PLAIN
        hidden = tuple(int(h) for h in r.integers(1, 9, size=int(r.integers(0, 3))))
        arch = Architecture(int(r.integers(1, 7)), int(r.integers(2, 5)), hidden, kind)
        net = nw.init_parameters(arch, r)
        nw.sample_noise(net, r) if kind is Kind.NOISY else None
        x = r.uniform(size=(int(r.integers(1, 4)), arch.input_width))
        actions = r.integers(arch.n_actions, size=len(x))
        y = r.normal(size=len(x))
        obs = r.uniform(size=arch.input_width)
        label = int(r.integers(arch.n_actions))

        def td_loss(rec_fw):
            return ad.squared_error(ad.pick(rec_fw.q, actions), rec_fw.record.leaf(y))

        def ce_loss(rec_fw):
            return ad.cross_entropy_on_logits(rec_fw.q, label)

        # TD loss on a batch, CE on one observation: the two losses the agent differentiates
        for inputs, loss_of in ((x, td_loss), (obs, ce_loss)):
            fw = nw.forward(net, inputs)
            g = ad.backward(fw.record, loss_of(fw))

            def value():
                return loss_of(nw.forward(net, inputs)).data.item()

            for name, arr in net.parameters():
                worst = max(worst, rel_err(g[fw.params[name]], central_difference(value, arr)))
            worst = max(worst, rel_err(g[fw.obs], central_difference(value, inputs)))
        nets += 1
    elapsed = time.perf_counter() - start
    ok = criterion(1, worst < 1e-4 and nets >= 100 and elapsed < 60,
                   f"{nets} nets, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_03_noisy_collapse_and_factorization(criterion):
    r = np.random.default_rng(3)
    equal = rank_one = 0
    for trial in range(200):
        arch = Architecture(int(r.integers(1, 12)), int(r.integers(2, 6)), (int(r.integers(1, 16)),), Kind.NOISY)
        noisy = nw.init_parameters(arch, r)
        for layer in noisy.layers:
            layer.sigma_W[:] = 0.0
            layer.sigma_b[:] = 0.0
        nw.sample_noise(noisy, r)
        plain = nw.QNetwork(Architecture(arch.input_width, arch.n_actions, arch.hidden, Kind.PLAIN),
                            [nw.LinearLayer(l.mu_W.copy(), l.mu_b.copy()) for l in noisy.layers])
        x = r.uniform(size=(5, arch.input_width))
        equal += np.array_equal(nw.q_values(noisy, x), nw.q_values(plain, x))
        live = nw.init_parameters(arch, r)
        nw.sample_noise(live, r)
        rank_one += all(
            np.array_equal(l.weight_noise()[0], np.outer(nw.signed_sqrt(l.eps_out), nw.signed_sqrt(l.eps_in)))
            and np.linalg.matrix_rank(l.weight_noise()[0]) <= 1
            for l in live.layers
        )
    ok = criterion(3, equal == 200 and rank_one == 200, f"sigma=0 equal {equal}/200, rank-1 {rank_one}/200")
    assert ok


def test_criterion_04_budget_law(criterion):
    r = np.random.default_rng(4)
    env = make_env("grid_pursuit")
    nets = [nw.init_parameters(Architecture(env.spec.obs_length, 4, (32,), k), r) for k in (Kind.PLAIN, Kind.NOISY)]
    crafting = atk.CraftingNet(nets[1], r)
    states = atk.sample_states(env, 500, r)
    violations = 0
    for i in range(100_000):
        obs = states[i % len(states)]
        net = nets[0] if i % 2 else crafting.current()
        ex = atk.fgsm_untargeted(net, obs, LAM) if i % 4 < 2 else atk.fgsm_targeted(net, obs, i % 4, LAM)
        moved = np.abs(ex.perturbed - ex.clean).max()
        violations += bool(moved > LAM or np.abs(ex.delta).max() > LAM
                           or ex.perturbed.min() < 0.0 or ex.perturbed.max() > 1.0)
    ok = criterion(4, violations == 0, f"100000 examples, {violations} violations")
    assert ok


def test_criterion_10_determinism_and_round_trip(criterion, tmp_path):
    args = ["train", "--steps", "3000", "--seed", "7", "--set", "env.name=catcher",
            "--set", "trainer.eval_every=500", "--set", "trainer.final_eval_episodes=20"]
    codes = [main(args + ["--out", str(tmp_path / d)]) for d in ("a", "b")]
    csvs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    same = all((tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes() for p in csvs)
    r = np.random.default_rng(10)
    exact = True
    for kind in (Kind.PLAIN, Kind.NOISY):
        net = nw.init_parameters(Architecture(128, 4, (64, 64), kind), r)
        nw.sample_noise(net, r) if kind is Kind.NOISY else None
        nw.save_checkpoint(net, tmp_path / f"{kind.value}.ckpt")
        back = nw.load_checkpoint(tmp_path / f"{kind.value}.ckpt", expect=net.arch).net
        x = r.uniform(size=(100, 128))
        exact &= np.array_equal(nw.q_values(net, x), nw.q_values(back, x))
    ok = criterion(10, codes == [0, 0] and len(csvs) == 2 and same and exact,
                   f"{len(csvs)} CSVs byte-identical={same}, checkpoint forward-exact={exact}")
    assert ok


def test_criterion_11_zero_budget_neutrality(criterion):
    env = make_env("catcher")
    identical = []
    for kind in ("eps_greedy", "noisy"):
        cfg = TrainerConfig(kind=kind, total_steps=3000, eval_every=500, eval_episodes=5, final_eval_episodes=20, seed=11)
        base, attacked = Trainer(make_env("catcher"), cfg), Trainer(make_env("catcher"), cfg)
        base_metrics = base.run()
        replica = atk.Replica.create(atk.replica_architecture(cfg.architecture(env), "same"),
                                     atk.replica_config(cfg, "same"), 11)
        result = atk.policy_induction_attack(attacked, atk.adversarial_policy(env), replica, 0.0, None, 1.0,
                                             np.random.default_rng(11))
        # repr: td_loss is nan before learning starts
        curves = [repr((m.step, m.return_mean, m.return_std, m.td_loss)) for m in base_metrics] == [
            repr((m.step, m.return_mean, m.return_std, m.td_loss)) for m in result.metrics
        ]
        params = all(np.array_equal(a, b) for (_, a), (_, b) in zip(base.net.parameters(), attacked.net.parameters()))
        report = atk.test_time_attack(base.snapshot(np.random.default_rng(1)), env, "whitebox", 0.0, 20,
                                      np.random.default_rng(2))
        identical.append(curves and params and result.final_returns == result.final_clean
                         and report.adversarial == report.clean == report.random)
    ok = criterion(11, all(identical), f"train-time and test-time lambda=0 identical per kind: {identical}")
    assert ok


# -- end-to-end criteria -----------------------------------------------------


@pytest.mark.slow
def test_criterion_02_learning_sanity(criterion, test_time_suite):
    groups = [f"{e}/{a}" for e in ("catcher", "grid_pursuit") for a in ("eps_greedy", "noisy")]
    ok, detail = _pick(test_time_suite, "learning_sanity", groups)
    assert criterion(2, ok, detail)


@pytest.mark.slow
def test_criterion_05_adversarial_beats_random(criterion, test_time_suite):
    ok, detail = _pick(test_time_suite, "adversarial_beats_random", ["grid_pursuit/whitebox"])
    assert criterion(5, ok, detail)


@pytest.mark.slow
def test_criterion_06_test_time_mitigation(criterion, test_time_suite):
    groups = [f"{e}/{s}" for e in ("catcher", "grid_pursuit") for s in ("blackbox", "whitebox")]
    ok, detail = _pick(test_time_suite, "test_time_mitigation", groups)
    assert criterion(6, ok, detail)


@pytest.mark.slow
def test_criterion_07_transferability_reduction(criterion, test_time_suite):
    ok, detail = _pick(test_time_suite, "transferability_reduction", ["grid_pursuit"])
    assert criterion(7, ok, detail)


@pytest.mark.slow
def test_criterion_08_training_time_efficacy(criterion, train_time_suite):
    ok, detail = _pick(train_time_suite, "train_time_efficacy", ["grid_pursuit"])
    assert criterion(8, ok, detail)


@pytest.mark.slow
def test_criterion_09_training_time_mitigation(criterion, train_time_suite):
    ok, detail = _pick(train_time_suite, "train_time_mitigation", ["grid_pursuit"])
    assert criterion(9, ok, detail)
