import numpy as np
import pytest

from paramnoise.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from paramnoise.networks import load_checkpoint, q_values
from paramnoise.tables import RunManifest, as_float, read_table

SMALL = [
    "--set", "env.name=catcher",
    "--set", "trainer.hidden=16",
    "--set", "trainer.learning_start=200",
    "--set", "trainer.eval_every=250",
    "--set", "trainer.eval_episodes=3",
    "--set", "trainer.final_eval_episodes=5",
]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--steps", 1000, "--seed", 0, "--out", out, "--with-replica", *SMALL) == EXIT_OK
    return out


def test_train_outputs_and_audit(trained):
    seed_dir = trained / "seed_0"
    for name in ("final.ckpt", "replica.ckpt", "metrics.csv", "final.csv"):
        assert (seed_dir / name).exists()
    assert (trained / "config.ini").read_text().count("catcher") == 1
    manifest = RunManifest.read(trained / "manifest.ini")
    assert manifest.status == "complete" and manifest.command == "train"
    assert "seed_0/final.ckpt" in manifest.checkpoints and "seed_0/metrics.csv" in manifest.outputs
    steps = [int(r["step"]) for r in read_table(seed_dir / "metrics.csv")[1]]
    assert steps == [250, 500, 750, 1000]
    ckpts = sorted(p.name for p in (seed_dir / "checkpoints").iterdir())
    assert ckpts == ["step_000000250.ckpt", "step_000000500.ckpt", "step_000000750.ckpt"]


def test_train_is_byte_identical(trained, tmp_path):
    assert run("train", "--steps", 1000, "--seed", 0, "--out", tmp_path, "--with-replica", *SMALL) == EXIT_OK
    for name in ("metrics.csv", "final.csv"):
        assert (tmp_path / "seed_0" / name).read_bytes() == (trained / "seed_0" / name).read_bytes()


def test_eval_cadence_row_count(tmp_path):
    # 50 eval rows, scaled from 50k steps at cadence 1000
    args = ["train", "--steps", 500, "--out", tmp_path, *SMALL, "--set", "trainer.eval_every=10",
            "--set", "trainer.eval_episodes=1", "--set", "run.checkpoint_every=0"]
    assert run(*args) == EXIT_OK
    rows = read_table(tmp_path / "seed_0" / "metrics.csv")[1]
    assert len(rows) == 50 and [int(r["step"]) for r in rows] == list(range(10, 501, 10))


def test_zero_steps_writes_initial_checkpoint_only(tmp_path):
    assert run("train", "--steps", 0, "--out", tmp_path, *SMALL) == EXIT_OK
    assert read_table(tmp_path / "seed_0" / "metrics.csv")[1] == []
    assert load_checkpoint(tmp_path / "seed_0" / "final.ckpt").step == 0
    assert not (tmp_path / "seed_0" / "checkpoints").exists()


def test_attack_test_row_contract_and_zero_budget(trained, tmp_path):
    target = trained / "seed_0" / "final.ckpt"
    assert run("attack-test", "--target", target, "--lam", 0, "--episodes", 4, "--out", tmp_path, *SMALL) == EXIT_OK
    schema, rows = read_table(tmp_path / "report.csv")
    assert schema == "attack/1" and len(rows) == 3 * 4 + 1
    by = {c: [r["return"] for r in rows if r["condition"] == c] for c in ("clean", "adversarial")}
    assert by["clean"] == by["adversarial"]


def test_blackbox_attack_test(trained, tmp_path):
    args = ["attack-test", "--target", trained / "seed_0" / "final.ckpt", "--replica",
            trained / "seed_0" / "replica.ckpt", "--source", "blackbox", "--episodes", 3, "--out", tmp_path, *SMALL]
    assert run(*args) == EXIT_OK
    summary = read_table(tmp_path / "report.csv")[1][-1]
    assert summary["condition"] == "summary" and 0.0 <= float(summary["agreement"]) <= 1.0


def test_missing_checkpoint_is_runtime_error(tmp_path):
    assert run("attack-test", "--target", tmp_path / "nope.ckpt", "--out", tmp_path / "o", *SMALL) == EXIT_RUNTIME
    assert RunManifest.read(tmp_path / "o" / "manifest.ini").status == "failed"
    assert run("attack-test", "--source", "blackbox", "--target", tmp_path / "nope.ckpt", "--out", tmp_path, *SMALL) == EXIT_RUNTIME


def test_architecture_mismatch_is_runtime_error(trained, tmp_path):
    target = trained / "seed_0" / "final.ckpt"
    args = ["attack-test", "--target", target, "--out", tmp_path, *SMALL, "--set", "trainer.kind=noisy"]
    assert run(*args) == EXIT_RUNTIME


@pytest.mark.parametrize(
    "args",
    [
        ["train", "--agent", "boltzmann"],
        ["train", "--set", "trainer.nope=1"],
        ["train", "--config", "/nonexistent/exp.ini"],
        ["attack-test", "--lam", "-1"],
        ["suite-test-time", "--envs", "pong"],
        ["frobnicate"],
        [],
    ],
)
def test_config_errors_exit_2(args, tmp_path):
    assert run(*args, *(["--out", tmp_path] if args and args[0] != "frobnicate" else [])) == EXIT_CONFIG


def test_unwritable_output_is_runtime_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("train", "--steps", 0, "--out", blocker / "sub", *SMALL) == EXIT_RUNTIME


@pytest.fixture(scope="module")
def induced(tmp_path_factory, trained):
    out = tmp_path_factory.mktemp("attack_train")
    args = ["attack-train", "--steps", 1000, "--seed", 0, "--out", out, "--lam", 0.2, *SMALL,
            "--set", "attack.trigger=0", "--set", "attack.replica.kind=plain"]
    assert run(*args) == EXIT_OK
    return out


def test_control_curve_equals_train_curve(induced, trained):
    rows = read_table(induced / "seed_0" / "metrics.csv")[1]
    control = [(r["step"], r["return_mean"], r["td_loss"]) for r in rows if r["variant"] == "control"]
    train = [(r["step"], r["return_mean"], r["td_loss"]) for r in read_table(trained / "seed_0" / "metrics.csv")[1]]
    assert control == train


def test_attack_success_column(induced):
    rows = read_table(induced / "seed_0" / "metrics.csv")[1]
    final = [r for r in read_table(induced / "seed_0" / "final.csv")[1] if r["variant"] == "attacked"][0]
    # trigger 0 arms the attacker from the first step
    assert final["triggered_at"] == "0" and 0.0 <= float(final["attack_success"]) <= 1.0
    assert all(r["attack_success"] == "" for r in rows if r["variant"] == "control")
    assert all(0.0 <= as_float(r["attack_success"]) <= 1.0 for r in rows if r["variant"] == "attacked")
    for name in ("control.ckpt", "attacked.ckpt", "replica.ckpt"):
        assert (induced / "seed_0" / name).exists()


def test_replicate_round_trip(trained, tmp_path):
    args = ["replicate", "--target", trained / "seed_0" / "final.ckpt", "--out", tmp_path, *SMALL,
            "--set", "attack.replica.steps=600", "--set", "attack.replica.eval_every=200",
            "--set", "attack.replica.kind=plain", "--set", "attack.states=200"]
    assert run(*args) == EXIT_OK
    rows = read_table(tmp_path / "agreement.csv", expect="agreement/1")[1]
    assert [int(r["observed_steps"]) for r in rows] == [0, 200, 400, 600]
    ckpt = load_checkpoint(tmp_path / "replica.ckpt")
    obs = np.random.default_rng(0).random((100, ckpt.net.arch.input_width))
    again = load_checkpoint(tmp_path / "replica.ckpt").net
    np.testing.assert_array_equal(q_values(ckpt.net, obs), q_values(again, obs))


def test_compare_self_has_zero_differences(trained, tmp_path, capsys):
    target = trained / "seed_0" / "final.ckpt"
    assert run("attack-test", "--target", target, "--episodes", 3, "--out", tmp_path / "a", *SMALL) == EXIT_OK
    report = tmp_path / "a" / "report.csv"
    assert run("compare", report, report, "--out", tmp_path / "summary") == EXIT_OK
    text = (tmp_path / "summary.txt").read_text()
    assert "delta_vs_first" in text and capsys.readouterr().out.endswith(text)
    schema, rows = read_table(tmp_path / "summary.csv")
    assert schema == "compare/1"
    assert all(r["verdict"] in ("pass", "fail", "insufficient-seeds") for r in rows)
    from paramnoise.compare import compare

    _, stats = compare([report, report])
    assert stats and all(s["delta_vs_first"] == 0.0 for s in stats)


def test_compare_schema_mismatch_exits_2(trained, tmp_path):
    metrics = trained / "seed_0" / "metrics.csv"
    final = trained / "seed_0" / "final.csv"
    assert run("compare", metrics, final, "--out", tmp_path / "s") == EXIT_CONFIG
    assert run("compare", final, "--out", tmp_path / "s") == EXIT_CONFIG


def test_loss_and_noise_mode_flags(trained, tmp_path):
    target = trained / "seed_0" / "final.ckpt"
    args = ["attack-test", "--target", target, "--episodes", 2, "--loss", "neg_q", "--noise-mode", "mean",
            "--out", tmp_path, *SMALL]
    assert run(*args) == EXIT_OK
    assert "loss = neg_q" in (tmp_path / "config.ini").read_text()
    assert "noise_mode = mean" in (tmp_path / "config.ini").read_text()
    assert run("attack-test", "--loss", "hinge", "--out", tmp_path) == EXIT_CONFIG
