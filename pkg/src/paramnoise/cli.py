"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .agent import ConfigError
from .attacks import AttackError
from .config import load_config
from .networks import ArchitectureError, CheckpointError
from .tables import SchemaError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# convenience flag -> config key
FLAG_KEYS = {
    "env": "env.name",
    "agent": "trainer.kind",
    "steps": "trainer.total_steps",
    "seed": "run.seeds",
    "seeds": "run.seeds",
    "out": "run.out",
    "lam": "attack.lam",
    "source": "attack.source",
    "episodes": "attack.episodes",
    "target": "attack.target_checkpoint",
    "replica": "attack.replica_checkpoint",
    "noise_mode": "trainer.noise_mode",
    "loss": "attack.loss",
}


def _common(p: argparse.ArgumentParser, flags: tuple[str, ...]) -> None:
    p.add_argument("--config", type=Path, help="experiment config file (INI sections)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    helps = {
        "env": "environment name (grid_pursuit, catcher)",
        "agent": "eps_greedy or noisy",
        "steps": "training steps",
        "seed": "master seed",
        "seeds": "seed list, e.g. 0,1,2 or 0..4",
        "out": "output directory",
        "lam": "perturbation budget, e.g. 1/255",
        "source": "whitebox or blackbox",
        "episodes": "attack evaluation episodes",
        "target": "target checkpoint",
        "replica": "replica checkpoint",
        "noise_mode": "noisy nets act on fresh noise per decision (sample) or on mean weights (mean)",
        "loss": "FGSM surrogate loss: ce or neg_q",
    }
    choices = {"noise_mode": ("sample", "mean"), "loss": ("ce", "neg_q")}
    for f in flags:
        p.add_argument(f"--{f.replace('_', '-')}", dest=f, choices=choices.get(f), help=helps[f])
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paramnoise", description="DQN vs NoisyNet under adversarial attacks")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train agents, write checkpoints and metrics")
    _common(p, ("env", "agent", "steps", "seed", "seeds", "out", "noise_mode"))
    p.add_argument("--with-replica", action="store_true", help="co-train a blackbox replica on the observed stream")
    p = sub.add_parser("attack-test", help="clean / random / FGSM evaluation of a checkpoint")
    _common(p, ("env", "agent", "seed", "out", "lam", "source", "episodes", "target", "replica", "noise_mode", "loss"))
    p = sub.add_parser("attack-train", help="policy-induction attack alongside an unattacked control")
    _common(p, ("env", "agent", "steps", "seed", "seeds", "out", "lam", "noise_mode", "loss"))
    p = sub.add_parser("replicate", help="train a replica by observing a checkpointed target")
    _common(p, ("env", "agent", "seed", "out", "target"))
    p = sub.add_parser("compare", help="summarize reports and score the seed-majority claims")
    p.add_argument("reports", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=Path("summary"), help="output stem (.csv and .txt)")
    p.add_argument("-v", "--verbose", action="store_true")
    for name in ("suite-test-time", "suite-train-time"):
        p = sub.add_parser(name, help=f"canned {name[6:]} comparison over seeds and both agent kinds")
        _common(p, ("steps", "seeds", "out", "lam", "noise_mode", "loss"))
        p.add_argument("--envs", help="comma-separated environments")
    return parser


def _overrides(args) -> list[str]:
    out = []
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out.append(f"{key}={value}")
    return out + list(args.overrides)


def main(argv: list[str] | None = None) -> int:
    from . import experiments as ex
    from .compare import compare_files

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    try:
        if args.command == "compare":
            compare_files(args.reports, args.out)
            print(Path(args.out).with_suffix(".txt").read_text(encoding="utf-8"), end="")
            return EXIT_OK
        cfg = load_config(args.config, _overrides(args))
        envs = getattr(args, "envs", None)
        if envs:
            from .envs import DEFAULT_SPECS

            unknown = sorted(set(envs.split(",")) - set(DEFAULT_SPECS))
            if unknown:
                raise ConfigError(f"unknown environments {unknown}")
    except (ConfigError, SchemaError, AttackError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    try:
        if args.command == "train":
            ex.cli_train(cfg, with_replica=args.with_replica)
        elif args.command == "attack-test":
            report = ex.cli_attack_test(cfg)[0]
            print(
                f"clean {report.clean_mean:.4f}  random {report.random_mean:.4f}  "
                f"adversarial {report.adversarial_mean:.4f}  flip rate {report.transfer_rate:.4f}"
            )
        elif args.command == "attack-train":
            for o in ex.cli_attack_train(cfg):
                print(f"control {sum(o.control_final) / len(o.control_final):.4f}  "
                      f"attacked {sum(o.attacked_final) / len(o.attacked_final):.4f}  "
                      f"success {o.attack_success:.4f}  triggered at {o.triggered_at}")
        elif args.command == "replicate":
            ex.cli_replicate(cfg)
        else:
            envs = tuple(args.envs.split(",")) if args.envs else None
            if args.command == "suite-test-time":
                out = ex.suite_test_time(cfg, **({"envs": envs} if envs else {}))
            else:
                out = ex.suite_train_time(cfg, **({"envs": envs} if envs else {}))
            print((out / "summary.txt").read_text(encoding="utf-8"), end="")
    except (ConfigError, AttackError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ex.RunError, CheckpointError, ArchitectureError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
