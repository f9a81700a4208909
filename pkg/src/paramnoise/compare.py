"""Cross-report summaries and seed-majority verdicts.

Reads ``attack/1``, ``transfer/1`` and ``final/1`` tables, pairs runs by
(env, seed), and scores each directional claim as pass, fail, or
insufficient-seeds.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import DEFAULT_SPECS
from .tables import SchemaError, as_float, atomic_write_text, read_table, write_table

REPORT_KINDS = ("attack/1", "transfer/1", "final/1")
MIN_SEEDS = 5
# a claim holds when at least this fraction of its matched seeds agree (4 of 5)
MAJORITY = 0.8
PLAIN, NOISY = "eps_greedy", "noisy"


@dataclass
class Verdict:
    claim: str
    group: str
    seeds: int
    passed: int
    detail: str

    @property
    def verdict(self) -> str:
        if self.seeds < MIN_SEEDS:
            return "insufficient-seeds"
        return "pass" if self.passed >= math.ceil(MAJORITY * self.seeds) else "fail"

    def row(self) -> dict:
        return {"claim": self.claim, "group": self.group, "seeds": self.seeds, "passed": self.passed,
                "verdict": self.verdict, "detail": self.detail}


def _verdict(claim: str, group: str, outcomes: dict[int, tuple[bool, str]]) -> Verdict:
    seeds = sorted(outcomes)
    detail = "; ".join(f"s{s}:{'ok' if outcomes[s][0] else 'no'}({outcomes[s][1]})" for s in seeds)
    return Verdict(claim, group, len(seeds), sum(outcomes[s][0] for s in seeds), detail)


def load_reports(paths) -> dict[str, list[dict]]:
    """Group rows of every report file by schema; non-report tables are rejected."""
    grouped: dict[str, list[dict]] = defaultdict(list)
    families: dict[str, str] = {}
    for index, path in enumerate(paths):
        schema, rows = read_table(path)
        family = schema.split("/")[0]
        if families.setdefault(family, schema) != schema:
            raise SchemaError(f"{path}: {schema} mixed with {families[family]}")
        if schema not in REPORT_KINDS:
            raise SchemaError(f"{path}: {schema} is not a report table (expected one of {REPORT_KINDS})")
        for r in rows:
            r["_file"] = str(path)
            r["_report"] = index
        grouped[schema].extend(rows)
    return grouped


# -- claims -----------------------------------------------------------------


def _summaries(rows: list[dict]) -> dict[tuple, dict]:
    out = {}
    for r in rows:
        if r["condition"] == "summary":
            out[(r["env"], r["source"], r["agent"], int(r["seed"]))] = r
    return out


def attack_claims(rows: list[dict]) -> list[Verdict]:
    summ = _summaries(rows)
    verdicts = []
    groups = sorted({(env, src) for env, src, _, _ in summ})
    for env, src in groups:
        if src == "whitebox":
            outcomes = {}
            for (e, s, agent, seed), r in summ.items():
                if (e, s, agent) == (env, src, PLAIN):
                    adv, rnd = float(r["adversarial_mean"]), float(r["random_mean"])
                    outcomes[seed] = (adv < rnd, f"adv {adv:.4f} rand {rnd:.4f}")
            if outcomes:
                verdicts.append(_verdict("adversarial_beats_random", f"{env}/{src}", outcomes))
        outcomes = {}
        for (e, s, agent, seed), r in summ.items():
            if (e, s, agent) == (env, src, PLAIN) and (env, src, NOISY, seed) in summ:
                dp = float(r["degradation"])
                dn = float(summ[(env, src, NOISY, seed)]["degradation"])
                outcomes[seed] = (dn < dp, f"noisy {dn:.4f} plain {dp:.4f}")
        if outcomes:
            verdicts.append(_verdict("test_time_mitigation", f"{env}/{src}", outcomes))
    return verdicts


def transfer_claims(rows: list[dict]) -> list[Verdict]:
    by = {(r["env"], r["agent"], int(r["seed"])): float(r["rate"]) for r in rows}
    verdicts = []
    for env in sorted({k[0] for k in by}):
        outcomes = {}
        for (e, agent, seed), rate in by.items():
            if e == env and agent == PLAIN and (env, NOISY, seed) in by:
                rn = by[(env, NOISY, seed)]
                outcomes[seed] = (rn < rate, f"noisy {rn:.4f} plain {rate:.4f}")
        if outcomes:
            verdicts.append(_verdict("transferability_reduction", env, outcomes))
    return verdicts


def final_claims(rows: list[dict]) -> list[Verdict]:
    verdicts = []
    train = [r for r in rows if r["variant"] == "train"]
    for env, agent in sorted({(r["env"], r["agent"]) for r in train}):
        outcomes = {}
        for r in train:
            if (r["env"], r["agent"]) == (env, agent):
                ret, opt = float(r["final_return"]), float(r["oracle_return"])
                outcomes[int(r["seed"])] = (ret >= 0.9 * opt, f"{ret:.4f} vs 0.9*{opt:.4f}")
        verdicts.append(_verdict("learning_sanity", f"{env}/{agent}", outcomes))

    by = {(r["env"], r["agent"], r["variant"], int(r["seed"])): r for r in rows if r["variant"] != "train"}
    for env in sorted({k[0] for k in by}):
        n_actions = DEFAULT_SPECS[env].n_actions
        outcomes = {}
        for (e, agent, variant, seed), r in by.items():
            if (e, agent, variant) != (env, PLAIN, "attacked") or (env, PLAIN, "control", seed) not in by:
                continue
            att = float(r["final_return"])
            ctl = float(by[(env, PLAIN, "control", seed)]["final_return"])
            success = as_float(r["attack_success"])
            ok = att < 0.5 * ctl and success is not None and success > 1.0 / n_actions + 0.1
            rate = "n/a" if success is None else f"{success:.3f}"
            outcomes[seed] = (ok, f"attacked {att:.4f} control {ctl:.4f} success {rate}")
        if outcomes:
            verdicts.append(_verdict("train_time_efficacy", env, outcomes))
        outcomes = {}
        for (e, agent, variant, seed), r in by.items():
            if (e, agent, variant) == (env, NOISY, "attacked") and (env, PLAIN, "attacked", seed) in by:
                rn = float(r["final_return"])
                rp = float(by[(env, PLAIN, "attacked", seed)]["final_return"])
                outcomes[seed] = (rn > rp, f"noisy {rn:.4f} plain {rp:.4f}")
        if outcomes:
            verdicts.append(_verdict("train_time_mitigation", env, outcomes))
    return verdicts


# -- per-report statistics --------------------------------------------------


STATS_COLUMNS = ("report", "env", "agent", "seed", "source", "condition", "n", "mean", "std", "delta_vs_first")


def attack_stats(rows: list[dict]) -> list[dict]:
    """Mean/std per (file, condition), with the difference from the first file's value."""
    cells: dict[tuple, list[float]] = defaultdict(list)
    meta: dict[str, dict] = {}
    order: list[str] = []
    for r in rows:
        if r["condition"] == "summary":
            continue
        f = r["_report"]
        if f not in meta:
            meta[f] = r
            order.append(f)
        cells[(f, r["condition"])].append(float(r["return"]))
    first = order[0] if order else None
    out = []
    for f in order:
        m = meta[f]
        for cond in ("clean", "random", "adversarial"):
            xs = cells.get((f, cond), [])
            if not xs:
                continue
            mean = float(np.mean(xs))
            base = cells.get((first, cond))
            out.append(
                {
                    "report": m["_file"], "env": m["env"], "agent": m["agent"], "seed": m["seed"], "source": m["source"],
                    "condition": cond, "n": len(xs), "mean": mean, "std": float(np.std(xs)),
                    "delta_vs_first": mean - float(np.mean(base)) if base else None,
                }
            )
    return out


def _aligned(header, rows) -> str:
    table = [list(header)] + [[_cell(r.get(c)) for c in header] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def compare(paths, kinds=REPORT_KINDS, strict: bool = True) -> tuple[list[Verdict], list[dict]]:
    """Verdicts and per-report statistics; ``strict`` rejects any non-report table."""
    paths = [Path(p) for p in paths]
    wanted = []
    for p in paths:
        schema, _ = read_table(p)
        if schema in kinds:
            wanted.append(p)
        elif strict:
            raise SchemaError(f"{p}: schema {schema} cannot be compared (expected one of {kinds})")
    if strict and len(wanted) < 2:
        raise SchemaError("compare needs at least two reports")
    grouped = load_reports(wanted)
    verdicts = final_claims(grouped.get("final/1", []))
    verdicts += attack_claims(grouped.get("attack/1", []))
    verdicts += transfer_claims(grouped.get("transfer/1", []))
    return verdicts, attack_stats(grouped.get("attack/1", []))


def compare_files(paths, out_stem: Path, kinds=REPORT_KINDS, strict: bool = True) -> list[Verdict]:
    """Write ``<stem>.csv`` (verdicts) and ``<stem>.txt`` (aligned verdicts plus statistics)."""
    verdicts, stats = compare(paths, kinds, strict)
    out_stem = Path(out_stem)
    write_table(out_stem.with_suffix(".csv"), "compare/1", [v.row() for v in verdicts])
    text = _aligned(("claim", "group", "seeds", "passed", "verdict"), [v.row() for v in verdicts])
    if stats:
        text += "\n" + _aligned(STATS_COLUMNS, stats)
    atomic_write_text(out_stem.with_suffix(".txt"), text)
    return verdicts
