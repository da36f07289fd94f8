"""Experiment orchestration: pretrain, CSP training, agent training, compare, sweep.

Output layout under ``output_dir``::

    pretrain/                 frozen pretrained-policy checkpoint
    csp/                      CSP checkpoint + csp_log.csv
    train/<kind>_<arm>_seed<N>/   agent checkpoint + metrics.csv
    compare/                  report.json + curves/*.csv
    sweep/                    hidden_<v>.csv per value + aggregate.csv

Every CSV/JSON output is a pure function of config and seeds. Wall-clock
timestamps go only into ``run_manifest.json`` files.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .agents import AGENT_KINDS, load_agent, read_manifest, save_agent
from .augment import (
    AugmentConfig,
    evaluate,
    random_policy_baseline,
    train_with_augmentation,
    write_metrics,
)
from .config import ConfigError, RunConfig
from .csp import (
    evaluate_csp,
    load_csp,
    load_pretrained,
    pretrain_policy,
    save_csp,
    save_pretrained,
    train_csp,
    write_csp_log,
)

ARMS = ("baseline", "augmented")
SWEEP_VALUES = (64, 128, 256)
SWEEP_CURVE_COLUMNS = ("hidden", "seed", "episode", "mean_abs_dr", "csp_critic_loss", "csp_actor_loss")
SWEEP_AGGREGATE_COLUMNS = ("hidden", "seed", "episodes", "final_mean_abs_dr", "eval_mean_abs_dr")
REPORT_SCHEMA_VERSION = 1


class MissingArtifact(FileNotFoundError):
    pass


def worker_count() -> int:
    raw = os.environ.get("CFRL_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def pretrain_dir(cfg: RunConfig) -> str:
    return os.path.join(cfg.output_dir, "pretrain")


def csp_dir(cfg: RunConfig) -> str:
    return cfg.augment.csp_checkpoint or os.path.join(cfg.output_dir, "csp")


def train_dir(cfg: RunConfig, kind: str, augmented: bool, seed: int) -> str:
    return os.path.join(cfg.output_dir, "train", run_id(kind, augmented, seed))


def run_id(kind: str, augmented: bool, seed: int) -> str:
    return f"{kind}_{ARMS[int(augmented)]}_seed{seed}"


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_run_manifest(directory, command: str, cfg: RunConfig, started: float, extra=None) -> None:
    manifest = {
        "command": command,
        "started_unix": started,
        "finished_unix": time.time(),
        "config": cfg.to_dict(),
    }
    if extra:
        manifest.update(extra)
    write_json(manifest, os.path.join(directory, "run_manifest.json"))


def _require(path, what: str) -> None:
    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise MissingArtifact(f"{what} checkpoint not found: {path}")


def _check_env(manifest: dict, cfg: RunConfig, path) -> None:
    stored = manifest.get("env")
    if stored is not None and stored != cfg.env.to_dict():
        diff = sorted(k for k in stored if stored[k] != cfg.env.to_dict().get(k))
        raise ConfigError(f"checkpoint {path} was built with a different env config (fields: {', '.join(diff)})")


def cmd_pretrain(cfg: RunConfig, seed: int) -> dict:
    started = time.time()
    out = pretrain_dir(cfg)
    base, avg = pretrain_policy(cfg.env, cfg.agent, cfg.pretrain_budget, seed, cfg.eval_episodes)
    rand, _ = random_policy_baseline(cfg.env, seed, cfg.eval_episodes)
    info = {
        "role": "pretrained",
        "env": cfg.env.to_dict(),
        "agent": cfg.agent.to_dict(),
        "seed": seed,
        "budget": cfg.pretrain_budget,
        "eval_avg_reward": avg,
        "random_avg_reward": rand,
    }
    save_pretrained(base, out, info)
    write_run_manifest(out, "pretrain", cfg, started)
    return {"path": out, "hash": base.content_hash(), "eval_avg_reward": avg, "random_avg_reward": rand}


def _load_base_policy(cfg: RunConfig):
    path = pretrain_dir(cfg)
    _require(path, "pretrained policy")
    _check_env(read_manifest(path), cfg, path)
    return load_pretrained(path, cfg.csp_trainer.greedy_pretrained)


def cmd_train_csp(cfg: RunConfig, seed: int) -> dict:
    started = time.time()
    base = _load_base_policy(cfg)
    out = os.path.join(cfg.output_dir, "csp")
    res = train_csp(cfg.env, base, cfg.csp_trainer, seed)
    save_csp(res.csp, out, {"env": cfg.env.to_dict(), "seed": seed, "trainer": cfg.csp_trainer.to_dict()})
    write_csp_log(res.log, os.path.join(out, "csp_log.csv"))
    write_run_manifest(out, "train-csp", cfg, started)
    drs = [r["mean_abs_dr"] for r in res.log]
    return {"path": out, "episodes": len(drs), "final_mean_abs_dr": drs[-1] if drs else None}


def _load_csp_for(cfg: RunConfig):
    path = csp_dir(cfg)
    _require(path, "CSP")
    manifest = read_manifest(path)
    _check_env(manifest, cfg, path)
    if manifest.get("state_dim") != cfg.env.state_dim or manifest.get("action_dim") != cfg.env.action_dim:
        raise ConfigError(f"CSP checkpoint {path} dims do not match env config")
    return load_csp(path)


def train_cell(cfg: RunConfig, kind: str, augmented: bool, seed: int, csp=None) -> dict:
    """One training run; writes its checkpoint and metrics, returns its final row."""
    started = time.time()
    if augmented and csp is None:
        csp = _load_csp_for(cfg)
    rid = run_id(kind, augmented, seed)
    aug = replace(cfg.augment, enabled=augmented)
    res = train_with_augmentation(
        kind, cfg.env, cfg.agent, aug, cfg.budget, seed,
        csp=csp, eval_every=cfg.eval_every, eval_episodes=cfg.eval_episodes,
        run_id=rid, record_wall_ms=cfg.record_wall_ms,
    )
    out = train_dir(cfg, kind, augmented, seed)
    save_agent(res.agent, out, {"env": cfg.env.to_dict(), "seed": seed, "augmented": augmented})
    write_metrics(res.metrics, os.path.join(out, "metrics.csv"))
    write_run_manifest(out, "train", cfg, started)
    if res.metrics:
        final = res.metrics[-1]
        avg, ctr = final["eval_avg_reward"], final["eval_ctr"]
    else:
        avg, ctr = evaluate(res.agent, cfg.env, seed, cfg.eval_episodes)
    return {
        "run_id": rid,
        "kind": kind,
        "arm": ARMS[int(augmented)],
        "seed": seed,
        "final_eval_avg_reward": avg,
        "final_eval_ctr": ctr,
        "metrics": res.metrics,
        "path": out,
    }


def cmd_train(cfg: RunConfig, seed: int) -> dict:
    row = train_cell(cfg, cfg.kind, cfg.augment.enabled, seed)
    row.pop("metrics")
    return row


def cmd_eval(cfg: RunConfig, checkpoint: str, seed: int) -> dict:
    _require(checkpoint, "agent")
    manifest = read_manifest(checkpoint)
    _check_env(manifest, cfg, checkpoint)
    agent = load_agent(checkpoint)
    avg, ctr = evaluate(agent, cfg.env, seed, cfg.eval_episodes)
    return {"checkpoint": checkpoint, "seed": seed, "episodes": cfg.eval_episodes,
            "eval_avg_reward": avg, "eval_ctr": ctr}


def improvement_pct(baseline: float, augmented: float, eps: float = 1e-12):
    """Relative improvement in percent; None when the baseline is ~0."""
    if abs(baseline) < eps:
        return None
    return (augmented - baseline) / baseline * 100.0


def ensure_prerequisites(cfg: RunConfig, need_csp: bool = True) -> None:
    """Build base and the CSP from ``seeds[0]`` if their checkpoints are absent."""
    seed = cfg.seeds[0]
    if not os.path.exists(os.path.join(pretrain_dir(cfg), "manifest.json")):
        cmd_pretrain(cfg, seed)
    if need_csp and not os.path.exists(os.path.join(csp_dir(cfg), "manifest.json")):
        if cfg.augment.csp_checkpoint:
            raise MissingArtifact(f"CSP checkpoint not found: {cfg.augment.csp_checkpoint}")
        cmd_train_csp(cfg, seed)


def _cell_job(args):
    cfg, kind, augmented, seed = args
    try:
        return train_cell(cfg, kind, augmented, seed)
    except Exception as e:  # reported in the failure manifest
        return {"run_id": run_id(kind, augmented, seed), "kind": kind, "arm": ARMS[int(augmented)],
                "seed": seed, "error": f"{type(e).__name__}: {e}"}


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def build_report(cells: list, kinds, seeds) -> dict:
    by_key = {(c["kind"], c["arm"], c["seed"]): c for c in cells if "error" not in c}
    summary = {}
    for kind in kinds:
        entry = {}
        for arm in ARMS:
            vals = [by_key[(kind, arm, s)] for s in seeds if (kind, arm, s) in by_key]
            entry[arm] = {
                "mean_avg_reward": float(np.mean([v["final_eval_avg_reward"] for v in vals])) if vals else None,
                "mean_ctr": float(np.mean([v["final_eval_ctr"] for v in vals])) if vals else None,
                "n": len(vals),
            }
        b, a = entry["baseline"]["mean_avg_reward"], entry["augmented"]["mean_avg_reward"]
        bc, ac = entry["baseline"]["mean_ctr"], entry["augmented"]["mean_ctr"]
        entry["improvement_pct"] = improvement_pct(b, a) if None not in (a, b) else None
        entry["ctr_improvement_pct"] = improvement_pct(bc, ac) if None not in (ac, bc) else None
        entry["seeds_augmented_ge_baseline"] = sum(
            1 for s in seeds
            if (kind, "baseline", s) in by_key and (kind, "augmented", s) in by_key
            and by_key[(kind, "augmented", s)]["final_eval_avg_reward"]
            >= by_key[(kind, "baseline", s)]["final_eval_avg_reward"]
        )
        summary[kind] = entry
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kinds": list(kinds),
        "seeds": list(seeds),
        "cells": [{k: v for k, v in c.items() if k != "metrics"} for c in cells],
        "summary": summary,
        "failures": [c for c in cells if "error" in c],
    }


def format_table(report: dict) -> str:
    def num(x, fmt="{:.4f}"):
        return "n/a" if x is None else fmt.format(x)

    lines = [f"{'Algorithm':<10} {'Baseline':>12} {'With CSP':>12} {'Improvement':>12} {'CTR impr.':>10}"]
    for kind in report["kinds"]:
        e = report["summary"][kind]
        lines.append(
            f"{kind.upper():<10} {num(e['baseline']['mean_avg_reward']):>12} "
            f"{num(e['augmented']['mean_avg_reward']):>12} "
            f"{num(e['improvement_pct'], '{:+.2f}%'):>12} {num(e['ctr_improvement_pct'], '{:+.2f}%'):>10}"
        )
    return "\n".join(lines)


def cmd_compare(cfg: RunConfig, prepare: bool = True, workers: int | None = None) -> dict:
    """Every kind x {baseline, augmented} x seed at the same episode budget."""
    started = time.time()
    if prepare:
        ensure_prerequisites(cfg)
    _load_csp_for(cfg)  # fail early on a missing or mismatched CSP
    jobs = [(cfg, kind, aug, seed) for kind in cfg.kinds for aug in (False, True) for seed in cfg.seeds]
    cells = _map(_cell_job, jobs, workers or worker_count())
    out = os.path.join(cfg.output_dir, "compare")
    os.makedirs(os.path.join(out, "curves"), exist_ok=True)
    for c in cells:
        if "error" not in c:
            c["curve"] = os.path.join("curves", f"{c['run_id']}.csv")
            write_metrics(c["metrics"], os.path.join(out, c["curve"]))
    report = build_report(cells, cfg.kinds, cfg.seeds)
    write_json(report, os.path.join(out, "report.json"))
    write_run_manifest(out, "compare", cfg, started, {"failures": len(report["failures"])})
    if report["failures"]:
        write_json(report["failures"], os.path.join(out, "failures.json"))
    return report


def _sweep_job(args):
    cfg, base, value, seed = args
    trainer = replace(cfg.csp_trainer, agent=replace(cfg.csp_trainer.agent, hidden=(value,) * len(cfg.csp_trainer.agent.hidden)))
    res = train_csp(cfg.env, base, trainer, seed)
    drs = [r["mean_abs_dr"] for r in res.log]
    return {
        "hidden": value,
        "seed": seed,
        "log": res.log,
        "episodes": len(drs),
        "final_mean_abs_dr": drs[-1] if drs else float("nan"),
        "eval_mean_abs_dr": evaluate_csp(cfg.env, base, res.csp, seed, cfg.eval_episodes),
    }


def cmd_sweep(cfg: RunConfig, values=SWEEP_VALUES, prepare: bool = True, workers: int | None = None) -> dict:
    """Train one CSP per hidden width per seed and write aligned curves."""
    started = time.time()
    values = tuple(int(v) for v in values)
    if not values:
        raise ConfigError("sweep values must be non-empty")
    if any(v < 1 for v in values):
        raise ConfigError(f"sweep values must be >= 1, got {list(values)}")
    if prepare:
        ensure_prerequisites(cfg, need_csp=False)
    base = _load_base_policy(cfg)
    jobs = [(cfg, base, v, s) for v in values for s in cfg.seeds]
    rows = _map(_sweep_job, jobs, workers or worker_count())
    out = os.path.join(cfg.output_dir, "sweep")
    os.makedirs(out, exist_ok=True)
    files = {}
    for v in values:
        name = f"hidden_{v}.csv"
        files[v] = name
        with open(os.path.join(out, name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_CURVE_COLUMNS)
            for row in rows:
                if row["hidden"] != v:
                    continue
                for r in row["log"]:
                    w.writerow([v, row["seed"], r["episode"]] + [repr(float(r[c])) for c in SWEEP_CURVE_COLUMNS[3:]])
    with open(os.path.join(out, "aggregate.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_AGGREGATE_COLUMNS)
        for row in rows:
            w.writerow([row["hidden"], row["seed"], row["episodes"],
                        repr(float(row["final_mean_abs_dr"])), repr(float(row["eval_mean_abs_dr"]))])
    write_run_manifest(out, "sweep", cfg, started, {"values": list(values)})
    return {"dir": out, "files": files, "rows": [{k: v for k, v in r.items() if k != "log"} for r in rows]}


__all__ = [
    "AGENT_KINDS", "ARMS", "AugmentConfig", "MissingArtifact", "SWEEP_VALUES", "build_report",
    "cmd_compare", "cmd_eval", "cmd_pretrain", "cmd_sweep", "cmd_train", "cmd_train_csp",
    "ensure_prerequisites", "format_table", "improvement_pct", "train_cell",
]
