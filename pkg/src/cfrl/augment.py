"""Replay-buffer augmentation with a trained CSP, and the shared training loop.

Each environment step stores the factual transition. Every ``frequency``-th
step the CSP also maps ``s_t`` to a counterfactual state ``s_cf``; the training
agent acts there under the same pending noise and that transition is stored
too, tagged ``counterfactual``. The factual trajectory is restored afterwards.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .agents import (
    COUNTERFACTUAL,
    FACTUAL,
    Agent,
    AgentConfig,
    ReplayBuffer,
    Transition,
    select_action,
)
from .envsim import Env, EnvConfig, intervene
from .numkit import Rng, derive_seed

METRICS_COLUMNS = (
    "run_id", "episode", "env_steps", "eval_avg_reward", "eval_ctr",
    "buffer_size", "buffer_cf_fraction", "wall_ms",
)


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = False
    csp_checkpoint: str = ""
    frequency: int = 1
    # Store the factual next state as the successor of counterfactual transitions.
    factual_successor: bool = False

    def validate(self, prefix="augment") -> list[str]:
        if self.frequency < 1:
            return [f"{prefix}.frequency must be >= 1, got {self.frequency}"]
        return []

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AugmentedStepRecord:
    factual: Transition
    counterfactual: Optional[Transition] = None


def augmented_step(env: Env, agent: Agent, csp, act_rng: Rng, cf_rng: Optional[Rng] = None,
                   buffer: Optional[ReplayBuffer] = None, with_counterfactual: bool = True,
                   factual_successor: bool = False) -> AugmentedStepRecord:
    s_t = env.interest.copy()
    snap = env.snapshot()
    a_t = select_action(agent, s_t, True, act_rng)
    out = env.step(a_t)
    rec = AugmentedStepRecord(Transition(s_t, a_t, out.reward, out.next_state, out.done, FACTUAL))
    if buffer is not None:
        buffer.push(rec.factual)
    if csp is None or not with_counterfactual:
        return rec

    after = env.snapshot()
    s_cf = intervene(env, snap, csp.act(s_t)).next_state
    # s_cf takes the place of s_t; the agent's step there sees the same pending noise.
    env.replace_state(snap, s_cf)
    a_cf = select_action(agent, s_cf, True, cf_rng)
    out_cf = env.step(a_cf)
    env.restore(after)
    s_next = out.next_state if factual_successor else out_cf.next_state
    rec.counterfactual = Transition(s_cf, a_cf, out_cf.reward, s_next, out_cf.done, COUNTERFACTUAL)
    if buffer is not None:
        buffer.push(rec.counterfactual)
    return rec


def evaluate(policy, env_config: EnvConfig, seed: int, episodes: int):
    """Greedy rollouts on the run's evaluation stream.

    ``policy`` is an Agent or any callable ``s -> action``. Returns
    ``(avg_reward_per_episode, mean_ctr)``. The evaluation users are the same
    for every call with the same seed.
    """
    if episodes <= 0:
        return 0.0, 0.0
    act = policy.greedy_action if isinstance(policy, Agent) else policy
    env = Env(env_config, derive_seed(seed, "eval"))
    totals, ctrs = [], []
    for _ in range(episodes):
        env.reset()
        total = 0.0
        while not env.done:
            out = env.step(act(env.interest.copy()))
            total += out.reward
            ctrs.append(out.ctr)
        totals.append(total)
    return float(np.mean(totals)), float(np.mean(ctrs))


def random_policy_baseline(env_config: EnvConfig, seed: int, episodes: int):
    rng = Rng(derive_seed(seed, "random-policy"))
    return evaluate(lambda s: rng.uniform(env_config.action_dim) * 2.0 - 1.0, env_config, seed, episodes)


@dataclass
class TrainResult:
    agent: Agent
    metrics: list
    buffer: ReplayBuffer
    factual_states: list = field(default_factory=list)
    factual_actions: list = field(default_factory=list)


def train_with_augmentation(agent_kind: str, env_config: EnvConfig, agent_config: AgentConfig,
                            augment_config: AugmentConfig, budget: int, seed: int, *,
                            csp=None, eval_every: int = 100, eval_episodes: int = 10,
                            run_id: str = "", record_wall_ms: bool = False, trace: bool = False,
                            update: bool = True, stop_at: Optional[float] = None) -> TrainResult:
    """Train one agent for ``budget`` episodes, optionally with CSP augmentation.

    ``eval_every = 0`` evaluates only after the last episode. Independent RNG
    streams drive the environment, exploration, counterfactual exploration,
    minibatch sampling and update noise. With ``stop_at`` set, training ends
    at the first evaluation whose average reward reaches it.
    """
    if augment_config.enabled and csp is None:
        from .csp import load_csp

        if not augment_config.csp_checkpoint:
            raise FileNotFoundError("augmentation enabled but no CSP checkpoint configured")
        csp = load_csp(augment_config.csp_checkpoint)
    if not augment_config.enabled:
        csp = None
    root = Rng(seed)
    env = Env(env_config, derive_seed(seed, "env"))
    agent = Agent(agent_kind, env_config.state_dim, env_config.action_dim, agent_config, root.fork("init"))
    act_rng = root.fork("act")
    cf_rng = act_rng.fork("counterfactual")
    sample_rng = root.fork("sample")
    update_rng = root.fork("update")
    buffer = ReplayBuffer(agent_config.buffer_capacity)
    freq = augment_config.frequency
    result = TrainResult(agent, [], buffer)
    t0 = time.perf_counter()
    steps = 0

    for ep in range(1, budget + 1):
        env.reset()
        if trace:
            result.factual_states.append(env.interest.copy())
        while not env.done:
            steps += 1
            rec = augmented_step(
                env, agent, csp, act_rng, cf_rng, buffer,
                with_counterfactual=steps % freq == 0,
                factual_successor=augment_config.factual_successor,
            )
            if trace:
                result.factual_states.append(env.interest.copy())
                result.factual_actions.append(rec.factual.a)
            if update:
                agent.update(buffer.sample_batch(agent_config.batch_size, sample_rng), update_rng)
        if ep == budget or (eval_every > 0 and ep % eval_every == 0):
            avg, ctr = evaluate(agent, env_config, seed, eval_episodes)
            result.metrics.append({
                "run_id": run_id,
                "episode": ep,
                "env_steps": steps,
                "eval_avg_reward": avg,
                "eval_ctr": ctr,
                "buffer_size": len(buffer),
                "buffer_cf_fraction": buffer.count(COUNTERFACTUAL) / len(buffer),
                "wall_ms": int((time.perf_counter() - t0) * 1000) if record_wall_ms else 0,
            })
            if stop_at is not None and avg >= stop_at:
                break
    return result


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([
                r["run_id"], r["episode"], r["env_steps"], repr(float(r["eval_avg_reward"])),
                repr(float(r["eval_ctr"])), r["buffer_size"], repr(float(r["buffer_cf_fraction"])),
                r["wall_ms"],
            ])
