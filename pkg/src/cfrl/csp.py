"""Counterfactual synthesis policy (CSP) training.

A frozen pretrained policy acts in the environment (the factual branch).
From the same snapshot the CSP's action is substituted, producing a
counterfactual state. The pretrained policy is then put in that state under
the exogenous noise it faced on the factual branch, and the CSP is rewarded by
the negated absolute difference of the two rewards. The CSP itself is a DDPG
agent."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .agents import (
    COUNTERFACTUAL,
    Agent,
    AgentConfig,
    ReplayBuffer,
    Transition,
    load_agent,
    read_manifest,
    save_agent,
    select_action,
)
from .envsim import Env, EnvConfig, intervene
from .numkit import MlpParams, NumericError, Rng, derive_seed, mlp_forward

CSP_LOG_COLUMNS = ("episode", "mean_abs_dr", "csp_critic_loss", "csp_actor_loss")


@dataclass(frozen=True)
class CspTrainerConfig:
    episodes: int = 300
    steps_per_episode: int = 50
    agent: AgentConfig = field(default_factory=AgentConfig)
    greedy_pretrained: bool = True
    novelty_bonus: float = 0.0
    # Successor stored in CSP transitions: "counterfactual" (s_cf) or "factual" (the factual next state).
    next_state: str = "counterfactual"

    def validate(self, prefix="csp_trainer") -> list[str]:
        errs = []
        if self.episodes < 0:
            errs.append(f"{prefix}.episodes must be >= 0, got {self.episodes}")
        if self.steps_per_episode < 1:
            errs.append(f"{prefix}.steps_per_episode must be >= 1, got {self.steps_per_episode}")
        if not self.novelty_bonus >= 0:
            errs.append(f"{prefix}.novelty_bonus must be >= 0, got {self.novelty_bonus}")
        if self.next_state not in ("factual", "counterfactual"):
            errs.append(f"{prefix}.next_state must be 'factual' or 'counterfactual', got {self.next_state!r}")
        return errs + self.agent.validate(f"{prefix}.agent")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["agent"] = self.agent.to_dict()
        return d


class PretrainedPolicy:
    """Frozen deterministic actor. Its parameter buffer is made read-only."""

    def __init__(self, actor: MlpParams, greedy: bool = True, expl_noise: float = 0.1):
        self.actor = actor.copy()
        self.actor.flat.flags.writeable = False
        self.greedy = greedy
        self.expl_noise = expl_noise

    def act(self, s, rng: Optional[Rng] = None) -> np.ndarray:
        a = mlp_forward(self.actor, s)
        if not self.greedy:
            a = np.clip(a + self.expl_noise * rng.normal(a.shape), -1.0, 1.0)
        return a

    def content_hash(self) -> str:
        return self.actor.content_hash()

    def to_bytes(self) -> bytes:
        return self.actor.to_bytes()


class CspPolicy:
    """A DDPG agent whose action, applied at ``s_t``, yields a counterfactual state."""

    def __init__(self, agent: Agent, base_hash: str = ""):
        if agent.kind != "ddpg":
            raise ValueError("the CSP is trained with DDPG")
        self.agent = agent
        self.base_hash = base_hash

    def act(self, s, explore: bool = False, rng: Optional[Rng] = None) -> np.ndarray:
        return select_action(self.agent, s, explore, rng)

    def content_hash(self) -> str:
        return self.agent.actor.content_hash()


def pretrain_policy(env_config: EnvConfig, agent_config: AgentConfig, budget: int, seed: int, eval_episodes: int = 10):
    """Plain DDPG on the environment; returns ``(PretrainedPolicy, eval_avg_reward)``."""
    from .augment import AugmentConfig, evaluate, train_with_augmentation

    result = train_with_augmentation(
        "ddpg", env_config, agent_config, AugmentConfig(enabled=False), budget, seed,
        eval_every=0, eval_episodes=eval_episodes,
    )
    avg, _ = evaluate(result.agent, env_config, seed, eval_episodes)
    return PretrainedPolicy(result.agent.actor), avg


def csp_reward(r_factual: float, r_counterfactual: float) -> float:
    if not (np.isfinite(r_factual) and np.isfinite(r_counterfactual)):
        raise NumericError("non-finite reward passed to csp_reward")
    return -abs(r_counterfactual - r_factual)


def csp_training_step(env: Env, base: PretrainedPolicy, csp: CspPolicy, rng: Rng,
                      pi_rng: Optional[Rng] = None, novelty_bonus: float = 0.0,
                      next_state: str = "counterfactual"):
    """One factual step plus its counterfactual branch and causal-effect probe.

    Returns the CSP transition and a diagnostics dict. On return the
    environment sits on the factual branch at ``the factual next state``.
    """
    s_t = env.interest.copy()
    snap = env.snapshot()
    a_base = base.act(s_t, pi_rng)
    fact = env.step(a_base)
    after = env.snapshot()

    a_c = csp.act(s_t, explore=True, rng=rng)
    cf = intervene(env, snap, a_c)
    s_cf = cf.next_state

    # Probe: the pretrained policy placed in s_cf, facing the noise it faced at s_t.
    env.replace_state(snap, s_cf)
    a_p = base.act(s_cf, pi_rng)
    probe = env.step(a_p)

    reward = csp_reward(fact.reward, probe.reward)
    if novelty_bonus:
        reward += novelty_bonus * float(np.linalg.norm(a_c - a_base))
    env.restore(after)

    s_next = fact.next_state if next_state == "factual" else s_cf
    tr = Transition(s_t, a_c, reward, s_next, fact.done, COUNTERFACTUAL)
    diag = {
        "s_t": s_t,
        "a_base": a_base,
        "r_factual": fact.reward,
        "s_next": fact.next_state,
        "a_c": a_c,
        "s_cf": s_cf,
        "a_probe": a_p,
        "r_counterfactual": probe.reward,
        "csp_reward": reward,
        "abs_dr": abs(probe.reward - fact.reward),
        "done": fact.done,
    }
    return tr, diag


@dataclass
class CspTrainingResult:
    csp: CspPolicy
    log: list
    factual_states: list


def train_csp(env_config: EnvConfig, base: PretrainedPolicy, trainer_config: CspTrainerConfig, seed: int,
              trace: bool = False) -> CspTrainingResult:
    root = Rng(seed)
    env = Env(env_config, derive_seed(seed, "env"))
    agent = Agent("ddpg", env_config.state_dim, env_config.action_dim, trainer_config.agent, root.fork("init"))
    csp = CspPolicy(agent, base.content_hash())
    act_rng = root.fork("act")
    pi_rng = root.fork("base")
    sample_rng = root.fork("sample")
    update_rng = root.fork("update")
    buffer = ReplayBuffer(trainer_config.agent.buffer_capacity)
    batch_size = trainer_config.agent.batch_size
    log, states = [], []

    for ep in range(trainer_config.episodes):
        env.reset()
        if trace:
            states.append(env.interest.copy())
        drs, closs, aloss = [], [], []
        for _ in range(trainer_config.steps_per_episode):
            tr, diag = csp_training_step(env, base, csp, act_rng, pi_rng, trainer_config.novelty_bonus,
                                         trainer_config.next_state)
            if trace:
                states.append(env.interest.copy())
            buffer.push(tr)
            losses = agent.update(buffer.sample_batch(batch_size, sample_rng), update_rng)
            drs.append(diag["abs_dr"])
            closs.append(losses["critic_loss"])
            aloss.append(losses["actor_loss"])
            if diag["done"]:
                break
        log.append({
            "episode": ep + 1,
            "mean_abs_dr": float(np.mean(drs)),
            "csp_critic_loss": float(np.mean(closs)),
            "csp_actor_loss": float(np.mean(aloss)),
        })
    return CspTrainingResult(csp, log, states)


def evaluate_csp(env_config: EnvConfig, base: PretrainedPolicy, csp: CspPolicy, seed: int, episodes: int) -> float:
    """Mean |r_o,c - r_o,t+1| with a greedy CSP on a held-out environment stream."""
    env = Env(env_config, derive_seed(seed, "eval"))
    noise_free = Rng(0)
    total, n = 0.0, 0
    for _ in range(episodes):
        env.reset()
        while not env.done:
            s_t = env.interest.copy()
            snap = env.snapshot()
            fact = env.step(base.act(s_t, noise_free))
            after = env.snapshot()
            s_cf = intervene(env, snap, csp.act(s_t)).next_state
            env.replace_state(snap, s_cf)
            probe = env.step(base.act(s_cf, noise_free))
            env.restore(after)
            total += abs(probe.reward - fact.reward)
            n += 1
    return total / n if n else 0.0


def write_csp_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSP_LOG_COLUMNS)
        for row in rows:
            w.writerow([row["episode"]] + [repr(float(row[c])) for c in CSP_LOG_COLUMNS[1:]])


def save_pretrained(base: PretrainedPolicy, path, extra: Optional[dict] = None) -> None:
    import json

    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "actor.mlp"), "wb") as fh:
        fh.write(base.to_bytes())
    manifest = {"kind": "pretrained", "hash": base.content_hash(), "greedy": base.greedy}
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_pretrained(path, greedy: Optional[bool] = None) -> PretrainedPolicy:
    manifest = read_manifest(path)
    with open(os.path.join(path, "actor.mlp"), "rb") as fh:
        actor = MlpParams.from_bytes(fh.read())
    pi = PretrainedPolicy(actor, manifest.get("greedy", True) if greedy is None else greedy)
    if pi.content_hash() != manifest["hash"]:
        raise ValueError(f"pretrained policy at {path} does not match its manifest hash")
    return pi


def save_csp(csp: CspPolicy, path, extra: Optional[dict] = None) -> None:
    meta = {"role": "csp", "base_hash": csp.base_hash, "csp_hash": csp.content_hash()}
    if extra:
        meta.update(extra)
    save_agent(csp.agent, path, meta)


def load_csp(path) -> CspPolicy:
    manifest = read_manifest(path)
    if manifest.get("role") != "csp":
        raise ValueError(f"{path} is not a CSP checkpoint")
    csp = CspPolicy(load_agent(path), manifest.get("base_hash", ""))
    if csp.content_hash() != manifest["csp_hash"]:
        raise ValueError(f"CSP checkpoint at {path} is corrupt (hash mismatch)")
    return csp
