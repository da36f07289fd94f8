"""Held-out mean |dr| for fixed CSP rules next to fresh and trained CSPs.

A quick way to see how much room the CSP objective leaves on a given
environment: if a freshly initialized actor already matches the best fixed
rule, training cannot shrink |dr| much further.

    python3 scripts/csp_floor.py --pretrain 200 --episodes 300 --seed 0
"""

import argparse

import numpy as np

from cfrl.agents import Agent, AgentConfig
from cfrl.csp import CspPolicy, CspTrainerConfig, pretrain_policy, train_csp
from cfrl.envsim import Env, EnvConfig, intervene
from cfrl.numkit import Rng, derive_seed


def mean_abs_dr(env_config, base, rule, seed, episodes, steps, noise, rng):
    env = Env(env_config, derive_seed(seed, "floor"))
    out = []
    for _ in range(episodes):
        env.reset()
        while env.step_count < steps:
            s = env.interest.copy()
            snap = env.snapshot()
            fact = env.step(base.act(s))
            after = env.snapshot()
            a = np.clip(rule(s) + noise * rng.normal(env_config.action_dim), -1.0, 1.0)
            s_cf = intervene(env, snap, a).next_state
            env.replace_state(snap, s_cf)
            out.append(abs(env.step(base.act(s_cf)).reward - fact.reward))
            env.restore(after)
    return float(np.mean(out))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pretrain", type=int, default=200)
    ap.add_argument("--episodes", type=int, default=300, help="CSP training episodes")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=50, help="steps per evaluation episode")
    ap.add_argument("--noise", type=float, default=0.0, help="Gaussian noise added to every rule")
    args = ap.parse_args()
    env_config, agent_config = EnvConfig(), AgentConfig()
    base, avg = pretrain_policy(env_config, agent_config, args.pretrain, args.seed)
    print(f"pretrained policy eval average reward {avg:.1f}")
    trained = train_csp(env_config, base, CspTrainerConfig(episodes=args.episodes), args.seed).csp
    rules = {
        "copy pretrained": base.act,
        "negated pretrained": lambda s: -base.act(s),
        "zero action": lambda s: np.zeros(env_config.action_dim),
        "trained CSP": trained.act,
    }
    for k in range(3):
        fresh = CspPolicy(Agent("ddpg", env_config.state_dim, env_config.action_dim, agent_config, Rng(100 + k)))
        rules[f"fresh CSP #{k}"] = fresh.act
    episodes = max(1, 3000 // args.steps)
    for name, rule in rules.items():
        v = mean_abs_dr(env_config, base, rule, args.seed, episodes, args.steps, args.noise, Rng(args.seed + 1))
        print(f"{name:<16} {v:.4f}")


if __name__ == "__main__":
    main()
