"""Off-policy actor-critic agents (DDPG, TD3, SAC) and the shared replay buffer."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .numkit import (
    AdamState,
    MlpParams,
    NumericError,
    Rng,
    adam_step,
    check_finite,
    init_mlp,
    mlp_backward_cached,
    mlp_forward,
    mlp_forward_cached,
    soft_update,
)

FACTUAL = "factual"
COUNTERFACTUAL = "counterfactual"
PROVENANCES = (FACTUAL, COUNTERFACTUAL)

AGENT_KINDS = ("ddpg", "td3", "sac")

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.95
    tau: float = 0.001
    actor_lr: float = 0.003
    critic_lr: float = 0.003
    hidden: tuple = (128, 128)
    batch_size: int = 5
    buffer_capacity: int = 200_000
    expl_noise: float = 0.1
    # TD3
    policy_delay: int = 2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    # SAC
    alpha: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def validate(self, prefix="agent") -> list[str]:
        errs = []
        if not 0.0 <= self.gamma <= 1.0:
            errs.append(f"{prefix}.gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.tau <= 1.0:
            errs.append(f"{prefix}.tau must be in [0, 1], got {self.tau}")
        for name in ("actor_lr", "critic_lr"):
            if not getattr(self, name) > 0:
                errs.append(f"{prefix}.{name} must be > 0, got {getattr(self, name)}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            errs.append(f"{prefix}.hidden must be a non-empty list of positive sizes, got {list(self.hidden)}")
        if self.batch_size < 1:
            errs.append(f"{prefix}.batch_size must be >= 1, got {self.batch_size}")
        if self.buffer_capacity < 1:
            errs.append(f"{prefix}.buffer_capacity must be >= 1, got {self.buffer_capacity}")
        for name in ("expl_noise", "target_noise", "noise_clip", "alpha"):
            if not getattr(self, name) >= 0:
                errs.append(f"{prefix}.{name} must be >= 0, got {getattr(self, name)}")
        if self.policy_delay < 1:
            errs.append(f"{prefix}.policy_delay must be >= 1, got {self.policy_delay}")
        return errs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# ---------------------------------------------------------------------------
# Transitions and replay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    provenance: str = FACTUAL

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        for name in ("s", "a", "s_next"):
            check_finite(getattr(self, name), f"transition.{name}")
        check_finite(self.r, "transition.r")


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.r)

    @classmethod
    def from_transitions(cls, ts) -> "Batch":
        return cls(
            np.array([t.s for t in ts], dtype=np.float64),
            np.array([t.a for t in ts], dtype=np.float64),
            np.array([t.r for t in ts], dtype=np.float64),
            np.array([t.s_next for t in ts], dtype=np.float64),
            np.array([t.done for t in ts], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling (with replacement)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.size = 0
        self._next = 0
        self._arrays = None
        self.pushes = {p: 0 for p in PROVENANCES}

    def __len__(self):
        return self.size

    def _alloc(self, t: Transition):
        c = self.capacity
        self._arrays = {
            "s": np.zeros((c, t.s.shape[0])),
            "a": np.zeros((c, t.a.shape[0])),
            "r": np.zeros(c),
            "s_next": np.zeros((c, t.s_next.shape[0])),
            "done": np.zeros(c, dtype=bool),
            "cf": np.zeros(c, dtype=bool),
        }

    def push(self, t: Transition) -> None:
        if self._arrays is None:
            self._alloc(t)
        i = self._next
        arr = self._arrays
        arr["s"][i] = t.s
        arr["a"][i] = t.a
        arr["r"][i] = t.r
        arr["s_next"][i] = t.s_next
        arr["done"][i] = t.done
        arr["cf"][i] = t.provenance == COUNTERFACTUAL
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushes[t.provenance] += 1

    def _oldest_first(self):
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def _transition(self, i) -> Transition:
        arr = self._arrays
        return Transition(
            arr["s"][i].copy(),
            arr["a"][i].copy(),
            float(arr["r"][i]),
            arr["s_next"][i].copy(),
            bool(arr["done"][i]),
            COUNTERFACTUAL if arr["cf"][i] else FACTUAL,
        )

    def contents(self) -> list[Transition]:
        return [self._transition(i) for i in self._oldest_first()]

    def count(self, provenance: str) -> int:
        if self.size == 0:
            return 0
        n_cf = int(np.count_nonzero(self._arrays["cf"][self._oldest_first()]))
        return n_cf if provenance == COUNTERFACTUAL else self.size - n_cf

    def _indices(self, batch_size: int, rng: Rng):
        if self.size == 0:
            raise IndexError("cannot sample from an empty replay buffer")
        return rng.integers(self.size, size=batch_size)

    def sample(self, batch_size: int, rng: Rng) -> list[Transition]:
        return [self._transition(i) for i in self._indices(batch_size, rng)]

    def sample_batch(self, batch_size: int, rng: Rng) -> Batch:
        idx = self._indices(batch_size, rng)
        arr = self._arrays
        return Batch(arr["s"][idx], arr["a"][idx], arr["r"][idx], arr["s_next"][idx], arr["done"][idx])


def buffer_push(buf: ReplayBuffer, t: Transition) -> None:
    buf.push(t)


def buffer_sample(buf: ReplayBuffer, batch_size: int, rng: Rng) -> list[Transition]:
    return buf.sample(batch_size, rng)


# ---------------------------------------------------------------------------
# Agent
# ---------------------------------------------------------------------------


class Agent:
    """Actor, critic(s), target copies and Adam state for one agent kind."""

    def __init__(self, kind: str, state_dim: int, action_dim: int, config: AgentConfig, rng: Rng):
        if kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {kind!r}")
        self.kind = kind
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.config = config
        hidden = list(config.hidden)
        hid_acts = ["relu"] * len(hidden)
        if kind == "sac":
            actor_dims, actor_out = [state_dim, *hidden, 2 * action_dim], "identity"
        else:
            actor_dims, actor_out = [state_dim, *hidden, action_dim], "tanh"
        self.actor = init_mlp(actor_dims, hid_acts + [actor_out], rng.fork("actor"))
        n_critics = 1 if kind == "ddpg" else 2
        critic_dims = [state_dim + action_dim, *hidden, 1]
        self.critics = [
            init_mlp(critic_dims, hid_acts + ["identity"], rng.fork(f"critic{k + 1}"))
            for k in range(n_critics)
        ]
        self.actor_target = None if kind == "sac" else self.actor.copy()
        self.critic_targets = [c.copy() for c in self.critics]
        self.actor_opt = AdamState.for_params(self.actor)
        self.critic_opts = [AdamState.for_params(c) for c in self.critics]
        self.updates = 0

    # -- networks ----------------------------------------------------------

    def networks(self) -> dict:
        nets = {"actor": self.actor}
        if self.actor_target is not None:
            nets["actor_target"] = self.actor_target
        for k, (c, ct) in enumerate(zip(self.critics, self.critic_targets)):
            nets[f"critic{k + 1}"] = c
            nets[f"critic{k + 1}_target"] = ct
        return nets

    def param_vector(self) -> np.ndarray:
        return np.concatenate([p.flat for p in self.networks().values()])

    def _split_sac(self, out):
        m = self.action_dim
        return out[..., :m], out[..., m:]

    def greedy_action(self, s) -> np.ndarray:
        out = mlp_forward(self.actor, s)
        if self.kind == "sac":
            return np.tanh(self._split_sac(out)[0])
        return out

    def update(self, batch: Batch, rng: Rng) -> dict:
        if self.kind == "ddpg":
            return ddpg_update(self, batch)
        if self.kind == "td3":
            return td3_update(self, batch, self.updates, rng)
        return sac_update(self, batch, rng)


def make_agent(kind, state_dim, action_dim, config: AgentConfig, seed_or_rng) -> Agent:
    rng = seed_or_rng if isinstance(seed_or_rng, Rng) else Rng(seed_or_rng)
    return Agent(kind, state_dim, action_dim, config, rng)


def select_action(agent: Agent, s, explore: bool, rng: Optional[Rng] = None) -> np.ndarray:
    """Actor output in [-1, 1]^m; with ``explore`` adds Gaussian noise (DDPG/TD3)
    or samples the squashed-Gaussian policy (SAC)."""
    s = np.asarray(s, dtype=np.float64)
    check_finite(s, "state")
    if agent.kind == "sac":
        out = mlp_forward(agent.actor, s)
        mean, log_std = agent._split_sac(out)
        if not explore:
            return np.tanh(mean)
        log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
        return np.tanh(mean + np.exp(log_std) * rng.normal(mean.shape))
    a = mlp_forward(agent.actor, s)
    if explore:
        noise = rng.normal(a.shape)
        a = np.clip(a + agent.config.expl_noise * noise, -1.0, 1.0)
    return a


# -- shared pieces -----------------------------------------------------------


def _q(critic: MlpParams, s, a):
    return mlp_forward(critic, np.concatenate([s, a], axis=-1))[..., 0]


def _bootstrap(r, done, gamma, next_value):
    # Terminal transitions get exactly r.
    return np.where(done, r, r + gamma * next_value)


def _regress_critic(critic: MlpParams, opt: AdamState, lr: float, s, a, y, *, apply=True):
    x = np.concatenate([s, a], axis=1)
    q, cache = mlp_forward_cached(critic, x)
    diff = q[:, 0] - y
    with np.errstate(over="ignore", invalid="ignore"):
        loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite critic loss {loss}")
    grads, _ = mlp_backward_cached(critic, cache, (2.0 / len(y)) * diff[:, None], need_input_grad=False)
    if apply:
        adam_step(critic, grads, opt, lr)
    return loss, grads


def _dq_da(critic: MlpParams, s, a, out_grad):
    """Input gradient of ``sum(out_grad * Q(s, a))`` w.r.t. the action block."""
    x = np.concatenate([s, a], axis=1)
    q, cache = mlp_forward_cached(critic, x)
    _, gin = mlp_backward_cached(critic, cache, out_grad[:, None], need_param_grad=False)
    return q[:, 0], gin[:, s.shape[1] :]


def _deterministic_actor_step(agent: Agent, s, critic: MlpParams):
    B = s.shape[0]
    a, acache = mlp_forward_cached(agent.actor, s)
    q, ga = _dq_da(critic, s, a, np.full(B, -1.0 / B))
    loss = -float(np.mean(q))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite actor loss {loss}")
    grads, _ = mlp_backward_cached(agent.actor, acache, ga, need_input_grad=False)
    adam_step(agent.actor, grads, agent.actor_opt, agent.config.actor_lr)
    return loss


# -- DDPG --------------------------------------------------------------------


def ddpg_critic_target(agent: Agent, t: Transition) -> float:
    """Bellman target r + gamma * Q_targ(s', pi_targ(s')), or r when terminal."""
    if t.done:
        return float(t.r)
    a2 = mlp_forward(agent.actor_target, t.s_next)
    q2 = _q(agent.critic_targets[0], t.s_next, a2)
    return float(t.r + agent.config.gamma * q2)


def _ddpg_targets(agent: Agent, b: Batch):
    a2 = mlp_forward(agent.actor_target, b.s_next)
    q2 = _q(agent.critic_targets[0], b.s_next, a2)
    return _bootstrap(b.r, b.done, agent.config.gamma, q2)


def ddpg_update(agent: Agent, batch: Batch) -> dict:
    if agent.kind != "ddpg":
        raise ValueError("ddpg_update needs a ddpg agent")
    cfg = agent.config
    y = _ddpg_targets(agent, batch)
    critic_loss, _ = _regress_critic(agent.critics[0], agent.critic_opts[0], cfg.critic_lr, batch.s, batch.a, y)
    actor_loss = _deterministic_actor_step(agent, batch.s, agent.critics[0])
    soft_update(agent.critic_targets[0], agent.critics[0], cfg.tau)
    soft_update(agent.actor_target, agent.actor, cfg.tau)
    agent.updates += 1
    return {"critic_loss": critic_loss, "actor_loss": actor_loss}


# -- TD3 ---------------------------------------------------------------------


def td3_target_action(agent: Agent, s_next, rng: Rng):
    cfg = agent.config
    a2 = mlp_forward(agent.actor_target, s_next)
    noise = np.clip(cfg.target_noise * rng.normal(a2.shape), -cfg.noise_clip, cfg.noise_clip)
    return np.clip(a2 + noise, -1.0, 1.0)


def td3_targets(agent: Agent, b: Batch, rng: Rng):
    a2 = td3_target_action(agent, b.s_next, rng)
    q1 = _q(agent.critic_targets[0], b.s_next, a2)
    q2 = _q(agent.critic_targets[1], b.s_next, a2)
    return _bootstrap(b.r, b.done, agent.config.gamma, np.minimum(q1, q2))


def td3_update(agent: Agent, batch: Batch, update_index: int, rng: Rng) -> dict:
    if agent.kind != "td3":
        raise ValueError("td3_update needs a td3 agent")
    cfg = agent.config
    y = td3_targets(agent, batch, rng)
    losses = [
        _regress_critic(c, o, cfg.critic_lr, batch.s, batch.a, y)[0]
        for c, o in zip(agent.critics, agent.critic_opts)
    ]
    out = {"critic_loss": float(np.mean(losses)), "actor_loss": float("nan")}
    if update_index % cfg.policy_delay == 0:
        out["actor_loss"] = _deterministic_actor_step(agent, batch.s, agent.critics[0])
        soft_update(agent.actor_target, agent.actor, cfg.tau)
        for ct, c in zip(agent.critic_targets, agent.critics):
            soft_update(ct, c, cfg.tau)
    agent.updates += 1
    return out


# -- SAC ---------------------------------------------------------------------


def squash_correction(u):
    """log(1 - tanh(u)^2) in a form that stays finite for large |u|."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def sac_sample(agent: Agent, s, xi):
    """Reparameterized squashed-Gaussian sample with fixed noise ``xi``.

    Returns ``(action, log_prob, parts)``; ``parts`` is reused by the gradient.
    """
    out = mlp_forward(agent.actor, s)
    mean, raw_log_std = agent._split_sac(out)
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    u = mean + std * xi
    a = np.tanh(u)
    logp = np.sum(-0.5 * xi * xi - log_std - _HALF_LOG_2PI - squash_correction(u), axis=-1)
    return a, logp


def sac_targets(agent: Agent, b: Batch, rng: Rng):
    xi = rng.normal((len(b), agent.action_dim))
    a2, logp2 = sac_sample(agent, b.s_next, xi)
    q1 = _q(agent.critic_targets[0], b.s_next, a2)
    q2 = _q(agent.critic_targets[1], b.s_next, a2)
    soft_v = np.minimum(q1, q2) - agent.config.alpha * logp2
    return _bootstrap(b.r, b.done, agent.config.gamma, soft_v)


def sac_actor_loss_and_grad(agent: Agent, s, xi):
    """Loss mean(alpha*log pi(a|s) - min_k Q_k(s, a)) and its actor gradient,
    with ``a`` reparameterized through the frozen noise ``xi``."""
    B, m = xi.shape
    alpha = agent.config.alpha
    out, acache = mlp_forward_cached(agent.actor, s)
    mean, raw_log_std = out[:, :m], out[:, m:]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    u = mean + std * xi
    a = np.tanh(u)
    logp = np.sum(-0.5 * xi * xi - log_std - _HALF_LOG_2PI - squash_correction(u), axis=1)

    x = np.concatenate([s, a], axis=1)
    q1, c1 = mlp_forward_cached(agent.critics[0], x)
    q2, c2 = mlp_forward_cached(agent.critics[1], x)
    q1, q2 = q1[:, 0], q2[:, 0]
    pick1 = q1 <= q2
    qmin = np.where(pick1, q1, q2)
    loss = float(np.mean(alpha * logp - qmin))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite actor loss {loss}")
    _, g1 = mlp_backward_cached(agent.critics[0], c1, np.where(pick1, -1.0 / B, 0.0)[:, None], need_param_grad=False)
    _, g2 = mlp_backward_cached(agent.critics[1], c2, np.where(pick1, 0.0, -1.0 / B)[:, None], need_param_grad=False)
    n = s.shape[1]
    g_a = g1[:, n:] + g2[:, n:]
    th = a
    g_u = g_a * (1.0 - th * th) + (2.0 * alpha / B) * th
    g_mean = g_u
    in_range = (raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX)
    g_log_std = np.where(in_range, g_u * std * xi - alpha / B, 0.0)
    grads, _ = mlp_backward_cached(
        agent.actor, acache, np.concatenate([g_mean, g_log_std], axis=1), need_input_grad=False
    )
    return loss, grads


def sac_update(agent: Agent, batch: Batch, rng: Rng) -> dict:
    if agent.kind != "sac":
        raise ValueError("sac_update needs a sac agent")
    cfg = agent.config
    y = sac_targets(agent, batch, rng)
    losses = [
        _regress_critic(c, o, cfg.critic_lr, batch.s, batch.a, y)[0]
        for c, o in zip(agent.critics, agent.critic_opts)
    ]
    xi = rng.normal((len(batch), agent.action_dim))
    actor_loss, grads = sac_actor_loss_and_grad(agent, batch.s, xi)
    adam_step(agent.actor, grads, agent.actor_opt, cfg.actor_lr)
    for ct, c in zip(agent.critic_targets, agent.critics):
        soft_update(ct, c, cfg.tau)
    agent.updates += 1
    return {"critic_loss": float(np.mean(losses)), "actor_loss": actor_loss}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def save_agent(agent: Agent, path, extra: Optional[dict] = None) -> None:
    os.makedirs(path, exist_ok=True)
    for name, params in agent.networks().items():
        with open(os.path.join(path, f"{name}.mlp"), "wb") as fh:
            fh.write(params.to_bytes())
    manifest = {
        "kind": agent.kind,
        "state_dim": agent.state_dim,
        "action_dim": agent.action_dim,
        "config": agent.config.to_dict(),
        "updates": agent.updates,
        "networks": sorted(agent.networks()),
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_manifest(path) -> dict:
    with open(os.path.join(path, MANIFEST)) as fh:
        return json.load(fh)


def load_agent(path) -> Agent:
    manifest = read_manifest(path)
    names = {f.name for f in fields(AgentConfig)}
    config = AgentConfig(**{k: v for k, v in manifest["config"].items() if k in names})
    agent = Agent(manifest["kind"], manifest["state_dim"], manifest["action_dim"], config, Rng(0))
    for name, params in agent.networks().items():
        with open(os.path.join(path, f"{name}.mlp"), "rb") as fh:
            loaded = MlpParams.from_bytes(fh.read())
        if not loaded.same_shape(params):
            raise ValueError(f"checkpoint network {name} has shape {loaded.dims}, expected {params.dims}")
        params.flat[...] = loaded.flat
    agent.updates = manifest["updates"]
    return agent
