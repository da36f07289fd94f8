"""Synthetic interactive-recommendation environment with explicit SCM structure.

The user is a unit-norm interest vector. A recommendation is a continuous
action that the fixed projection ``W`` maps into interest space. Each step:

    p_click  = sigmoid(g * cos(interest, W a) + b0)
    clicks   = sum of K Bernoulli(p_click) coins           (noise: click coins)
    interest = normalize((1 - beta*ctr) interest + beta*ctr W a + sigma*eps)
                                                            (noise: eps ~ N(0, I))

The exogenous noise for a step is exactly the pair (click coins, eps). Both
come from labeled RNG sub-streams whose state is captured by snapshots, so
restoring a snapshot and stepping with a different action replays the same
noise under the replaced action.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .numkit import RNG_STATE_BYTES, NumericError, Rng, check_finite, pack_rng_state, unpack_rng_state

SNAPSHOT_MAGIC = b"CFES"
SNAPSHOT_VERSION = 1


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    state_dim: int = 16
    action_dim: int = 8
    slots: int = 10
    drift: float = 0.3
    noise: float = 0.05
    click_gain: float = 4.0
    click_bias: float = -1.0
    episode_len: int = 50
    projection_seed: int = 0

    def validate(self) -> list[str]:
        errs = []
        for name in ("state_dim", "action_dim", "slots", "episode_len"):
            if getattr(self, name) < 1:
                errs.append(f"env.{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.drift <= 1.0:
            errs.append(f"env.drift must be in [0, 1], got {self.drift}")
        if not self.noise >= 0.0:
            errs.append(f"env.noise must be >= 0, got {self.noise}")
        for name in ("click_gain", "click_bias", "drift", "noise"):
            if not np.isfinite(getattr(self, name)):
                errs.append(f"env.{name} must be finite")
        return errs

    def projection(self) -> np.ndarray:
        """The fixed action->interest map W, shape [state_dim, action_dim].

        Entries are N(0, 1/state_dim) so each column has roughly unit norm.
        """
        rng = Rng(self.projection_seed).fork("projection")
        return rng.normal((self.state_dim, self.action_dim)) / np.sqrt(self.state_dim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EnvState:
    interest: np.ndarray
    step: int


@dataclass(frozen=True)
class EnvSnapshot:
    config: EnvConfig
    state: EnvState
    rng_states: dict

    def to_bytes(self) -> bytes:
        n = self.state.interest.shape[0]
        return b"".join(
            [
                SNAPSHOT_MAGIC,
                struct.pack("<III", SNAPSHOT_VERSION, n, self.state.step),
                self.state.interest.astype("<f8").tobytes(),
                *(pack_rng_state(self.rng_states[k]) for k in Env.STREAMS),
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes, config: EnvConfig) -> "EnvSnapshot":
        if data[:4] != SNAPSHOT_MAGIC:
            raise ValueError("not an environment snapshot (bad magic)")
        version, n, step = struct.unpack_from("<III", data, 4)
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        off = 16
        interest = np.frombuffer(data[off : off + 8 * n], dtype="<f8").astype(np.float64)
        off += 8 * n
        states = {}
        for k in Env.STREAMS:
            states[k] = unpack_rng_state(data[off : off + RNG_STATE_BYTES])
            off += RNG_STATE_BYTES
        return cls(config, EnvState(interest, step), states)


@dataclass(frozen=True)
class StepOutcome:
    next_state: np.ndarray
    reward: float
    ctr: float
    done: bool

    def same_as(self, other: "StepOutcome") -> bool:
        """Bitwise equality of every field."""
        return (
            self.next_state.tobytes() == other.next_state.tobytes()
            and struct.pack("<dd?", self.reward, self.ctr, self.done)
            == struct.pack("<dd?", other.reward, other.ctr, other.done)
        )


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v) / (nu * nv)


class Env:
    """One user trajectory. Single owner; not thread-safe."""

    STREAMS = ("init", "clicks", "drift")

    def __init__(self, config: EnvConfig, seed: int):
        errs = config.validate()
        if errs:
            raise ValueError("; ".join(errs))
        self.config = config
        self.W = config.projection()
        root = Rng(seed)
        self.rngs = {name: root.fork(name) for name in self.STREAMS}
        self.interest = np.zeros(config.state_dim)
        self.step_count = config.episode_len  # must reset before stepping

    @property
    def state(self) -> EnvState:
        return EnvState(self.interest.copy(), self.step_count)

    @property
    def done(self) -> bool:
        return self.step_count >= self.config.episode_len

    def reset(self) -> EnvState:
        """Start a new episode with interest drawn uniformly from the unit sphere."""
        x = self.rngs["init"].normal(self.config.state_dim)
        self.interest = x / np.sqrt(x @ x)
        self.step_count = 0
        return self.state

    def click_prob(self, interest: np.ndarray, action: np.ndarray) -> float:
        c = self.config
        return sigmoid(c.click_gain * cosine(interest, self.W @ action) + c.click_bias)

    def step(self, action) -> StepOutcome:
        c = self.config
        if self.done:
            raise EnvError("step called on a finished episode; reset first")
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (c.action_dim,):
            raise ValueError(f"action shape {a.shape} != ({c.action_dim},)")
        check_finite(a, "action")
        wa = self.W @ a
        p = sigmoid(c.click_gain * cosine(self.interest, wa) + c.click_bias)
        coins = self.rngs["clicks"].uniform(c.slots)
        clicks = int(np.count_nonzero(coins < p))
        ctr = clicks / c.slots
        eps = self.rngs["drift"].normal(c.state_dim)
        w = c.drift * ctr
        if w == 0.0 and c.noise == 0.0:
            new = self.interest.copy()
        else:
            mix = (1.0 - w) * self.interest + w * wa + c.noise * eps
            norm = math.sqrt(float(mix @ mix))
            if not norm > 0.0 or not math.isfinite(norm):
                raise NumericError("interest collapsed to zero norm")
            new = mix / norm
        self.interest = new
        self.step_count += 1
        return StepOutcome(new.copy(), float(clicks), ctr, self.step_count == c.episode_len)

    def snapshot(self) -> EnvSnapshot:
        return EnvSnapshot(
            self.config,
            self.state,
            {k: r.get_state() for k, r in self.rngs.items()},
        )

    def restore(self, snap: EnvSnapshot) -> None:
        if snap.config != self.config:
            raise EnvError("snapshot was taken from an environment with a different config")
        self.interest = snap.state.interest.copy()
        self.step_count = snap.state.step
        for k, r in self.rngs.items():
            r.set_state(snap.rng_states[k])

    def replace_state(self, snap: EnvSnapshot, interest: np.ndarray) -> None:
        """Restore ``snap`` but with a substituted interest vector.

        The pending exogenous noise is the snapshot's, so the next step sees
        the same click coins and drift noise the snapshot would have.
        """
        self.restore(snap)
        self.interest = np.array(interest, dtype=np.float64)


def env_reset(config: EnvConfig, seed: int):
    env = Env(config, seed)
    return env, env.reset()


def env_step(env: Env, action) -> StepOutcome:
    return env.step(action)


def env_snapshot(env: Env) -> EnvSnapshot:
    return env.snapshot()


def env_restore(env: Env, snap: EnvSnapshot) -> None:
    env.restore(snap)


def intervene(env: Env, snap: EnvSnapshot, counterfactual_action) -> StepOutcome:
    """do(A := a_c) at the snapshot's state, reusing the snapshot's exogenous noise."""
    env.restore(snap)
    return env.step(counterfactual_action)
