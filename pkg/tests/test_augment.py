import numpy as np
import pytest

import _oracles as O
from cfrl.agents import COUNTERFACTUAL, FACTUAL, Agent, AgentConfig, ReplayBuffer
from cfrl.augment import (
    METRICS_COLUMNS,
    AugmentConfig,
    augmented_step,
    evaluate,
    random_policy_baseline,
    train_with_augmentation,
    write_metrics,
)
from cfrl.csp import CspPolicy, save_csp
from cfrl.envsim import Env, EnvConfig
from cfrl.numkit import Rng

TINY = AgentConfig(hidden=(16, 16))
SHORT = EnvConfig(episode_len=10)


def make_csp(seed=5, cfg=EnvConfig()):
    return CspPolicy(Agent("ddpg", cfg.state_dim, cfg.action_dim, TINY, Rng(seed)))


def test_augment_config_validation():
    assert AugmentConfig().validate() == []
    assert AugmentConfig(frequency=0).validate()


def test_augmented_step_matches_scripted_replay():
    cfg = EnvConfig()
    agent = Agent("ddpg", 16, 8, TINY, Rng(1))
    csp = make_csp()
    seed = 23
    env = Env(cfg, seed)
    env.reset()
    act_rng, cf_rng = Rng(2), Rng(3)
    act_copy, cf_copy = act_rng.copy(), cf_rng.copy()
    buf = ReplayBuffer(10)
    rec = augmented_step(env, agent, csp, act_rng, cf_rng, buf)

    streams = O.env_streams(seed)
    W = O.projection(16, 8)
    s_t = O.env_reset(streams, 16)
    coins = [float(c) for c in streams["clicks"].random(10)]
    eps = [float(e) for e in streams["drift"].standard_normal(16)]
    layers = [(Wl.tolist(), b.tolist(), a) for Wl, b, a in agent.actor.layers]
    clip = lambda v: min(1.0, max(-1.0, v))
    a_t = [clip(x + 0.1 * n) for x, n in zip(O.forward(layers, s_t), act_copy.normal(8))]
    r_t, s_next, _ = O.env_step(W, s_t, a_t, coins, eps)
    csp_layers = [(Wl.tolist(), b.tolist(), a) for Wl, b, a in csp.agent.actor.layers]
    _, s_cf, _ = O.env_step(W, s_t, O.forward(csp_layers, s_t), coins, eps)
    a_cf = [clip(x + 0.1 * n) for x, n in zip(O.forward(layers, s_cf), cf_copy.normal(8))]
    r_cf, s_cf_next, _ = O.env_step(W, s_cf, a_cf, coins, eps)

    f, c = rec.factual, rec.counterfactual
    np.testing.assert_allclose(f.s, s_t, atol=1e-12)
    np.testing.assert_allclose(f.a, a_t, atol=1e-12)
    assert f.r == r_t and not f.done and f.provenance == FACTUAL
    np.testing.assert_allclose(f.s_next, s_next, atol=1e-12)
    np.testing.assert_allclose(c.s, s_cf, atol=1e-12)
    np.testing.assert_allclose(c.a, a_cf, atol=1e-12)
    assert c.r == r_cf and not c.done and c.provenance == COUNTERFACTUAL
    np.testing.assert_allclose(c.s_next, s_cf_next, atol=1e-12)
    np.testing.assert_allclose(env.interest, s_next, atol=1e-12)
    assert [t.provenance for t in buf.contents()] == [FACTUAL, COUNTERFACTUAL]


def test_factual_successor_option():
    env = Env(EnvConfig(), 4)
    env.reset()
    rec = augmented_step(env, Agent("ddpg", 16, 8, TINY, Rng(0)), make_csp(), Rng(1), Rng(2), factual_successor=True)
    assert rec.counterfactual.s_next.tobytes() == rec.factual.s_next.tobytes()


def test_without_csp_record_is_factual_only():
    env = Env(EnvConfig(), 4)
    env.reset()
    rec = augmented_step(env, Agent("ddpg", 16, 8, TINY, Rng(0)), None, Rng(1))
    assert rec.counterfactual is None


@pytest.mark.parametrize("kind", ["ddpg", "td3", "sac"])
def test_disabled_augmentation_is_bitwise_baseline(kind):
    kw = dict(eval_every=1, eval_episodes=2, trace=True)
    base = train_with_augmentation(kind, SHORT, TINY, AugmentConfig(enabled=False), 3, 7, **kw)
    off = train_with_augmentation(kind, SHORT, TINY, AugmentConfig(enabled=False), 3, 7, csp=make_csp(), **kw)
    assert base.agent.param_vector().tobytes() == off.agent.param_vector().tobytes()
    assert base.metrics == off.metrics


def test_buffer_counts_and_factual_isolation():
    csp = make_csp()
    plain = train_with_augmentation("ddpg", SHORT, TINY, AugmentConfig(), 3, 9, trace=True, update=False)
    aug = train_with_augmentation("ddpg", SHORT, TINY, AugmentConfig(enabled=True), 3, 9, csp=csp, trace=True,
                                  update=False)
    assert len(aug.buffer) == 60
    assert aug.buffer.count(FACTUAL) == 30 and aug.buffer.count(COUNTERFACTUAL) == 30
    provs = [t.provenance for t in aug.buffer.contents()]
    assert provs == [FACTUAL, COUNTERFACTUAL] * 30
    # Without learning, the factual path is unaffected by the counterfactual branch.
    assert all(a.tobytes() == b.tobytes() for a, b in zip(plain.factual_states, aug.factual_states))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(plain.factual_actions, aug.factual_actions))


@pytest.mark.parametrize("capacity,freq", [(25, 1), (1000, 2), (1000, 3)])
def test_buffer_size_formula(capacity, freq):
    cfg = AgentConfig(hidden=(8,), buffer_capacity=capacity)
    res = train_with_augmentation("ddpg", SHORT, cfg, AugmentConfig(enabled=True, frequency=freq), 2, 0,
                                  csp=make_csp(), update=False)
    steps = 2 * SHORT.episode_len
    assert len(res.buffer) == min(capacity, steps + steps // freq)
    assert res.buffer.pushes[COUNTERFACTUAL] == steps // freq


def test_zero_budget():
    res = train_with_augmentation("td3", SHORT, TINY, AugmentConfig(), 0, 1)
    assert res.metrics == [] and res.agent.updates == 0 and len(res.buffer) == 0


def test_missing_checkpoint_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        train_with_augmentation("ddpg", SHORT, TINY, AugmentConfig(enabled=True), 1, 0)
    with pytest.raises(FileNotFoundError):
        train_with_augmentation("ddpg", SHORT, TINY, AugmentConfig(enabled=True, csp_checkpoint=str(tmp_path / "no")), 1, 0)


def test_checkpoint_loading_and_metrics_file(tmp_path):
    save_csp(make_csp(), tmp_path / "csp")
    aug = AugmentConfig(enabled=True, csp_checkpoint=str(tmp_path / "csp"))
    a = train_with_augmentation("sac", SHORT, TINY, aug, 2, 3, eval_every=1, eval_episodes=1, run_id="r")
    b = train_with_augmentation("sac", SHORT, TINY, aug, 2, 3, eval_every=1, eval_episodes=1, run_id="r")
    write_metrics(a.metrics, tmp_path / "a.csv")
    write_metrics(b.metrics, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRICS_COLUMNS)
    assert [r["episode"] for r in a.metrics] == [1, 2]
    assert a.metrics[-1]["buffer_cf_fraction"] == 0.5
    assert all(r["wall_ms"] == 0 for r in a.metrics)


def test_evaluate_is_repeatable():
    agent = Agent("ddpg", 16, 8, TINY, Rng(0))
    assert evaluate(agent, SHORT, 3, 4) == evaluate(agent, SHORT, 3, 4)
    avg, ctr = random_policy_baseline(SHORT, 3, 4)
    assert 0 <= avg <= SHORT.slots * SHORT.episode_len and 0 <= ctr <= 1
