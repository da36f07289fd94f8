"""Counterfactual state synthesis for replay-buffer augmentation in off-policy RL."""

from .agents import AGENT_KINDS, Agent, AgentConfig, ReplayBuffer, Transition
from .augment import AugmentConfig, augmented_step, evaluate, train_with_augmentation
from .config import ConfigError, RunConfig, load_config
from .csp import CspPolicy, CspTrainerConfig, PretrainedPolicy, csp_reward, csp_training_step, pretrain_policy, train_csp
from .envsim import Env, EnvConfig, intervene

__version__ = "0.1.0"
