"""The offline corridor-driving task: behaviour data, transitions, action scoring."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import reward
from .nn import seed_rng
from .policy import PolicyState, Transition
from .scene import ActionTriplet, SceneSample, rollout


def action_trajectory(scene: SceneSample, action) -> np.ndarray:
    return rollout(scene.ego_start, scene.ego_speed, action, len(scene.trajectory))


def action_reward(scene: SceneSample, action, config: reward.RewardConfig = reward.RewardConfig()) -> float:
    """Hybrid reward of the trajectory the action produces in ``scene``."""
    return reward.score(scene, action_trajectory(scene, action), config).r


def behavior_action(expert: ActionTriplet, rng: np.random.Generator) -> ActionTriplet:
    """A noisy logged action: mostly near the expert, sometimes badly off in steering or braking."""
    a = expert.as_array().copy()
    if rng.random() < 0.6:
        a[0] += rng.normal(0.0, 0.05)
    else:
        a[0] += rng.choice([-1.0, 1.0]) * rng.uniform(0.25, 0.7)
    a[1] += rng.normal(0.0, 0.08)
    if rng.random() < 0.2:
        a[2] = rng.uniform(0.0, 0.5)
    return ActionTriplet.from_array(a)


Predictor = Callable[[SceneSample, np.ndarray], tuple[np.ndarray, ActionTriplet, object]]


def ground_truth_predictor(frames: list[SceneSample], tokens: list[np.ndarray]) -> Predictor:
    """Predictor that returns the true next frame (tokens, action, nav)."""
    lookup = {id(f): i for i, f in enumerate(frames)}

    def predict(frame, _tok):
        i = lookup[id(frame)] + 1
        return tokens[i], frames[i].action, frames[i].nav

    return predict


def policy_state(prev_tokens: np.ndarray, predicted) -> PolicyState:
    tok, u0, nav = predicted
    return PolicyState(tokens_current=np.asarray(prev_tokens), tokens_predicted=np.asarray(tok), u0=u0, nav=nav)


def build_transitions(
    episodes: list[list[SceneSample]],
    episode_tokens: list[list[np.ndarray]],
    predictors: list[Predictor] | None = None,
    actions_per_state: int = 4,
    seed: int = 0,
    config: reward.RewardConfig = reward.RewardConfig(),
) -> tuple[list[Transition], list[SceneSample]]:
    """Transitions ``(s, a, R, s')`` from 3-frame episodes.

    ``s`` pairs frame 0's tokens with the predicted frame 1; the logged action
    acts in frame 1; ``s'`` pairs frame 1 with the predicted frame 2.  Returns
    the transitions and, aligned with them, the scene each action was scored in.
    """
    transitions, scenes = [], []
    for e, (frames, toks) in enumerate(zip(episodes, episode_tokens)):
        if len(frames) < 3:
            raise ValueError("episodes need at least three frames")
        predict = predictors[e] if predictors is not None else ground_truth_predictor(frames, toks)
        s = policy_state(toks[0], predict(frames[0], toks[0]))
        s_next = policy_state(toks[1], predict(frames[1], toks[1]))
        rng = seed_rng(seed, 51, e)
        for _ in range(actions_per_state):
            a = behavior_action(frames[1].action, rng)
            transitions.append(Transition(s=s, a=a, r=action_reward(frames[1], a, config), s_next=s_next))
            scenes.append(frames[1])
    return transitions, scenes


def mean_policy_reward(actions: np.ndarray, scenes: list[SceneSample],
                       config: reward.RewardConfig = reward.RewardConfig()) -> float:
    return float(np.mean([action_reward(sc, a, config) for sc, a in zip(scenes, actions)]))
