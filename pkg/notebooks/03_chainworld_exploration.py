"""
Exploration on a sparse chain
=============================

ChainWorld pays 0.1 for stepping left and 10 for walking all the way right.
A greedy agent settles on the small reward; Thompson sampling over the
epistemic spread keeps trying the long walk. Takes about two minutes.
"""

import dataclasses

import numpy as np

from ceqrdqn.agent import AgentConfig, CEQRAgent
from ceqrdqn.envs import ChainWorld

FRAMES = 12_000

for lam in (0.01, 0.0):
    cfg = dataclasses.replace(AgentConfig(), lambda_ep=lam)
    env = ChainWorld(length=10)
    agent = CEQRAgent(env.spec, cfg, seed=0)
    records = agent.train(env, FRAMES, env_seed=0)
    results = agent.evaluate(ChainWorld(length=10), 50, seed=1000)
    goal = np.mean([r.reached_goal for r in results])
    psi = np.nanmean([r.mean_psi_ep for r in records[-100:]])
    print(f"lambda_ep={lam:<5} episodes={len(records):5d} eval goal rate={goal:.2f} recent psi_ep={psi:.3f}")
