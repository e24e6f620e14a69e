"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line
shown in the pytest terminal summary (see conftest.py).

Oracles are independent of the package: scipy quadrature for the NIG identities,
central finite differences for gradients, Monte-Carlo for action selection.
"""
import dataclasses
import math
import time

import numpy as np
from scipy import integrate, stats

from ceqrdqn.agent import AgentConfig, CEQRAgent, ReplayBuffer, Transition, bellman_target, thompson_choice
from ceqrdqn.cli import main
from ceqrdqn.envs import ChainWorld
from ceqrdqn.evidential import NIGParams, NIGQuantileSet, aleatoric, decompose, nig_density, student_t_marginal_logpdf
from ceqrdqn.gradcheck import CASES, TOLERANCE, run_suite
from ceqrdqn.nnet import QNetwork, softplus_np
from ceqrdqn.synthetic import SyntheticConfig, fit_and_evaluate, generate


def _log_sigma2_bounds(G, upper_tail):
    lo = stats.invgamma.ppf(1e-12, G.alpha, scale=G.beta)
    hi = stats.invgamma.ppf(1 - upper_tail, G.alpha, scale=G.beta)
    return math.log(lo), math.log(hi)


def _mu_halfwidth(G):
    return lambda t: 12 * math.sqrt(math.exp(t) / G.v)


def nig_mass(G):
    """Double integral of the joint density over mu and log(sigma^2)."""
    a, b = _log_sigma2_bounds(G, 1e-9)
    w = _mu_halfwidth(G)
    val, _ = integrate.dblquad(lambda mu, t: nig_density(mu, math.exp(t), G) * math.exp(t), a, b,
                               lambda t: G.gamma - w(t), lambda t: G.gamma + w(t), epsabs=1e-10, epsrel=1e-9)
    return val


def normal_nig_marginal(y, G):
    a, b = _log_sigma2_bounds(G, 1e-11)
    w = _mu_halfwidth(G)

    def f(mu, t):
        s2 = math.exp(t)
        return stats.norm.pdf(y, mu, math.sqrt(s2)) * nig_density(mu, s2, G) * s2

    val, _ = integrate.dblquad(f, a, b, lambda t: G.gamma - w(t), lambda t: G.gamma + w(t),
                               epsabs=1e-11, epsrel=1e-9)
    return val


def inverse_gamma_mean(alpha, beta):
    def f(t):
        return math.exp(2 * t + stats.invgamma.logpdf(math.exp(t), alpha, scale=beta)) if t < 700 else 0.0

    val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=1e-12, epsrel=1e-11, limit=2000)
    return val


def random_nig(rng, n):
    return [NIGParams(rng.uniform(-3, 3), rng.uniform(0.1, 10), rng.uniform(1.1, 10), rng.uniform(0.1, 10))
            for _ in range(n)]


def test_criterion_01_gradients(report):
    t0 = time.perf_counter()
    rows = run_suite(trials=50, composed_trials=10, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(max(r["direct"], r["composed"]) for r in rows)
    covered = {r["loss"] for r in rows} == {c.name for c in CASES}
    ok = all(r["passed"] for r in rows) and covered and all(r["trials"] >= 50 for r in rows) and elapsed < 60
    report(1, ok, f"{len(rows)} losses x 50 inputs, worst rel err {worst:.1e} (tol {TOLERANCE:.0e}), {elapsed:.0f}s")


def test_criterion_02_nig_normalisation(report):
    corners = [NIGParams(0.0, v, a, b) for v in (0.1, 10) for a in (1.1, 10) for b in (0.1, 10)]
    settings = corners + random_nig(np.random.default_rng(2), 4)
    errors = [abs(nig_mass(G) - 1.0) for G in settings]
    report(2, len(settings) >= 10 and max(errors) <= 1e-3,
           f"{len(settings)} settings, max |mass - 1| = {max(errors):.1e}")


def test_criterion_03_marginal_and_aleatoric(report):
    rng = np.random.default_rng(3)
    pairs = [(G.gamma + 2.0 * rng.standard_normal(), G) for G in random_nig(rng, 20)]
    marg = max(abs(math.exp(student_t_marginal_logpdf(y, G)) - normal_nig_marginal(y, G)) for y, G in pairs)
    al_params = [(1.1, 0.1), (1.1, 10.0)] + [(rng.uniform(1.1, 10), rng.uniform(0.1, 10)) for _ in range(8)]
    al = max(abs(aleatoric(NIGParams(0, 1, a, b)) - inverse_gamma_mean(a, b)) for a, b in al_params)
    report(3, marg <= 1e-4 and al <= 1e-4,
           f"marginal max abs err {marg:.1e} over {len(pairs)} (y, G); aleatoric max abs err {al:.1e}")


def test_criterion_04_decomposition(report):
    rng = np.random.default_rng(4)
    params = random_nig(rng, 10_000) + [NIGParams(0, 1e-6, 1 + 1e-9, 1e6), NIGParams(0, 1e6, 1e6, 1e-6)]
    worst = 0.0
    for G in params:
        est = decompose(G)
        worst = max(worst, abs(est.epistemic * G.v - est.aleatoric) / est.aleatoric)
    report(4, worst <= 4 * np.finfo(float).eps, f"{len(params)} NIGParams, max rel gap {worst:.1e}")


def test_criterion_05_action_selection(report):
    rng = np.random.default_rng(5)
    A, N = 4, 8
    agree = 0
    trials = 10_000
    for _ in range(trials):
        quantiles = rng.normal(size=(A, N))
        raw = rng.normal(size=(4, A, 2, N))
        nig = NIGQuantileSet(raw[0], softplus_np(raw[1]), 1 + softplus_np(raw[2]), softplus_np(raw[3]))
        choice = thompson_choice(quantiles, nig, 1e-14, 0.0, rng)
        agree += choice.action == int(np.argmax(quantiles.mean(axis=1)))
    shape = (2, 2, N)
    sym = NIGQuantileSet(np.zeros(shape), np.ones(shape), np.full(shape, 2.0), np.ones(shape))
    picks = [thompson_choice(np.zeros((2, N)), sym, AgentConfig().lambda_ep, 0.0, rng).action
             for _ in range(trials)]
    split = float(np.mean(picks))
    report(5, agree == trials and abs(split - 0.5) <= 0.02,
           f"greedy agreement {agree}/{trials}; symmetric split {split:.3f}")


def test_criterion_06_bellman_target(report):
    net = QNetwork(1, 6, 1, 3, 8, seed=6)
    rng = np.random.default_rng(6)
    states = rng.integers(0, 2, size=(16, 1, 6, 1)).astype(float)
    rewards = rng.normal(size=16)
    done = bellman_target(net, rewards, states, np.ones(16, bool), 0.99)
    ok_done = np.array_equal(done, np.broadcast_to(rewards[:, None], done.shape))
    zero = bellman_target(net, rewards, states, np.zeros(16, bool), 0.0)
    ok_zero = np.array_equal(zero, np.broadcast_to(rewards[:, None], zero.shape))
    # powers of two make the scaling exact in floating point
    c, gamma = 2.0, 0.5
    base = bellman_target(net, np.zeros(16), states, np.zeros(16, bool), gamma)
    scaled_net = net.clone()
    for name in ("action_head.weight", "action_head.bias"):
        scaled_net.params[name].data *= c
    scaled = bellman_target(scaled_net, np.zeros(16), states, np.zeros(16, bool), gamma)
    nxt = net.action_quantiles(states).data
    best = nxt.mean(axis=-1).argmax(axis=-1)
    expected = c * gamma * nxt[np.arange(16), best]
    ok_lin = np.array_equal(scaled, expected) and np.array_equal(scaled, c * base)
    report(6, ok_done and ok_zero and ok_lin,
           f"done exact {ok_done}, gamma=0 exact {ok_zero}, scale-by-c exact {ok_lin}")


def test_criterion_07_synthetic(report):
    t0 = time.perf_counter()
    lines, good = [], 0
    for seed in range(5):
        rep = fit_and_evaluate(generate(2000, 1000, seed), SyntheticConfig(seed=seed))
        cov_ok = abs(rep.coverage_in - 0.90) <= 0.03
        ood_ok = rep.epistemic_ratio >= 3.0
        good += cov_ok and ood_ok
        lines.append(f"s{seed}: cov {rep.coverage_in:.3f} ratio {rep.epistemic_ratio:.2f}")
    elapsed = time.perf_counter() - t0
    report(7, good >= 4 and elapsed < 600,
           f"{good}/5 seeds pass (coverage 0.90+-0.03 and OOD epistemic >= 3x); {'; '.join(lines)}; {elapsed:.0f}s")


def _chain_run(cfg, seed, frames, eval_episodes=50):
    env = ChainWorld(length=10)
    agent = CEQRAgent(env.spec, cfg, seed=seed)
    agent.train(env, frames, env_seed=seed)
    results = agent.evaluate(ChainWorld(length=10), eval_episodes, seed=1000 + seed)
    return np.mean([r.reached_goal for r in results]), np.mean([r.ret for r in results])


def test_criterion_08_chainworld(report):
    frames = 12_000
    t0 = time.perf_counter()
    cfg = AgentConfig()
    greedy = dataclasses.replace(cfg, lambda_ep=0.0)
    main_runs = [_chain_run(cfg, s, frames) for s in range(5)]
    ablation = [_chain_run(greedy, s, frames) for s in range(5)]
    elapsed = time.perf_counter() - t0
    hits = sum(goal >= 0.8 for goal, _ in main_runs)
    ret_main = float(np.mean([r for _, r in main_runs]))
    ret_greedy = float(np.mean([r for _, r in ablation]))
    goals = ", ".join(f"{g:.2f}" for g, _ in main_runs)
    report(8, hits >= 4 and ret_main > ret_greedy and elapsed < 900,
           f"{frames} frames: goal rates [{goals}] ({hits}/5 >= 0.8); mean eval return {ret_main:.2f} "
           f"vs greedy ablation {ret_greedy:.2f}; {elapsed:.0f}s")


def test_criterion_09_replay_and_sync(report):
    buf = ReplayBuffer(3, (1, 1, 1), 2)
    gated = not buf.ready
    for k in range(5):
        buf.push(Transition(np.zeros((1, 1, 1)), 0, float(k), np.zeros((1, 1, 1)), False))
        if k == 0:
            gated = gated and not buf.ready
    fifo = [t.reward for t in buf.transitions()] == [2.0, 3.0, 4.0]
    gated = gated and buf.ready

    cfg = AgentConfig(num_quantiles=4, batch_size=4, replay_start=8, buffer_capacity=256)
    env = ChainWorld(length=4)
    agent = CEQRAgent(env.spec, cfg, seed=9)
    sync_steps, exact = [], True
    previous = agent.target_net.state_dict()
    frames = cfg.replay_start - 1
    while agent.opt_steps < 2 * cfg.target_sync_period:
        frames += 1
        agent.train(env, frames)
        current = agent.target_net.state_dict()
        if any(not np.array_equal(previous[k], current[k]) for k in current):
            sync_steps.append(agent.opt_steps)
            exact = exact and all(np.array_equal(agent.net.params[k].data, current[k]) for k in current)
        previous = current
    sync_ok = sync_steps == [1000, 2000] and exact
    report(9, fifo and gated and sync_ok, f"FIFO {fifo}, threshold gating {gated}, target changed at steps {sync_steps}"
                                          f" with exact copies {exact}")


def test_criterion_10_determinism(report, tmp_path):
    configs = {
        "chainworld": "[agent]\nnum_quantiles = 8\nbatch_size = 8\nreplay_start = 64\n[env]\nname = chainworld\n"
                      "[run]\neval_episodes = 5\n",
        "trapmaze": "[agent]\nnum_quantiles = 8\nbatch_size = 8\nreplay_start = 64\nlambda_al = 0.1\n"
                    "[env]\nname = trapmaze\np_trap = 0.5\n[run]\neval_episodes = 2\n",
    }
    identical = []
    for name, text in configs.items():
        path = tmp_path / f"{name}.ini"
        path.write_text(text)
        first = tmp_path / f"{name}_a"
        main(["train-rl", "--config", str(path), "--seed", "11", "--frames", "400", "--out", str(first)])
        second = tmp_path / f"{name}_b"
        main(["train-rl", "--config", str(first / "resolved_config.ini"), "--out", str(second)])
        identical.append((first / "metrics_seed11.csv").read_bytes() == (second / "metrics_seed11.csv").read_bytes())
    report(10, all(identical), f"byte-identical metrics CSV on rerun from resolved config: "
                               f"{dict(zip(configs, identical))}")
