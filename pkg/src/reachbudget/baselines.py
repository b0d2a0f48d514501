"""Reward-scalarization baseline and the two-state analytic testbed.

The baseline trains a standard clipped-surrogate policy on a weighted
reward that folds goal bonus, failure penalty, and step cost into one
scalar. It sees the raw state only (no budget input) and each weight
setting carves out a single point on the reach/cost trade-off, which
is what the budget-conditioned trainer avoids.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import approx
from .envkit.base import ReachAvoidProblem
from .envkit.tabular import TabularMDP
from .rcppo import TrainResult, ppo_policy_loss, value_loss


@dataclass
class LagrangianRewardConfig:
    """Weights of the scalarized reward.

    reward = r_goal * 1[x' in goal] - p_goal * 1[x' not in goal]
             - beta * (c_fail * 1[x' in avoid] + step_cost)
    plus, when shaping is enabled, the potential difference
    gamma * phi(x') - phi(x) with phi = -shaping_k * goal_distance.
    """

    beta: float = 1.0
    c_fail: float = 20.0
    r_goal: float = 20.0
    p_goal: float = 0.0
    shaping_enabled: bool = False
    shaping_k: float = 1.0
    gamma: float = 0.99

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.shaping_k < 0:
            raise ValueError("shaping_k must be nonnegative")


def potential_phi(problem: ReachAvoidProblem, x: np.ndarray, cfg: LagrangianRewardConfig) -> np.ndarray:
    """Shaping potential, identically zero when shaping is off."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if not cfg.shaping_enabled:
        out = np.zeros(1 if single else x.shape[0])
        return float(out[0]) if single else out
    return -cfg.shaping_k * problem.goal_distance(x)


def lagrangian_reward(
    problem: ReachAvoidProblem,
    x: np.ndarray,
    u: np.ndarray,
    x_next: np.ndarray,
    cost: np.ndarray | float,
    cfg: LagrangianRewardConfig,
) -> np.ndarray | float:
    """Scalarized per-step reward for the given transition."""
    in_g = np.asarray(problem.in_goal(x_next))
    in_f = np.asarray(problem.in_avoid(x_next))
    r = (
        cfg.r_goal * in_g.astype(np.float64)
        - cfg.p_goal * (~in_g).astype(np.float64)
        - cfg.beta * (cfg.c_fail * in_f.astype(np.float64) + np.asarray(cost, dtype=np.float64))
    )
    if cfg.shaping_enabled:
        r = r + cfg.gamma * potential_phi(problem, x_next, cfg) - potential_phi(problem, x, cfg)
    if np.ndim(r) == 0 or (hasattr(r, "shape") and r.shape == ()):
        return float(r)
    return r


@dataclass
class BaselineConfig:
    """Knobs for the scalarized-reward trainer."""

    reward: LagrangianRewardConfig = field(default_factory=LagrangianRewardConfig)
    total_steps: int = 200_000
    n_envs: int = 16
    epochs: int = 10
    minibatch_size: int = 256
    lr: float = 3e-4
    clip_eps: float = 0.2
    entropy_coef: float = 1e-2
    gamma: float = 0.99
    lam: float = 0.95
    hidden: tuple[int, ...] = (256, 256)
    init_log_std: float = 0.0
    seed: int = 0


def _reward_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    tail_value: float,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Standard residual-based advantage estimate and value targets."""
    t_len = len(rewards)
    v_next = np.concatenate([values[1:], [tail_value]])
    deltas = rewards + gamma * v_next - values
    adv = np.empty(t_len)
    acc = 0.0
    for t in range(t_len - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv, adv + values


def train_ppo_baseline(problem: ReachAvoidProblem, cfg: BaselineConfig) -> TrainResult:
    """Clipped-surrogate training on the scalarized reward.

    Episodes run on the raw state and end on raw goal entry or at
    horizon_max; safety violations only cost reward. Logging schema
    matches the budget-conditioned trainer so curves are comparable:
    mean_cost_reached is always the raw step-cost sum, never the
    scalarized reward. Deterministic given cfg.seed.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    scale = problem.obs_scale
    rcfg = cfg.reward
    obs_dim = problem.state_dim
    policy = approx.policy_init(
        obs_dim, problem.action_low, problem.action_high, rng,
        hidden=cfg.hidden, init_log_std=cfg.init_log_std,
    )
    value_params = approx.mlp_init((obs_dim, *cfg.hidden, 1), rng)
    pol_adam = approx.AdamState.for_params(policy.trainable(), cfg.lr)
    val_adam = approx.AdamState.for_params(value_params.trainable(), cfg.lr)
    # keeps the regression target O(1) at the largest per-step rewards
    val_scale = max(
        1.0, rcfg.r_goal, rcfg.p_goal,
        rcfg.beta * (rcfg.c_fail + problem.max_step_cost()),
    )

    meta = {
        "algorithm": "ppo_lagrangian",
        "env": problem.name,
        "obs_scale": [float(v) for v in scale],
        "gamma": cfg.gamma,
        "hidden": list(cfg.hidden),
        "seed": cfg.seed,
        "value_scale": val_scale,
        "reward": {
            "beta": rcfg.beta, "c_fail": rcfg.c_fail, "r_goal": rcfg.r_goal,
            "p_goal": rcfg.p_goal, "shaping_enabled": rcfg.shaping_enabled,
            "shaping_k": rcfg.shaping_k,
        },
    }

    log_rows: list[dict] = []
    env_steps = 0
    iteration = 0
    t_cap = problem.horizon_max
    n = cfg.n_envs
    while env_steps < cfg.total_steps:
        frac = env_steps / cfg.total_steps
        pol_adam.base_lr = cfg.lr * (1.0 - frac)
        val_adam.base_lr = cfg.lr * (1.0 - frac)
        ent_now = cfg.entropy_coef * (1.0 - frac)

        x = np.atleast_2d(problem.sample_initial(rng, n))
        alive = ~np.asarray(problem.in_goal(x))
        steps_taken = np.zeros(n, dtype=int)
        reached = ~alive
        lane_rows, obs_rows, act_rows, logp_rows = [], [], [], []
        rew_rows, val_rows, cost_rows = [], [], []
        while alive.any():
            idx = np.flatnonzero(alive)
            obs = np.atleast_2d(x[idx]) / scale
            act, raw, logp = approx.policy_sample(policy, obs, rng)
            vals = approx.mlp_forward(value_params, obs)[:, 0] * val_scale
            x_next, c = problem.step_and_cost(x[idx], act)
            rew = lagrangian_reward(problem, x[idx], act, x_next, c, rcfg)

            lane_rows.append(idx)
            obs_rows.append(obs)
            act_rows.append(raw)
            logp_rows.append(logp)
            rew_rows.append(np.asarray(rew, dtype=np.float64))
            val_rows.append(vals)
            cost_rows.append(np.asarray(c, dtype=np.float64))

            steps_taken[idx] += 1
            done_goal = np.asarray(problem.in_goal(x_next))
            done_trunc = (~done_goal) & (steps_taken[idx] >= t_cap)
            x[idx] = x_next
            reached[idx[done_goal]] = True
            alive[idx] = ~(done_goal | done_trunc)

        lane_cat = np.concatenate(lane_rows)
        obs_cat = np.concatenate(obs_rows)
        act_cat = np.concatenate(act_rows)
        logp_cat = np.concatenate(logp_rows)
        rew_cat = np.concatenate(rew_rows)
        val_cat = np.concatenate(val_rows)
        cost_cat = np.concatenate(cost_rows)

        adv_parts, ret_parts, sel_parts = [], [], []
        ep_costs, ep_reached = [], []
        for lane in range(n):
            sel = lane_cat == lane
            if not sel.any():
                ep_reached.append(bool(reached[lane]))
                ep_costs.append(0.0)
                continue
            if reached[lane]:
                tail = 0.0
            else:
                final_obs = np.atleast_2d(x[lane]) / scale
                tail = float(approx.mlp_forward(value_params, final_obs)[0, 0] * val_scale)
            adv, ret = _reward_gae(rew_cat[sel], val_cat[sel], tail, cfg.gamma, cfg.lam)
            adv_parts.append(adv)
            ret_parts.append(ret)
            sel_parts.append(sel)
            ep_reached.append(bool(reached[lane]))
            ep_costs.append(float(cost_cat[sel].sum()))
        env_steps += len(lane_cat)
        iteration += 1
        if not adv_parts:
            continue
        order_map = np.concatenate([np.flatnonzero(s) for s in sel_parts])
        obs_all = obs_cat[order_map]
        act_all = act_cat[order_map]
        logp_all = logp_cat[order_map]
        adv = np.concatenate(adv_parts)
        ret_all = np.concatenate(ret_parts)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        n_samples = obs_all.shape[0]
        last_p, last_v = math.nan, math.nan
        stats_acc: dict[str, float] = {}
        for _ in range(cfg.epochs):
            order = rng.permutation(n_samples)
            for lo in range(0, n_samples, cfg.minibatch_size):
                mb = order[lo : lo + cfg.minibatch_size]
                p_loss, p_grads, stats = ppo_policy_loss(
                    policy, obs_all[mb], act_all[mb], logp_all[mb], adv[mb],
                    cfg.clip_eps, ent_now,
                )
                approx.adam_step(pol_adam, policy.trainable(), p_grads)
                v_loss, v_grads = value_loss(
                    value_params, obs_all[mb], ret_all[mb], val_scale
                )
                approx.adam_step(val_adam, value_params.trainable(), v_grads)
                if not (math.isfinite(p_loss) and math.isfinite(v_loss)):
                    raise RuntimeError(
                        f"non-finite loss at iteration {iteration} "
                        f"(policy {p_loss}, value {v_loss})"
                    )
                last_p, last_v = p_loss, v_loss
                stats_acc = stats

        reached_costs = [c for c, r in zip(ep_costs, ep_reached) if r]
        log_rows.append(
            {
                "iteration": iteration,
                "env_steps": env_steps,
                "reach_rate": float(np.mean(ep_reached)),
                "mean_cost_reached": float(np.mean(reached_costs)) if reached_costs else math.nan,
                "policy_loss": last_p,
                "value_loss": last_v,
                "entropy": stats_acc.get("entropy", math.nan),
                "kl_estimate": stats_acc.get("kl_estimate", math.nan),
            }
        )
    return TrainResult(policy=policy, value=value_params, log_rows=log_rows, meta=meta)


# -- weight sweep ----------------------------------------------------------------


def _grid_cell(args: tuple) -> dict:
    problem, base_cfg, r_goal, p_goal, beta, seed, n_eval, eval_seed = args
    from .rcppo import evaluate_policy  # local import keeps workers lean

    row = {"r_goal": r_goal, "p_goal": p_goal, "beta": beta, "seed": seed}
    try:
        reward = LagrangianRewardConfig(
            beta=beta, r_goal=r_goal, p_goal=p_goal,
            c_fail=base_cfg.reward.c_fail,
            shaping_enabled=base_cfg.reward.shaping_enabled,
            shaping_k=base_cfg.reward.shaping_k,
            gamma=base_cfg.gamma,
        )
        cfg = BaselineConfig(
            reward=reward,
            total_steps=base_cfg.total_steps,
            n_envs=base_cfg.n_envs,
            epochs=base_cfg.epochs,
            minibatch_size=base_cfg.minibatch_size,
            lr=base_cfg.lr,
            clip_eps=base_cfg.clip_eps,
            entropy_coef=base_cfg.entropy_coef,
            gamma=base_cfg.gamma,
            lam=base_cfg.lam,
            hidden=base_cfg.hidden,
            seed=seed,
        )
        result = train_ppo_baseline(problem, cfg)
        report = evaluate_policy(problem, result.policy, result.meta, None, n_eval, eval_seed)
        row["reach_rate"] = report["reach_rate"]
        row["mean_cost"] = report["mean_cost_reached"]
        row["error"] = ""
    except Exception as exc:  # a failed cell must not sink the sweep
        row["reach_rate"] = math.nan
        row["mean_cost"] = math.nan
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def pareto_front(rows: list[dict]) -> list[bool]:
    """True where no other cell has reach >= and cost <= with one strict.

    Cells without a cost estimate (never reached) count as infinitely
    expensive, so they sit on the front only if nothing reaches at all.
    """
    def key(r):
        reach = r["reach_rate"]
        cost = r["mean_cost"]
        reach = -math.inf if reach is None or math.isnan(reach) else reach
        cost = math.inf if cost is None or (isinstance(cost, float) and math.isnan(cost)) else cost
        return reach, cost

    marks = []
    for i, row in enumerate(rows):
        ri, ci = key(row)
        dominated = False
        for j, other in enumerate(rows):
            if i == j:
                continue
            rj, cj = key(other)
            if rj >= ri and cj <= ci and (rj > ri or cj < ci):
                dominated = True
                break
        marks.append(not dominated)
    return marks


def grid_search(
    problem: ReachAvoidProblem,
    base_cfg: BaselineConfig,
    r_goal_values: list[float],
    p_goal_values: list[float],
    beta_values: list[float],
    n_eval_episodes: int = 50,
    seed: int = 0,
    n_workers: int = 1,
) -> list[dict]:
    """Train one baseline per weight combination and mark the front.

    Every cell gets an independent seed stream spawned from the root
    seed, so the sweep is reproducible regardless of worker count or
    completion order. A crashed cell is recorded with its error string
    instead of aborting the sweep.
    """
    ss = np.random.SeedSequence(seed)
    cells = [
        (r, p, b)
        for r in r_goal_values
        for p in p_goal_values
        for b in beta_values
    ]
    children = ss.spawn(len(cells) + 1)
    eval_seed = int(children[-1].generate_state(1)[0] % (2**31))
    jobs = [
        (
            problem, base_cfg, r, p, b,
            int(children[i].generate_state(1)[0] % (2**31)),
            n_eval_episodes, eval_seed,
        )
        for i, (r, p, b) in enumerate(cells)
    ]
    if n_workers <= 1:
        rows = [_grid_cell(job) for job in jobs]
    else:
        import multiprocessing as mp

        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")
        ctx = mp.get_context("spawn")
        with ctx.Pool(n_workers) as pool:
            rows = pool.map(_grid_cell, jobs)
    for row, mark in zip(rows, pareto_front(rows)):
        row["on_front"] = mark
    return rows


def write_grid_csv(path: str, rows: list[dict]) -> None:
    import csv

    cols = ["r_goal", "p_goal", "beta", "reach_rate", "mean_cost", "on_front", "error"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([
                repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols
            ])


# -- two-state analytic testbed ---------------------------------------------------


def _policy_stats(mdp: TabularMDP, probs: np.ndarray) -> tuple[float, float, float]:
    """(reach_prob, expected_reward, expected_cost) for first-action
    probabilities probs[i] of taking action 0 at initial state i."""
    reach = reward = cost = 0.0
    goal = mdp.goal_mask
    for i, s in enumerate(mdp.initial_states):
        w = mdp.initial_probs[i]
        p = probs[i]
        pi = np.array([p, 1.0 - p])
        reach += w * float(pi @ goal[mdp.next_state[s]])
        reward += w * float(pi @ mdp.reward[s])
        cost += w * float(pi @ mdp.cost[s])
    return reach, reward, cost


def _enumerate_best(mdp: TabularMDP, objective, step: float = 1e-3) -> tuple[np.ndarray, float]:
    """Exhaustive grid search over the two first-action probabilities.

    Among grid points within 1e-9 of the best score, the largest
    probabilities win, matching the analytic tie convention (ties
    resolve toward probability one).
    """
    grid = np.arange(0.0, 1.0 + step / 2, step)
    p_a, p_b = np.meshgrid(grid, grid, indexing="ij")
    scores = objective(p_a, p_b)
    best = float(np.max(scores))
    tied = np.argwhere(scores >= best - 1e-9)
    i, j = max(tied, key=tuple)
    return np.array([grid[i], grid[j]]), float(scores[i, j])


def two_start_bandit_solvers(mdp: TabularMDP, mode: str, parameter: float | None = None) -> dict:
    """Optimal stochastic first-step policies of the two-state testbed.

    The testbed has two equally likely initial states, two actions
    each, and all randomness confined to the first step, so any policy
    reduces to the pair (p_a, p_b) of probabilities of action 0. Modes:

      - "reach_min_cost": minimize expected cost among policies that
        reach the goal with probability one.
      - "scalarized": maximize reward - parameter * cost; ties between
        the endpoints resolve toward probability one.
      - "thresholded": maximize reward subject to cost <= parameter.

    All three read their coefficients off the tables, solve the tiny
    linear program analytically, and cross-check against a dense grid
    enumeration included in the result.
    """
    if len(mdp.initial_states) != 2 or mdp.n_actions != 2:
        raise ValueError("solver expects two initial states and two actions")
    goal = mdp.goal_mask
    w = mdp.initial_probs
    # per-state linear pieces: f(p) = p * arm0 + (1 - p) * arm1
    reach_arms = np.array([goal[mdp.next_state[s]] for s in mdp.initial_states], dtype=np.float64)
    reward_arms = np.array([mdp.reward[s] for s in mdp.initial_states], dtype=np.float64)
    cost_arms = np.array([mdp.cost[s] for s in mdp.initial_states], dtype=np.float64)

    def batch_stats(p_a, p_b):
        ps = [p_a, p_b]
        reach = reward = cost = 0.0
        for i in range(2):
            p = ps[i]
            reach = reach + w[i] * (p * reach_arms[i, 0] + (1 - p) * reach_arms[i, 1])
            reward = reward + w[i] * (p * reward_arms[i, 0] + (1 - p) * reward_arms[i, 1])
            cost = cost + w[i] * (p * cost_arms[i, 0] + (1 - p) * cost_arms[i, 1])
        return reach, reward, cost

    if mode == "reach_min_cost":
        # force every state onto reaching arms, then take the cheaper arm
        probs = np.empty(2)
        for i in range(2):
            reaching = np.flatnonzero(reach_arms[i] > 0.5)
            if len(reaching) == 0:
                raise ValueError("a state cannot reach the goal at all")
            if len(reaching) == 2:
                probs[i] = 1.0 if cost_arms[i, 0] <= cost_arms[i, 1] else 0.0
            else:
                probs[i] = 1.0 if reaching[0] == 0 else 0.0

        def objective(p_a, p_b):
            reach, _, cost = batch_stats(p_a, p_b)
            return -cost - 1e6 * (reach < 1.0 - 1e-12)

    elif mode == "scalarized":
        if parameter is None:
            raise ValueError("scalarized mode needs the weight parameter")
        probs = np.empty(2)
        for i in range(2):
            score0 = reward_arms[i, 0] - parameter * cost_arms[i, 0]
            score1 = reward_arms[i, 1] - parameter * cost_arms[i, 1]
            probs[i] = 1.0 if score0 >= score1 else 0.0

        def objective(p_a, p_b):
            _, reward, cost = batch_stats(p_a, p_b)
            return reward - parameter * cost

    elif mode == "thresholded":
        if parameter is None:
            raise ValueError("thresholded mode needs the cost bound parameter")
        # objective and constraint are linear, so optimum sits at a box
        # corner or on the constraint boundary along one edge
        candidates = [(a, b) for a in (0.0, 1.0) for b in (0.0, 1.0)]
        for i in range(2):
            for fixed in (0.0, 1.0):
                # solve cost(p) == parameter for the free coordinate
                other = 1 - i
                c_fixed = w[other] * (
                    fixed * cost_arms[other, 0] + (1 - fixed) * cost_arms[other, 1]
                )
                slope = w[i] * (cost_arms[i, 0] - cost_arms[i, 1])
                base = w[i] * cost_arms[i, 1] + c_fixed
                if abs(slope) > 1e-12:
                    p = (parameter - base) / slope
                    if 0.0 <= p <= 1.0:
                        pair = [0.0, 0.0]
                        pair[i] = p
                        pair[other] = fixed
                        candidates.append(tuple(pair))
        best, best_reward = None, -math.inf
        for a, b in candidates:
            _, reward, cost = batch_stats(a, b)
            if cost <= parameter + 1e-9 and reward > best_reward + 1e-12:
                best, best_reward = (a, b), reward
        if best is None:
            raise ValueError(f"no policy satisfies cost <= {parameter}")
        probs = np.array(best)

        def objective(p_a, p_b):
            _, reward, cost = batch_stats(p_a, p_b)
            return reward - 1e6 * (cost > parameter + 1e-9)

    else:
        raise ValueError(f"unknown mode {mode!r}")

    reach, reward, cost = _policy_stats(mdp, probs)
    enum_probs, _ = _enumerate_best(mdp, objective)
    e_reach, e_reward, e_cost = _policy_stats(mdp, enum_probs)
    return {
        "mode": mode,
        "parameter": parameter,
        "p_a": float(probs[0]),
        "p_b": float(probs[1]),
        "reach_prob": reach,
        "expected_reward": reward,
        "expected_cost": cost,
        "enumerated": {
            "p_a": float(enum_probs[0]),
            "p_b": float(enum_probs[1]),
            "reach_prob": e_reach,
            "expected_reward": e_reward,
            "expected_cost": e_cost,
        },
    }


def simulate_two_start_bandit(
    mdp: TabularMDP, p_a: float, p_b: float, n_episodes: int = 10_000, seed: int = 0
) -> dict:
    """Monte Carlo estimates of reach, reward, and cost for (p_a, p_b)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    probs = {s: p for s, p in zip(mdp.initial_states, (p_a, p_b))}
    starts = rng.choice(mdp.initial_states, size=n_episodes, p=mdp.initial_probs)
    draws = rng.uniform(size=n_episodes)
    reach = reward = cost = 0.0
    for s, d in zip(starts, draws):
        a = 0 if d < probs[s] else 1
        nxt = mdp.next_state[s, a]
        reach += float(mdp.goal_mask[nxt])
        reward += float(mdp.reward[s, a])
        cost += float(mdp.cost[s, a])
    return {
        "reach_prob": reach / n_episodes,
        "expected_reward": reward / n_episodes,
        "expected_cost": cost / n_episodes,
    }
