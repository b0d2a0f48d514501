"""Two-phase budget-conditioned policy optimization.

Phase 1 trains a stochastic policy and a reach value on the augmented
state (x, y, z), drawing a fresh budget z0 uniformly per episode so the
policy learns the whole trade-off family at once. The surrogate is the
standard clipped importance-ratio loss over phi-fold advantages; since
a LOWER reach value is better, the advantages enter the loss negated.

Phase 2 freezes the policy at its mode and fine-tunes the value alone
under a discount close enough to 1 that the value's sign is trusted
(see reachval.discount_sign_bound). The cheapest feasible budget at a
state is then the z-root of that value, found by bisection, and can be
distilled into a small regressor for deployment.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import approx
from .augment import (
    AugmentedGoalParams,
    estimate_big_c,
    shifted_indicator,
)
from .envkit.base import ReachAvoidProblem
from .reachval import _gae_arrays, discount_sign_bound


class Infeasible(RuntimeError):
    """No budget in the searched range makes the state feasible."""


class NonMonotoneWarning(UserWarning):
    """The learned value's sign was not monotone along the z sweep."""


@dataclass
class Phase1Config:
    """Knobs for the stochastic training phase."""

    total_steps: int = 200_000
    n_envs: int = 16
    epochs: int = 10
    minibatch_size: int = 256
    lr: float = 3e-4
    clip_eps: float = 0.2
    entropy_coef: float = 1e-2  # decays linearly to 0 over total_steps
    gamma: float = 0.99
    lam: float = 0.95
    gae_mode: str = "renormalized"
    z_min: float = -1.0
    z_max: float | None = None  # horizon_max * max_step_cost when None
    big_c: float | None = None  # estimated by sampling when None
    hidden: tuple[int, ...] = (256, 256)
    init_log_std: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.z_max is not None and not self.z_min < self.z_max:
            raise ValueError("need z_min < z_max")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")


@dataclass
class Phase2Config:
    """Knobs for the deterministic value fine-tune."""

    total_steps: int = 200_000
    n_envs: int = 16
    epochs: int = 10
    minibatch_size: int = 256
    lr: float = 3e-4
    gamma: float | None = None  # None: just above the sign-trust bound
    gamma_eps_gap: float = 1.0
    lam: float = 0.95
    gae_mode: str = "renormalized"
    seed: int = 1


@dataclass
class EpisodeRecord:
    """One complete augmented-dynamics episode."""

    obs: np.ndarray  # (T, obs_dim) network inputs at visited states
    actions_raw: np.ndarray  # (T, action_dim) pre-clamp draws
    log_probs: np.ndarray  # (T,)
    ghat: np.ndarray  # (T,) augmented goal margins at visited states
    values: np.ndarray  # (T,) raw-unit value predictions
    costs: np.ndarray  # (T,)
    z0: float
    reached: bool  # ended inside the augmented goal (vs truncated)
    tail_value: float  # margin at the terminal state if reached,
    # learned value of the final state otherwise


@dataclass
class RolloutBatch:
    episodes: list[EpisodeRecord]

    @property
    def total_steps(self) -> int:
        return sum(len(ep.costs) for ep in self.episodes)

    @property
    def reach_rate(self) -> float:
        if not self.episodes:
            return math.nan
        return float(np.mean([ep.reached for ep in self.episodes]))

    @property
    def mean_cost_reached(self) -> float:
        costs = [float(ep.costs.sum()) for ep in self.episodes if ep.reached]
        return float(np.mean(costs)) if costs else math.nan


@dataclass
class ZStarSolution:
    z_star: float
    v_at_zstar: float
    bracket: tuple[float, float]
    iterations: int
    monotone_violations: int = 0


@dataclass
class TrainResult:
    policy: approx.GaussianPolicyParams
    value: approx.MlpParams
    log_rows: list[dict]
    meta: dict


# -- observation building ------------------------------------------------------


def build_obs(
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    obs_scale: np.ndarray,
    z_min: float,
    z_max: float,
) -> np.ndarray:
    """Network input (x / scale, y, z normalized to [0, 1] and clipped)."""
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z_norm = (np.asarray(z, dtype=np.float64) - z_min) / (z_max - z_min)
    z_norm = np.clip(z_norm, -1.0, 1.0)
    return np.concatenate(
        [
            xb / obs_scale,
            np.broadcast_to(np.asarray(y, dtype=np.float64), (xb.shape[0],))[:, None],
            np.broadcast_to(z_norm, (xb.shape[0],))[:, None],
        ],
        axis=1,
    )


def value_fn_from(
    value_params: approx.MlpParams, meta: dict
):
    """Wrap a value checkpoint as callable (x, y, z) -> raw-unit value."""
    scale = np.asarray(meta["obs_scale"], dtype=np.float64)
    z_min, z_max, big_c = meta["z_min"], meta["z_max"], meta["big_c"]

    def fn(x, y, z) -> float:
        obs = build_obs(x, y, z, scale, z_min, z_max)
        return float(approx.mlp_forward(value_params, obs)[0, 0] * big_c)

    return fn


# -- rollout collection --------------------------------------------------------


def collect_rollouts(
    problem: ReachAvoidProblem,
    policy: approx.GaussianPolicyParams,
    value_params: approx.MlpParams,
    cfg: Phase1Config,
    goal_params: AugmentedGoalParams,
    rng: np.random.Generator,
    z_max: float,
    deterministic: bool = False,
) -> RolloutBatch:
    """Run n_envs lanes to episode completion under augmented dynamics.

    Every lane resets once with a fresh initial state and an episode
    budget z0 ~ U[z_min, z_max]; the batch holds exactly n_envs complete
    episodes. An episode ends when the augmented goal margin of the
    arrival state is nonpositive or at horizon_max.
    """
    n = cfg.n_envs
    scale = problem.obs_scale
    big_c = goal_params.big_c
    t_cap = problem.horizon_max

    x = np.atleast_2d(problem.sample_initial(rng, n))
    y = shifted_indicator(problem.in_avoid(x))
    z0 = rng.uniform(cfg.z_min, z_max, n)
    z = z0.copy()

    ghat_now = np.maximum(
        np.maximum(problem.goal_margin(x), big_c * y), -z
    )
    alive = ghat_now > 0.0
    steps_taken = np.zeros(n, dtype=int)

    lane_rows: list[np.ndarray] = []
    obs_rows, act_rows, logp_rows, ghat_rows, val_rows, cost_rows = [], [], [], [], [], []
    reached = ~alive  # lanes born inside the augmented goal
    tail_margin = np.where(reached, ghat_now, np.nan)

    while alive.any():
        idx = np.flatnonzero(alive)
        obs = build_obs(x[idx], y[idx], z[idx], scale, cfg.z_min, z_max)
        if deterministic:
            act = approx.policy_mode(policy, obs)
            raw = act
            logp = approx.policy_log_prob(policy, obs, raw)
        else:
            act, raw, logp = approx.policy_sample(policy, obs, rng)
        vals = approx.mlp_forward(value_params, obs)[:, 0] * big_c

        x_next, c = problem.step_and_cost(x[idx], act)
        y_next = np.maximum(shifted_indicator(problem.in_avoid(x_next)), y[idx])
        z_next = z[idx] - c

        lane_rows.append(idx)
        obs_rows.append(obs)
        act_rows.append(raw)
        logp_rows.append(logp)
        ghat_rows.append(ghat_now[idx])
        val_rows.append(vals)
        cost_rows.append(np.asarray(c, dtype=np.float64))

        steps_taken[idx] += 1
        ghat_next = np.maximum(
            np.maximum(problem.goal_margin(x_next), big_c * y_next), -z_next
        )
        done_reach = ghat_next <= 0.0
        done_trunc = (~done_reach) & (steps_taken[idx] >= t_cap)

        x[idx], y[idx], z[idx] = x_next, y_next, z_next
        ghat_now[idx] = ghat_next
        reached[idx[done_reach]] = True
        tail_margin[idx[done_reach]] = ghat_next[done_reach]
        alive[idx] = ~(done_reach | done_trunc)

    lane_cat = np.concatenate(lane_rows) if lane_rows else np.empty(0, dtype=int)
    obs_cat = np.concatenate(obs_rows) if obs_rows else np.empty((0, 0))
    act_cat = np.concatenate(act_rows) if act_rows else np.empty((0, 0))
    logp_cat = np.concatenate(logp_rows) if logp_rows else np.empty(0)
    ghat_cat = np.concatenate(ghat_rows) if ghat_rows else np.empty(0)
    val_cat = np.concatenate(val_rows) if val_rows else np.empty(0)
    cost_cat = np.concatenate(cost_rows) if cost_rows else np.empty(0)

    episodes = []
    for lane in range(n):
        sel = lane_cat == lane
        t_len = int(sel.sum())
        if reached[lane]:
            tail = float(tail_margin[lane])
        else:
            final_obs = build_obs(
                x[lane : lane + 1], y[lane : lane + 1], z[lane : lane + 1],
                scale, cfg.z_min, z_max,
            )
            tail = float(approx.mlp_forward(value_params, final_obs)[0, 0] * big_c)
        episodes.append(
            EpisodeRecord(
                obs=obs_cat[sel],
                actions_raw=act_cat[sel],
                log_probs=logp_cat[sel],
                ghat=ghat_cat[sel],
                values=val_cat[sel],
                costs=cost_cat[sel],
                z0=float(z0[lane]),
                reached=bool(reached[lane]),
                tail_value=tail,
            )
        )
    return RolloutBatch(episodes=episodes)


# -- losses ---------------------------------------------------------------------


def ppo_policy_loss(
    policy: approx.GaussianPolicyParams,
    obs: np.ndarray,
    actions_raw: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    clip_eps: float,
    entropy_coef: float = 0.0,
) -> tuple[float, list[np.ndarray], dict]:
    """Clipped surrogate loss, its gradients, and diagnostics.

    loss = mean(max(-r * A, -clip(r, 1 - eps, 1 + eps) * A)) - coef * H
    with r the importance ratio exp(logp_new - logp_old). Samples whose
    ratio overflows are excluded from the mean and counted; more than
    1% of them aborts the update.

    Returns (loss, grads in policy.trainable() order, stats) where
    stats carries kl_estimate, clip_fraction, n_excluded.
    """
    mean_out, cache = approx.mlp_forward(policy.trunk, obs, return_cache=True)
    std = np.exp(np.clip(policy.log_std, approx.LOG_STD_MIN, approx.LOG_STD_MAX))
    zed = (actions_raw - mean_out) / std
    logp_new = (-0.5 * zed**2 - np.log(std) - 0.5 * np.log(2 * np.pi)).sum(axis=1)

    ratio = np.exp(logp_new - old_log_probs)
    finite = np.isfinite(ratio)
    n_excluded = int((~finite).sum())
    if n_excluded > 0.01 * len(ratio):
        raise RuntimeError(
            f"{n_excluded}/{len(ratio)} non-finite importance ratios; aborting update"
        )
    adv = np.where(finite, advantages, 0.0)
    r = np.where(finite, ratio, 1.0)
    n_used = max(1, int(finite.sum()))

    clipped_r = np.clip(r, 1.0 - clip_eps, 1.0 + clip_eps)
    unclipped = -r * adv
    clipped = -clipped_r * adv
    loss_vec = np.maximum(unclipped, clipped)
    loss = float(loss_vec[finite].sum() / n_used)

    # Unclipped branch active on ties; the clipped branch, when strictly
    # larger, has zero gradient through logp (flat region of clip).
    active = (unclipped >= clipped) & finite
    grad_logp = np.where(active, -r * adv, 0.0) / n_used

    grads = approx.policy_logp_backward(
        policy, obs, actions_raw, grad_logp, cache=cache
    )
    entropy = approx.policy_entropy(policy)
    if entropy_coef != 0.0:
        loss -= entropy_coef * entropy
        log_std_active = (policy.log_std > approx.LOG_STD_MIN) & (
            policy.log_std < approx.LOG_STD_MAX
        )
        grads[-1] = grads[-1] - entropy_coef * log_std_active.astype(np.float64)

    with np.errstate(divide="ignore", invalid="ignore"):
        kl_terms = (r - 1.0) - np.log(r)
    kl = float(np.mean(kl_terms[finite & (r > 0)])) if n_used else math.nan
    stats = {
        "kl_estimate": kl,
        "clip_fraction": float(np.mean((np.abs(r - 1.0) > clip_eps)[finite])),
        "n_excluded": n_excluded,
        "entropy": entropy,
    }
    return loss, grads, stats


def value_loss(
    value_params: approx.MlpParams,
    obs: np.ndarray,
    targets: np.ndarray,
    target_scale: float,
) -> tuple[float, list[np.ndarray]]:
    """MSE between predictions and fixed targets, in scaled units.

    The net predicts value / target_scale; targets come in raw units
    and are scaled here, so the loss magnitude stays O(1).
    """
    out, cache = approx.mlp_forward(value_params, obs, return_cache=True)
    diff = out[:, 0] - np.asarray(targets, dtype=np.float64) / target_scale
    loss = float(np.mean(diff**2))
    upstream = (2.0 * diff / diff.shape[0])[:, None]
    grads, _ = approx.mlp_backward(value_params, obs, upstream, cache=cache)
    return loss, grads


# -- training loops -------------------------------------------------------------


def _resolve_setup(
    problem: ReachAvoidProblem, cfg: Phase1Config, rng: np.random.Generator
) -> tuple[float, float]:
    """(big_c, z_max), estimating whichever the config leaves unset."""
    big_c = cfg.big_c
    if big_c is None:
        big_c = estimate_big_c(problem, rng)
    z_max = cfg.z_max
    if z_max is None:
        z_max = problem.horizon_max * problem.max_step_cost()
    if not cfg.z_min < z_max:
        raise ValueError("resolved z_max must exceed z_min")
    return float(big_c), float(z_max)


def train_phase1(problem: ReachAvoidProblem, cfg: Phase1Config) -> TrainResult:
    """Budget-conditioned clipped-surrogate training.

    Each iteration collects n_envs complete episodes, computes phi-fold
    advantages per episode, negates and standardizes them across the
    batch, then runs several epochs of minibatched policy and value
    updates. Learning rate and entropy coefficient decay linearly in
    collected environment steps. Deterministic given cfg.seed.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    big_c, z_max = _resolve_setup(problem, cfg, rng)
    goal_params = AugmentedGoalParams(big_c=big_c)

    obs_dim = problem.state_dim + 2
    policy = approx.policy_init(
        obs_dim, problem.action_low, problem.action_high, rng,
        hidden=cfg.hidden, init_log_std=cfg.init_log_std,
    )
    value_params = approx.mlp_init((obs_dim, *cfg.hidden, 1), rng)
    pol_adam = approx.AdamState.for_params(policy.trainable(), cfg.lr)
    val_adam = approx.AdamState.for_params(value_params.trainable(), cfg.lr)

    meta = {
        "algorithm": "rcppo",
        "env": problem.name,
        "obs_scale": [float(v) for v in problem.obs_scale],
        "z_min": cfg.z_min,
        "z_max": z_max,
        "big_c": big_c,
        "gamma": cfg.gamma,
        "hidden": list(cfg.hidden),
        "seed": cfg.seed,
    }

    log_rows: list[dict] = []
    env_steps = 0
    iteration = 0
    while env_steps < cfg.total_steps:
        frac = env_steps / cfg.total_steps
        lr_now = cfg.lr * (1.0 - frac)
        ent_now = cfg.entropy_coef * (1.0 - frac)
        pol_adam.base_lr = lr_now
        val_adam.base_lr = lr_now

        batch = collect_rollouts(
            problem, policy, value_params, cfg, goal_params, rng, z_max
        )
        env_steps += batch.total_steps
        iteration += 1

        eps = [ep for ep in batch.episodes if len(ep.costs) > 0]
        if not eps:
            continue
        gae_parts, ret_parts = [], []
        for ep in eps:
            gae, lam_ret = _gae_arrays(
                ep.ghat, ep.values, ep.tail_value, cfg.gamma, cfg.lam, cfg.gae_mode
            )
            gae_parts.append(gae)
            ret_parts.append(lam_ret)
        obs_all = np.concatenate([ep.obs for ep in eps])
        act_all = np.concatenate([ep.actions_raw for ep in eps])
        logp_all = np.concatenate([ep.log_probs for ep in eps])
        gae_all = np.concatenate(gae_parts)
        ret_all = np.concatenate(ret_parts)

        # Lower reach value is better, so good actions carry negative
        # phi-advantages; the surrogate expects the opposite sign.
        adv = -gae_all
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        n_samples = obs_all.shape[0]
        stats_acc: dict[str, float] = {}
        last_policy_loss = math.nan
        last_value_loss = math.nan
        for _ in range(cfg.epochs):
            order = rng.permutation(n_samples)
            for lo in range(0, n_samples, cfg.minibatch_size):
                mb = order[lo : lo + cfg.minibatch_size]
                p_loss, p_grads, stats = ppo_policy_loss(
                    policy, obs_all[mb], act_all[mb], logp_all[mb], adv[mb],
                    cfg.clip_eps, ent_now,
                )
                approx.adam_step(pol_adam, policy.trainable(), p_grads)
                v_loss, v_grads = value_loss(value_params, obs_all[mb], ret_all[mb], big_c)
                approx.adam_step(val_adam, value_params.trainable(), v_grads)
                if not (math.isfinite(p_loss) and math.isfinite(v_loss)):
                    raise RuntimeError(
                        f"non-finite loss at iteration {iteration} "
                        f"(policy {p_loss}, value {v_loss})"
                    )
                last_policy_loss, last_value_loss = p_loss, v_loss
                stats_acc = stats

        log_rows.append(
            {
                "iteration": iteration,
                "env_steps": env_steps,
                "reach_rate": batch.reach_rate,
                "mean_cost_reached": batch.mean_cost_reached,
                "policy_loss": last_policy_loss,
                "value_loss": last_value_loss,
                "entropy": stats_acc.get("entropy", math.nan),
                "kl_estimate": stats_acc.get("kl_estimate", math.nan),
            }
        )
    return TrainResult(policy=policy, value=value_params, log_rows=log_rows, meta=meta)


def finetune_phase2(
    problem: ReachAvoidProblem,
    policy: approx.GaussianPolicyParams,
    value_params: approx.MlpParams,
    meta: dict,
    cfg: Phase2Config,
) -> tuple[approx.MlpParams, list[dict], dict]:
    """Value-only regression under the frozen mode policy.

    Rollouts act with the policy mode (zero exploration, zero entropy
    contribution) while budgets still sweep U[z_min, z_max]; the value
    continues from its phase-1 parameters under a discount close enough
    to 1 for its sign to certify feasibility. Returns the tuned value,
    log rows, and an updated meta carrying the phase-2 gamma.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    big_c = meta["big_c"]
    gamma = cfg.gamma
    if gamma is None:
        bound = discount_sign_bound(big_c, problem.horizon_max, cfg.gamma_eps_gap)
        gamma = min(1.0 - 1e-9, 0.5 * (bound + 1.0))
    goal_params = AugmentedGoalParams(big_c=big_c)

    value_params = approx.MlpParams(
        weights=[w.copy() for w in value_params.weights],
        biases=[b.copy() for b in value_params.biases],
        activation=value_params.activation,
    )
    val_adam = approx.AdamState.for_params(value_params.trainable(), cfg.lr)
    roll_cfg = Phase1Config(
        total_steps=cfg.total_steps,
        n_envs=cfg.n_envs,
        z_min=meta["z_min"],
        z_max=meta["z_max"],
        big_c=big_c,
        gamma=gamma,
        lam=cfg.lam,
        seed=cfg.seed,
    )

    log_rows: list[dict] = []
    env_steps = 0
    iteration = 0
    while env_steps < cfg.total_steps:
        frac = env_steps / cfg.total_steps
        val_adam.base_lr = cfg.lr * (1.0 - frac)
        batch = collect_rollouts(
            problem, policy, value_params, roll_cfg, goal_params, rng,
            meta["z_max"], deterministic=True,
        )
        env_steps += batch.total_steps
        iteration += 1
        eps = [ep for ep in batch.episodes if len(ep.costs) > 0]
        if not eps:
            continue
        ret_parts = []
        for ep in eps:
            _, lam_ret = _gae_arrays(
                ep.ghat, ep.values, ep.tail_value, gamma, cfg.lam, cfg.gae_mode
            )
            ret_parts.append(lam_ret)
        obs_all = np.concatenate([ep.obs for ep in eps])
        ret_all = np.concatenate(ret_parts)
        n_samples = obs_all.shape[0]
        last_v = math.nan
        for _ in range(cfg.epochs):
            order = rng.permutation(n_samples)
            for lo in range(0, n_samples, cfg.minibatch_size):
                mb = order[lo : lo + cfg.minibatch_size]
                v_loss, v_grads = value_loss(value_params, obs_all[mb], ret_all[mb], big_c)
                approx.adam_step(val_adam, value_params.trainable(), v_grads)
                if not math.isfinite(v_loss):
                    raise RuntimeError(f"non-finite value loss at iteration {iteration}")
                last_v = v_loss
        log_rows.append(
            {
                "iteration": iteration,
                "env_steps": env_steps,
                "reach_rate": batch.reach_rate,
                "mean_cost_reached": batch.mean_cost_reached,
                "policy_loss": 0.0,
                "value_loss": last_v,
                "entropy": 0.0,
                "kl_estimate": 0.0,
            }
        )
    meta2 = dict(meta)
    meta2["phase2_gamma"] = gamma
    return value_params, log_rows, meta2


# -- budget search ---------------------------------------------------------------


def bisect_z_star(
    value_fn,
    x: np.ndarray,
    y: float,
    z_min: float,
    z_max: float,
    tol: float = 1e-2,
    scan_points: int = 0,
) -> ZStarSolution:
    """Smallest budget (within tol) whose value is nonpositive.

    value_fn(x, y, z) -> real must be nonincreasing in z for bisection
    to be exact; learned values may wobble, so scan_points > 0 adds a
    coarse sweep that counts feasible-to-infeasible sign regressions
    and reports them (and warns) instead of hiding them.

    Raises:
        Infeasible: value at z_max is still positive.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if z_max < z_min:
        raise ValueError("need z_min <= z_max")
    violations = 0
    if scan_points > 1:
        zs = np.linspace(z_min, z_max, scan_points)
        signs = np.array([value_fn(x, y, z) <= 0.0 for z in zs])
        violations = int(np.sum(signs[:-1] & ~signs[1:]))
        if violations:
            warnings.warn(
                f"value sign regressed {violations} time(s) along the z sweep",
                NonMonotoneWarning,
                stacklevel=2,
            )
    v_hi = value_fn(x, y, z_max)
    if v_hi > 0.0:
        raise Infeasible(f"value {v_hi:.4g} still positive at z_max={z_max:.4g}")
    v_lo = value_fn(x, y, z_min)
    if v_lo <= 0.0:
        return ZStarSolution(
            z_star=float(z_min), v_at_zstar=float(v_lo),
            bracket=(float(z_min), float(z_min)), iterations=0,
            monotone_violations=violations,
        )
    lo, hi = float(z_min), float(z_max)
    iterations = 0
    max_iter = int(np.ceil(np.log2(max(1.0, (hi - lo) / tol)))) + 5
    while hi - lo > tol and iterations < max_iter:
        mid = 0.5 * (lo + hi)
        if value_fn(x, y, mid) <= 0.0:
            hi = mid
        else:
            lo = mid
        iterations += 1
    return ZStarSolution(
        z_star=hi, v_at_zstar=float(value_fn(x, y, hi)),
        bracket=(lo, hi), iterations=iterations,
        monotone_violations=violations,
    )


@dataclass
class ZRegressor:
    """Distilled (x, y) -> z_star map with its input normalization."""

    net: approx.MlpParams
    obs_scale: np.ndarray
    z_min: float
    z_max: float
    holdout_mae: float
    n_infeasible: int


def regressor_predict(reg: ZRegressor, x: np.ndarray, y) -> np.ndarray:
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    inp = np.concatenate(
        [xb / reg.obs_scale,
         np.broadcast_to(np.asarray(y, dtype=np.float64), (xb.shape[0],))[:, None]],
        axis=1,
    )
    z_norm = approx.mlp_forward(reg.net, inp)[:, 0]
    return np.clip(reg.z_min + z_norm * (reg.z_max - reg.z_min), reg.z_min, reg.z_max)


def fit_z_regressor(
    value_fn,
    problem: ReachAvoidProblem,
    meta: dict,
    n_samples: int = 512,
    tol: float = 1e-2,
    seed: int = 0,
    hidden: tuple[int, ...] = (64, 64),
    epochs: int = 400,
    lr: float = 1e-3,
) -> ZRegressor:
    """Regress bisection labels over sampled initial states.

    Infeasible states are dropped (and counted); more than half of them
    infeasible raises, since the map would mostly extrapolate.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    xs = np.atleast_2d(problem.sample_initial(rng, n_samples))
    ys = shifted_indicator(problem.in_avoid(xs))
    labels, keep = [], []
    n_out = 0
    for i in range(n_samples):
        try:
            sol = bisect_z_star(
                value_fn, xs[i], float(ys[i]), meta["z_min"], meta["z_max"], tol
            )
        except Infeasible:
            n_out += 1
            continue
        labels.append(sol.z_star)
        keep.append(i)
    if n_out > 0.5 * n_samples:
        raise RuntimeError(
            f"{n_out}/{n_samples} sampled states infeasible; refusing to fit"
        )
    xs, ys = xs[keep], ys[keep]
    z_lab = np.asarray(labels)
    z_min, z_max = meta["z_min"], meta["z_max"]
    targets = (z_lab - z_min) / (z_max - z_min)

    scale = np.asarray(meta["obs_scale"], dtype=np.float64)
    inp = np.concatenate([xs / scale, ys[:, None]], axis=1)
    n_total = inp.shape[0]
    n_hold = max(1, n_total // 5)
    perm = rng.permutation(n_total)
    hold, fit = perm[:n_hold], perm[n_hold:]

    net = approx.mlp_init((inp.shape[1], *hidden, 1), rng)
    adam = approx.AdamState.for_params(net.trainable(), lr)
    for _ in range(epochs):
        out, cache = approx.mlp_forward(net, inp[fit], return_cache=True)
        diff = out[:, 0] - targets[fit]
        upstream = (2.0 * diff / diff.shape[0])[:, None]
        grads, _ = approx.mlp_backward(net, inp[fit], upstream, cache=cache)
        approx.adam_step(adam, net.trainable(), grads)

    pred_hold = approx.mlp_forward(net, inp[hold])[:, 0]
    mae = float(np.mean(np.abs(pred_hold - targets[hold]))) * (z_max - z_min)
    return ZRegressor(
        net=net, obs_scale=scale, z_min=z_min, z_max=z_max,
        holdout_mae=mae, n_infeasible=n_out,
    )


# -- deployment ------------------------------------------------------------------


@dataclass
class Trajectory:
    """Deployed episode under deploy-time termination (raw goal entry)."""

    states: np.ndarray  # (T + 1, d)
    actions: np.ndarray  # (T, a)
    costs: np.ndarray  # (T,)
    y: np.ndarray  # (T + 1,)
    z: np.ndarray  # (T + 1,)
    g: np.ndarray  # (T + 1,)
    h: np.ndarray  # (T + 1,)
    ghat: np.ndarray  # (T + 1,)
    z0: float
    reached: bool
    violated: bool
    infeasible_start: bool

    @property
    def cum_cost(self) -> float:
        return float(self.costs.sum())

    @property
    def length(self) -> int:
        return len(self.costs)


def deploy_policy(
    problem: ReachAvoidProblem,
    policy: approx.GaussianPolicyParams,
    meta: dict,
    z_source,
    x0: np.ndarray,
    goal_params: AugmentedGoalParams | None = None,
) -> Trajectory:
    """Roll the mode policy from x0 with the budget as a dial.

    z_source is a number, a callable (x0, y0) -> z0 (typically wrapping
    bisect_z_star), a ZRegressor, or None (budget-free policies; the
    budget column stays infinite). An Infeasible callable result is
    reported, not raised: the rollout proceeds at z_max for diagnosis.

    The episode ends on raw goal entry or at horizon_max; safety
    violations latch y but never terminate.
    """
    scale = np.asarray(meta["obs_scale"], dtype=np.float64)
    big_c = meta.get("big_c", 1.0)
    if goal_params is None:
        goal_params = AugmentedGoalParams(big_c=big_c)
    is_budget = meta.get("algorithm", "rcppo") == "rcppo"

    x = np.asarray(x0, dtype=np.float64).reshape(problem.state_dim)
    y = float(shifted_indicator(problem.in_avoid(x)))
    infeasible_start = False
    if z_source is None:
        z0 = math.inf
    elif isinstance(z_source, (int, float)):
        z0 = float(z_source)
    elif isinstance(z_source, ZRegressor):
        z0 = float(regressor_predict(z_source, x, y)[0])
    else:
        try:
            z0 = float(z_source(x, y))
        except Infeasible:
            z0 = float(meta["z_max"])
            infeasible_start = True

    states, actions, costs = [x.copy()], [], []
    ys, zs = [y], [z0]
    z = z0
    t = 0
    reached = bool(problem.in_goal(x))
    while not reached and t < problem.horizon_max:
        if is_budget:
            obs = build_obs(x, y, z, scale, meta["z_min"], meta["z_max"])
        else:
            obs = np.atleast_2d(x / scale)
        act = approx.policy_mode(policy, obs)[0]
        x_next, c = problem.step_and_cost(x, act)
        x_next = np.asarray(x_next, dtype=np.float64)
        y = float(max(shifted_indicator(problem.in_avoid(x_next)), y))
        z = z - float(c)
        actions.append(act)
        costs.append(float(c))
        states.append(x_next.copy())
        ys.append(y)
        zs.append(z)
        x = x_next
        t += 1
        reached = bool(problem.in_goal(x))

    states_arr = np.asarray(states)
    ys_arr = np.asarray(ys)
    zs_arr = np.asarray(zs)
    g_arr = np.asarray(problem.goal_margin(states_arr), dtype=np.float64)
    h_arr = np.asarray(problem.avoid_margin(states_arr), dtype=np.float64)
    with np.errstate(invalid="ignore"):
        ghat_arr = np.maximum(np.maximum(g_arr, big_c * ys_arr), -zs_arr)
    return Trajectory(
        states=states_arr,
        actions=np.asarray(actions).reshape(len(actions), problem.action_dim),
        costs=np.asarray(costs),
        y=ys_arr,
        z=zs_arr,
        g=g_arr,
        h=h_arr,
        ghat=ghat_arr,
        z0=z0,
        reached=reached,
        violated=bool(np.any(ys_arr > 0)),
        infeasible_start=infeasible_start,
    )


def evaluate_policy(
    problem: ReachAvoidProblem,
    policy: approx.GaussianPolicyParams,
    meta: dict,
    z_source,
    n_episodes: int,
    seed: int = 0,
) -> dict:
    """Seeded deployment sweep; aggregates match the episode records.

    An episode counts as reaching only if it enters the goal with the
    safety flag never latched. Costs aggregate over reaching episodes.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    records = []
    for _ in range(n_episodes):
        x0 = problem.sample_initial(rng)
        traj = deploy_policy(problem, policy, meta, z_source, x0)
        records.append(
            {
                "z0": traj.z0,
                "reached": bool(traj.reached and not traj.violated),
                "violated": traj.violated,
                "cumulative_cost": traj.cum_cost,
                "length": traj.length,
                "infeasible_start": traj.infeasible_start,
            }
        )
    reached = [r for r in records if r["reached"]]
    report = {
        "n_episodes": n_episodes,
        "reach_rate": (len(reached) / n_episodes) if n_episodes else None,
        "violation_rate": (
            float(np.mean([r["violated"] for r in records])) if records else None
        ),
        "mean_cost_reached": (
            float(np.mean([r["cumulative_cost"] for r in reached])) if reached else None
        ),
        "median_cost_reached": (
            float(np.median([r["cumulative_cost"] for r in reached])) if reached else None
        ),
        "episodes": records,
    }
    return report
