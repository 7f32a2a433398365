"""Active-learning driver, transfer experiments and the JMI temperature sweep."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import baselines, data, gp, oracle
from . import rng as rng_mod
from .config import Config
from .env import BatchState
from .policy import AdamState, PolicyContext, PolicyNet
from .reward import RewardModel, RewardSpec
from .trainer import rollout, sample_batches, select_query, train

log = logging.getLogger(__name__)


@dataclass
class ALState:
    """Everything the loop carries between acquisition steps."""

    pool: data.PoolSet
    train: data.TrainSet
    model: gp.FittedGP
    net: PolicyNet | None = None
    adam: AdamState | None = None


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    gfn_traces: list[list[dict]] = field(default_factory=list)


def evaluate(model: gp.FittedGP, test: data.TrainSet) -> dict:
    """Test MSE of the posterior mean, plus mean negative log predictive density."""
    post = model.posterior(test.x)
    var = np.clip(post.var, 0, None) + post.noise_var
    err = test.y - post.mean
    nlpd = 0.5 * np.mean(np.log(2 * math.pi * var) + err**2 / var)
    return {"test_loss": float(np.mean(err**2)), "test_nlpd": float(nlpd)}


def fit_model(cfg: Config, train: data.TrainSet, init: gp.KernelParams | None = None) -> gp.FittedGP:
    return gp.fit(train, cfg.gp_epochs, cfg.gp_lr, init or gp.KernelParams(nu=cfg.nu))


def reward_model(cfg: Config, model: gp.FittedGP, pool: data.PoolSet,
                 temperature: float | None = None) -> RewardModel:
    t = cfg.temperature if temperature is None else temperature
    return RewardModel.from_gp(model, pool.x, RewardSpec(t), cfg.covariance)


def new_net(cfg: Config, seed: int, temperature: float | None = None) -> PolicyNet:
    return PolicyNet(cfg.hidden, cfg.encoder_layers, cfg.use_train_context, seed=seed,
                     dtype=cfg.torch_dtype, trunk_layers=cfg.trunk_layers,
                     output_scale=cfg.net_output_scale(temperature))


def context(cfg: Config, pool: data.PoolSet, train: data.TrainSet) -> PolicyContext:
    return PolicyContext.build(pool.x, train if cfg.use_train_context else None)


def lookahead_update(cfg: Config, st: ALState, n_samples: int, rng: np.random.Generator,
                     iterations: int | None = None) -> PolicyNet:
    """Prime ``st.net`` on hallucinated next-step reward distributions.

    ``st.pool``, ``st.train`` and ``st.model`` are never modified.
    """
    iters = cfg.lookahead_iterations if iterations is None else iterations
    for i in range(n_samples):
        ctx = context(cfg, st.pool, st.train)
        with torch.no_grad():
            acts = rollout(st.net, ctx, cfg.query_size, 1, cfg.epsilon, rng, with_backward=False).actions[0]
        pos = np.sort(acts)
        post = st.model.posterior(st.pool.x[pos])
        y_fake = gp.sample_labels(post, rng)
        train2 = st.train.extend(st.pool.ids[pos], st.pool.x[pos], y_fake)
        pool2 = st.pool.remove(pos)
        if cfg.lookahead_refit:
            model2 = fit_model(cfg, train2, st.model.params)
        else:
            model2 = gp.FittedGP(st.model.params, train2)
        rm = reward_model(cfg, model2, pool2)
        res = train(st.net, context(cfg, pool2, train2), rm, cfg.query_size, cfg.trainer(iters), rng,
                    adam=st.adam)
        st.adam = res.adam
        log.debug("lookahead %d/%d final loss %.4g", i + 1, n_samples, res.trace[-1]["mean_loss"] if res.trace else 0)
    return st.net


def choose_batch(cfg: Config, st: ALState, rm: RewardModel, step: int, rng: np.random.Generator,
                 runlog: RunLog | None = None) -> tuple[BatchState, int]:
    """Batch of pool positions for one acquisition and the inference evaluation count."""
    b = cfg.query_size
    name = cfg.strategy
    if name == "random":
        return baselines.random_batch(len(st.pool), b, rng), 0
    if name == "bald":
        return baselines.bald_topB(rm.bald_scores(), b), 0
    if name == "stochastic-bald":
        return baselines.stochastic_bald(rm.bald_scores(), b, cfg.stochastic_bald_temp, rng), 0
    if name == "batchbald":
        return baselines.batchbald_greedy(rm, b), 0
    # gfn
    fresh = st.net is None or cfg.transfer_mode == "reinit"
    if fresh:
        st.net = new_net(cfg, seed=int(rng.integers(2**31)))
        st.adam = None
    iters = cfg.iterations if fresh else cfg.warm_iterations
    ctx = context(cfg, st.pool, st.train)
    res = train(st.net, ctx, rm, b, cfg.trainer(iters), rng, adam=st.adam)
    st.adam = res.adam
    if runlog is not None:
        runlog.gfn_traces.append(res.trace)
    before = st.net.eval_count
    samples = sample_batches(st.net, ctx, rm, b, cfg.inference_samples, rng)
    evals = st.net.eval_count - before
    return select_query(samples), evals


def run_al(cfg: Config, seed: int | None = None) -> RunLog:
    """One replica of the active-learning loop."""
    seed = cfg.seed if seed is None else seed
    pool, orc = data.sample_pool(cfg.pool_size, cfg.noise_scale, seed)
    test = data.sample_test_set(cfg.test_size, seed + 10**6, cfg.noise_scale)
    strat_rng = rng_mod.stream(seed, "strategy", cfg.strategy)
    train_set, pool = data.draw_seed_set(pool, orc, cfg.seed_size, rng_mod.stream(seed, "seed_set"))
    st = ALState(pool, train_set, fit_model(cfg, train_set))
    runlog = RunLog()
    t0 = time.perf_counter()
    runlog.records.append({"step": 0, "train_size": len(st.train), **evaluate(st.model, test),
                           "selected_batch": [], "batch_log_reward": None, "batch_jmi": None,
                           "wall_time": time.perf_counter() - t0, "policy_eval_count": 0})
    for step in range(1, cfg.al_steps + 1):
        t0 = time.perf_counter()
        rm = reward_model(cfg, st.model, st.pool)
        batch, evals = choose_batch(cfg, st, rm, step, strat_rng, runlog)
        if cfg.strategy == "gfn" and cfg.transfer_mode == "lookahead" and cfg.lookahead_samples:
            lookahead_update(cfg, st, cfg.lookahead_samples, strat_rng)
        pos = np.array(batch.indices, dtype=np.int64)
        ids = st.pool.ids[pos]
        st.train = st.train.extend(ids, st.pool.x[pos], orc.label(ids))
        st.pool = st.pool.remove(pos)
        st.model = fit_model(cfg, st.train)
        runlog.records.append({
            "step": step, "train_size": len(st.train), **evaluate(st.model, test),
            "selected_batch": [int(i) for i in ids], "batch_log_reward": rm.log_reward(batch.indices),
            "batch_jmi": rm.jmi(batch.indices), "wall_time": time.perf_counter() - t0,
            "policy_eval_count": evals,
        })
        log.info("seed %d %s step %d: train %d, mse %.4f", seed, cfg.strategy, step,
                 len(st.train), runlog.records[-1]["test_loss"])
    return runlog


def aggregate(runs: dict[str, list[RunLog]]) -> list[dict]:
    """Mean and standard error of test loss per (strategy, labelled count)."""
    rows = []
    for strategy, logs in runs.items():
        steps = len(logs[0].records)
        for k in range(steps):
            losses = np.array([lg.records[k]["test_loss"] for lg in logs])
            se = float(losses.std(ddof=1) / math.sqrt(len(losses))) if len(losses) > 1 else 0.0
            rows.append({"strategy": strategy, "labelled_count": logs[0].records[k]["train_size"],
                         "test_loss_mean": float(losses.mean()), "test_loss_stderr": se,
                         "n_seeds": len(losses)})
    return rows


# --- amortisation transfer -------------------------------------------------------


def iterations_to(curve: list[tuple[int, float]], threshold: float) -> float:
    for it, v in curve:
        if v < threshold:
            return it
    return math.inf


def transfer_experiment(cfg: Config, seed: int | None = None,
                        modes=("reinit", "continue", "lookahead")) -> dict:
    """JSD-vs-iteration curves after one real acquisition, per transfer mode.

    The policy is conditioned on the train set.  It is first trained on the
    step-0 reward; the real batch is then chosen from it.  ``continue`` keeps
    those parameters, ``lookahead`` additionally primes them on hallucinated
    next steps, ``reinit`` starts over.  Every mode is then trained on the
    true step-1 reward, recording the exact JSD every ``checkpoint_every``
    iterations.
    """
    seed = cfg.seed if seed is None else seed
    cfg = cfg.replace(train_context="true", strategy="gfn")
    pool, orc = data.sample_pool(cfg.pool_size, cfg.noise_scale, seed)
    rng = rng_mod.stream(seed, "gfn", "transfer")
    train0, pool0 = data.draw_seed_set(pool, orc, cfg.seed_size, rng_mod.stream(seed, "seed_set"))
    model0 = fit_model(cfg, train0)
    rm0 = reward_model(cfg, model0, pool0)
    init_seed = int(rng.integers(2**31))
    net0 = new_net(cfg, init_seed)
    res0 = train(net0, context(cfg, pool0, train0), rm0, cfg.query_size, cfg.trainer(), rng)
    samples = sample_batches(net0, context(cfg, pool0, train0), rm0, cfg.query_size,
                             cfg.inference_samples, rng)
    batch = select_query(samples)

    starts: dict[str, tuple[PolicyNet, AdamState | None]] = {}
    if "reinit" in modes:
        starts["reinit"] = (new_net(cfg, init_seed + 1), None)
    if "continue" in modes:
        starts["continue"] = (copy.deepcopy(net0), copy.deepcopy(res0.adam))
    if "lookahead" in modes:
        st = ALState(pool0, train0, model0, copy.deepcopy(net0), copy.deepcopy(res0.adam))
        lookahead_update(cfg, st, cfg.lookahead_samples, rng)
        starts["lookahead"] = (st.net, st.adam)

    pos = np.array(batch.indices, dtype=np.int64)
    ids = pool0.ids[pos]
    train1 = train0.extend(ids, pool0.x[pos], orc.label(ids))
    pool1 = pool0.remove(pos)
    model1 = fit_model(cfg, train1)
    rm1 = reward_model(cfg, model1, pool1)
    truth = oracle.enumerate_rewards(rm1, cfg.query_size, cfg.enum_cap)
    ctx1 = context(cfg, pool1, train1)

    curves = {}
    for mode, (net, adam) in starts.items():
        curve: list[tuple[int, float]] = []

        def record(it, n, curve=curve):
            p = oracle.exact_policy_marginal(oracle.net_log_pf(n, ctx1), len(pool1), cfg.query_size,
                                             cfg.enum_cap)
            curve.append((it, oracle.jsd(truth.probs, p)))

        mode_rng = rng_mod.stream(seed, "gfn", "transfer", mode)
        train(net, ctx1, rm1, cfg.query_size, cfg.trainer(cfg.transfer_iterations), mode_rng,
              adam=adam, callback=record, callback_every=cfg.checkpoint_every)
        curves[mode] = curve
        log.info("transfer seed %d %s: jsd0 %.3f final %.3f", seed, mode, curve[0][1], curve[-1][1])
    return {"seed": seed, "selected_batch": [int(i) for i in ids], "curves": curves}


# --- JMI temperature sweep -----------------------------------------------------


def _mean_se(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=np.float64)
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def jmi_sweep(cfg: Config, seed: int | None = None) -> list[dict]:
    """JMI of sampled batches per strategy and temperature on one seed set.

    Each stochastic strategy is sampled ``sweep_runs`` times from its own
    stream; the GFN is trained once per temperature.
    """
    seed = cfg.seed if seed is None else seed
    pool, orc = data.sample_pool(cfg.pool_size, cfg.noise_scale, seed)
    train_set, pool = data.draw_seed_set(pool, orc, cfg.seed_size, rng_mod.stream(seed, "seed_set"))
    model = fit_model(cfg, train_set)
    rm = reward_model(cfg, model, pool, 1.0)
    b = cfg.query_size
    rows = []
    greedy = rm.jmi(baselines.batchbald_greedy(rm, b).indices)
    rows.append({"strategy": "batchbald", "temperature": None, "jmi_mean": greedy, "jmi_stderr": 0.0,
                 "runs": 1})
    rows.append({"strategy": "bald", "temperature": None,
                 "jmi_mean": rm.jmi(baselines.bald_topB(rm.bald_scores(), b).indices),
                 "jmi_stderr": 0.0, "runs": 1})
    r = rng_mod.stream(seed, "strategy", "random")
    m, se = _mean_se([rm.jmi(baselines.random_batch(len(pool), b, r).indices) for _ in range(cfg.sweep_runs)])
    rows.append({"strategy": "random", "temperature": None, "jmi_mean": m, "jmi_stderr": se,
                 "runs": cfg.sweep_runs})
    r = rng_mod.stream(seed, "strategy", "stochastic-bald")
    m, se = _mean_se([rm.jmi(baselines.stochastic_bald(rm.bald_scores(), b, cfg.stochastic_bald_temp, r).indices)
                      for _ in range(cfg.sweep_runs)])
    rows.append({"strategy": "stochastic-bald", "temperature": None, "jmi_mean": m, "jmi_stderr": se,
                 "runs": cfg.sweep_runs})
    ctx = context(cfg, pool, train_set)
    for t in cfg.temperature_list:
        rng = rng_mod.stream(seed, "gfn", "sweep", repr(t))
        rmt = rm.with_temperature(t)
        net = new_net(cfg, int(rng.integers(2**31)), t)
        res = train(net, ctx, rmt, b, cfg.trainer(), rng)
        draws = sample_batches(net, ctx, rmt, b, cfg.sweep_runs, rng)
        m, se = _mean_se([rm.jmi(s.indices) for s, _ in draws])
        rows.append({"strategy": "gfn", "temperature": t, "jmi_mean": m, "jmi_stderr": se,
                     "runs": cfg.sweep_runs, "final_loss": float(np.mean(res.losses()[-100:]))})
        log.info("sweep T=%g: jmi %.3f +- %.3f", t, m, se)
    return rows


# --- density parity -------------------------------------------------------------


def oracle_compare(cfg: Config, seed: int | None = None, empirical_samples: int = 0):
    """Train at ``cfg.temperature`` and compare the policy to the exact reward distribution.

    The candidate pool is what remains after drawing the seed set, so it has
    ``pool_size - seed_size`` points.  ``p_model`` is the exact terminal
    marginal of the policy, or the empirical distribution of
    ``empirical_samples`` draws when that is positive.
    """
    seed = cfg.seed if seed is None else seed
    pool, orc = data.sample_pool(cfg.pool_size, cfg.noise_scale, seed)
    train_set, pool = data.draw_seed_set(pool, orc, cfg.seed_size, rng_mod.stream(seed, "seed_set"))
    model = fit_model(cfg, train_set)
    rm = reward_model(cfg, model, pool)
    truth = oracle.enumerate_rewards(rm, cfg.query_size, cfg.enum_cap)
    ctx = context(cfg, pool, train_set)
    rng = rng_mod.stream(seed, "gfn", "oracle")
    net = new_net(cfg, int(rng.integers(2**31)))
    curve: list[tuple[int, float]] = []

    def record(it, n):
        p = oracle.exact_policy_marginal(oracle.net_log_pf(n, ctx), len(pool), cfg.query_size, cfg.enum_cap)
        curve.append((it, oracle.jsd(truth.probs, p)))

    every = cfg.checkpoint_every if cfg.checkpoint_every else 0
    res = train(net, ctx, rm, cfg.query_size, cfg.trainer(), rng, callback=record if every else None,
                callback_every=every)
    if empirical_samples:
        draws = sample_batches(net, ctx, rm, cfg.query_size, empirical_samples, rng)
        p_model = oracle.empirical_distribution([s for s, _ in draws], truth.support)
    else:
        p_model = oracle.exact_policy_marginal(oracle.net_log_pf(net, ctx), len(pool), cfg.query_size,
                                               cfg.enum_cap)
    report = oracle.DistributionReport.build(truth.support, truth.probs, p_model)
    return report, res, curve
