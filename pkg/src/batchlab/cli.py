"""Command-line entry point.

Every subcommand resolves a :class:`~batchlab.config.Config`, creates a fresh
run directory under ``--out-dir`` and writes into it:

* ``config.txt``: the resolved configuration (re-runnable with ``--config``)
* ``seeds.json``: the seed manifest
* ``run.log``: the log of the run
* the subcommand's outputs (CSV or line-delimited JSON)

Existing run directories are never touched.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, data, gp, harness, oracle
from . import rng as rng_mod
from .config import Config, ConfigError, parse_config
from .policy import save_checkpoint
from .trainer import sample_batches, select_query, train

log = logging.getLogger("batchlab")

SUBCOMMANDS = ("synth-data", "fit-gp", "train-gfn", "oracle-compare", "jmi-sweep", "al-run", "transfer-exp")

# flag -> config key
FLAG_KEYS = {
    "seed": "seed", "strategy": "strategy", "temperature": "temperature", "pool_size": "pool_size",
    "query_size": "query_size", "transfer_mode": "transfer_mode", "lookahead_samples": "lookahead_samples",
}


def _dumps(rec) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(_dumps(r) + "\n")


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in columns})


def make_run_dir(out_dir: Path, command: str, seed: int) -> Path:
    """First free ``<command>-s<seed>-<NNN>`` under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(10_000):
        d = out_dir / f"{command}-s{seed}-{i:03d}"
        try:
            d.mkdir()
            return d
        except FileExistsError:
            continue
    raise RuntimeError(f"no free run directory under {out_dir}")


# --- subcommands -----------------------------------------------------------------


def cmd_synth_data(cfg: Config, run: Path) -> None:
    pool, orc = data.sample_pool(cfg.pool_size, cfg.noise_scale, cfg.seed)
    test = data.sample_test_set(cfg.test_size, cfg.seed + 10**6, cfg.noise_scale)
    train_set, rest = data.draw_seed_set(pool, orc, cfg.seed_size, rng_mod.stream(cfg.seed, "seed_set"))
    data.write_snapshot(run / "data.jsonl", rest, orc, train_set, test)
    log.info("wrote %d pool, %d seed and %d test points", len(rest), len(train_set), len(test))


def _seed_setup(cfg: Config):
    pool, orc = data.sample_pool(cfg.pool_size, cfg.noise_scale, cfg.seed)
    train_set, pool = data.draw_seed_set(pool, orc, cfg.seed_size, rng_mod.stream(cfg.seed, "seed_set"))
    return pool, orc, train_set


def cmd_fit_gp(cfg: Config, run: Path) -> None:
    _, _, train_set = _seed_setup(cfg)
    trace: list[float] = []
    params = gp.fit_hyperparams(train_set, cfg.gp_epochs, cfg.gp_lr, gp.KernelParams(nu=cfg.nu), trace)
    model = gp.FittedGP(params, train_set)
    model.save(run / "gp.json")
    write_jsonl(run / "lml_trace.jsonl", ({"epoch": i, "log_marginal_likelihood": v} for i, v in enumerate(trace)))
    test = data.sample_test_set(cfg.test_size, cfg.seed + 10**6, cfg.noise_scale)
    metrics = harness.evaluate(model, test)
    metrics["log_marginal_likelihood"] = gp.log_marginal_likelihood(train_set, params)
    (run / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    log.info("fitted %s; test mse %.4g", params, metrics["test_loss"])


def cmd_train_gfn(cfg: Config, run: Path) -> None:
    pool, _, train_set = _seed_setup(cfg)
    model = harness.fit_model(cfg, train_set)
    rm = harness.reward_model(cfg, model, pool)
    ctx = harness.context(cfg, pool, train_set)
    rng = rng_mod.stream(cfg.seed, "gfn", "train")
    net = harness.new_net(cfg, int(rng.integers(2**31)))
    res = train(net, ctx, rm, cfg.query_size, cfg.trainer(), rng)
    res.write_trace(run / "trace.jsonl")
    save_checkpoint(run / "policy.npz", net, res.adam)
    before = net.eval_count
    samples = sample_batches(net, ctx, rm, cfg.query_size, cfg.inference_samples, rng)
    evals = net.eval_count - before
    best = select_query(samples)
    write_jsonl(run / "samples.jsonl", ({"indices": [int(pool.ids[i]) for i in s.indices], "log_reward": r}
                                        for s, r in samples))
    summary = {"selected_batch": [int(pool.ids[i]) for i in best.indices],
               "log_reward": rm.log_reward(best.indices), "jmi": rm.jmi(best.indices),
               "policy_eval_count": evals, "final_loss": float(np.mean(res.losses()[-100:])) if res.trace else None}
    (run / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


def cmd_oracle_compare(cfg: Config, run: Path) -> None:
    report, res, curve = harness.oracle_compare(cfg)
    n = cfg.pool_size - cfg.seed_size
    report.write(run / "distribution.jsonl", n, cfg.query_size, cfg.temperature, cfg.seed)
    res.write_trace(run / "trace.jsonl")
    write_csv(run / "jsd_curve.csv", [{"iteration": i, "jsd_nats": v} for i, v in curve], ["iteration", "jsd_nats"])
    log.info("jsd %.4g nats, slope %.3f, intercept %.3g", report.jsd_nats, report.slope, report.intercept)


def cmd_jmi_sweep(cfg: Config, run: Path) -> None:
    rows = harness.jmi_sweep(cfg)
    write_csv(run / "jmi_sweep.csv", rows,
              ["strategy", "temperature", "jmi_mean", "jmi_stderr", "runs", "final_loss"])


def cmd_al_run(cfg: Config, run: Path) -> None:
    runs: dict[str, list[harness.RunLog]] = {}
    with open(run / "runlog.jsonl", "w", encoding="utf-8") as fh, \
            open(run / "gfn_traces.jsonl", "w", encoding="utf-8") as tfh:
        for strategy in cfg.strategy_list:
            scfg = cfg.replace(strategy=strategy)
            for seed in range(cfg.seed, cfg.seed + cfg.n_seeds):
                lg = harness.run_al(scfg, seed)
                runs.setdefault(strategy, []).append(lg)
                for r in lg.records:
                    fh.write(_dumps({"strategy": strategy, "seed": seed, **r}) + "\n")
                for step, trace in enumerate(lg.gfn_traces, 1):
                    for r in trace:
                        tfh.write(_dumps({"strategy": strategy, "seed": seed, "step": step, **r}) + "\n")
                fh.flush()
    write_csv(run / "test_loss.csv", harness.aggregate(runs),
              ["strategy", "labelled_count", "test_loss_mean", "test_loss_stderr", "n_seeds"])


def cmd_transfer_exp(cfg: Config, run: Path) -> None:
    rows, summary = [], []
    for seed in range(cfg.seed, cfg.seed + cfg.n_seeds):
        out = harness.transfer_experiment(cfg, seed)
        for mode, curve in out["curves"].items():
            rows.extend({"seed": seed, "mode": mode, "iteration": i, "jsd_nats": v} for i, v in curve)
            hit = harness.iterations_to(curve, 0.1)
            summary.append({"seed": seed, "mode": mode, "jsd_iter0": curve[0][1],
                            "iterations_to_jsd_0.1": None if math.isinf(hit) else hit,
                            "selected_batch": out["selected_batch"]})
    write_csv(run / "transfer_curves.csv", rows, ["seed", "mode", "iteration", "jsd_nats"])
    write_jsonl(run / "transfer_summary.jsonl", summary)


COMMANDS = {
    "synth-data": cmd_synth_data, "fit-gp": cmd_fit_gp, "train-gfn": cmd_train_gfn,
    "oracle-compare": cmd_oracle_compare, "jmi-sweep": cmd_jmi_sweep, "al-run": cmd_al_run,
    "transfer-exp": cmd_transfer_exp,
}


# --- plumbing --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="batchlab", description="GFlowNet batch active-learning lab")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="key = value config file")
        s.add_argument("--out-dir", type=Path, default=Path("runs"), help="parent of the run directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--strategy")
        s.add_argument("--temperature", type=float)
        s.add_argument("--pool-size", type=int)
        s.add_argument("--query-size", type=int)
        s.add_argument("--transfer-mode")
        s.add_argument("--lookahead-samples", type=int)
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args: argparse.Namespace) -> Config:
    overrides: dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag)
        if v is not None:
            overrides[key] = v
    if args.strategy is not None and "strategies" not in overrides:
        overrides["strategies"] = args.strategy
    return parse_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(fmt)
    root.addHandler(console)
    handler = None
    try:
        cfg = resolve(args)
        run = make_run_dir(args.out_dir, args.command, cfg.seed)
        handler = logging.FileHandler(run / "run.log", encoding="utf-8")
        handler.setFormatter(fmt)
        root.addHandler(handler)
        (run / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
        manifest = rng_mod.manifest(cfg.seed)
        manifest["test_root_seed"] = cfg.seed + 10**6
        (run / "seeds.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        log.info("%s -> %s", args.command, run)
        COMMANDS[args.command](cfg, run)
        log.info("done")
        print(run)
        return 0
    except ConfigError as e:
        log.error("invalid configuration: %s", e)
        return 2
    except Exception as e:  # noqa: BLE001
        log.exception("%s failed: %s", args.command, e)
        return 1
    finally:
        for h in (handler, console):
            if h is not None:
                root.removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
