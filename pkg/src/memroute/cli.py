"""Command-line entry point and experiment orchestration."""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, theory
from .config import ConfigError, ExperimentConfig
from .model import ABLATIONS, ModelConfig
from .tasks import (SrcdConfig, SrcdStream, generate_copy_task, read_sequences, stable_hash,
                    theoretical_opt, write_sequences)
from .train import (CopyTaskConfig, RoutingLog, evaluate, fit, load_checkpoint, metrics_csv,
                    read_metrics_csv, save_checkpoint, srcd_batches, transfer_comparison)
from .model import MemoryModel

CACHE_ENV = "MEMROUTE_CACHE"
SUITE_SEEDS = (0, 1, 2, 3, 4)
SUITES = ("table1-desk", "ablations-desk", "transfer-desk", "phase", "powerlaw", "oracle")
FAILED = "FAILED"


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "memroute"))


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x)}")


def _finite(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


# ---------------------------------------------------------------- data cache


def cached_sequences(config: SrcdConfig, count: int, start: int, tag: str,
                     root: Path | None = None) -> list:
    """Sequences ``start .. start + count`` of the stream, stored by config hash."""
    root = cache_dir() if root is None else root
    path = root / "data" / f"srcd-{config.config_hash()}-{tag}-{start}-{count}.tsv"
    if path.exists():
        seqs, h, _ = read_sequences(path)
        if h == config.config_hash() and len(seqs) == count:
            return seqs
    seqs = SrcdStream(config, start).take(count)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    write_sequences(tmp, seqs, config.to_dict())
    tmp.replace(path)
    return seqs


EVAL_START = 1 << 40
PROBE_START = 1 << 41


# ---------------------------------------------------------------- one experiment


def run_experiment(config: ExperimentConfig, out: str | Path | None = None,
                   verbose: bool = False) -> tuple[int, Path]:
    """Train, evaluate and analyse one configuration; returns (exit status, directory).

    A finished directory whose summary carries the same config hash is reused.
    """
    out = Path(out if out is not None else config.out)
    h = config.config_hash()
    summary_path = out / "summary.json"
    if summary_path.exists() and not (out / FAILED).exists():
        try:
            if json.loads(summary_path.read_text()).get("config_hash") == h:
                return 0, out
        except json.JSONDecodeError:
            pass
    out.mkdir(parents=True, exist_ok=True)
    if (out / FAILED).exists():
        (out / FAILED).unlink()
    stage = "config"
    try:
        (out / "config.ini").write_text(config.to_ini())
        stage = "data"
        eval_seqs = cached_sequences(config.data, config.eval_sequences, EVAL_START, "eval")
        probe_seqs = cached_sequences(config.data, config.analysis.probe_sequences,
                                      PROBE_START, "probe")
        stage = "train"
        mc = config.model
        model = MemoryModel(mc, config.data.key_vocab, config.data.value_vocab)
        t0 = time.time()
        log = (lambda r: print(f"step {r.step} attn={r.attention_fraction:.4f} "
                               f"acc={r.retrieval_acc:.3f} loss={r.task_loss:.3f}",
                               flush=True)) if verbose else None
        callbacks = [] if log is None else [lambda r: r.step % 500 == 0 and log(r)]
        rows, routing = fit(model, srcd_batches(config.data, mc.batch), mc.steps,
                            callbacks=callbacks)
        train_seconds = time.time() - t0
        (out / "metrics.csv").write_text(metrics_csv(rows, h))
        (out / "routing-log.csv").write_text(routing.to_csv(h))
        save_checkpoint(model, out / "checkpoint", mc.steps, {"config_hash": h})

        stage = "eval"
        ev = evaluate(model, eval_seqs)

        stage = "analysis"
        adir = out / "analysis"
        adir.mkdir(exist_ok=True)
        attention = [r.attention_fraction for r in rows]
        ratio = analysis.reduction_factor(attention)
        cons_ratio = 1.0 / ratio if ratio not in (0.0, math.inf) else (
            0.0 if ratio == math.inf else math.inf)
        transition = None
        if rows and rows[-1].step - rows[0].step >= 1000:
            tr = analysis.detect_transition([r.step for r in rows], attention,
                                            config.analysis.transition_window)
            transition = dataclasses.asdict(tr)
        (adir / "transition.json").write_text(_dump_json({"config_hash": h,
                                                          "transition": transition}))
        power = None
        try:
            fit_ = analysis.fit_power_law(routing.repetition, routing.pi_episodic,
                                          config.analysis.powerlaw_min_count,
                                          bootstrap=config.analysis.powerlaw_bootstrap,
                                          rng=np.random.default_rng([config.seed, 0xB007]))
            (adir / "powerlaw.csv").write_text(
                fit_.to_csv(h, config.analysis.powerlaw_min_count))
            power = {"p0": fit_.p0, "gamma": fit_.gamma, "gamma_se": _finite(fit_.gamma_se),
                     "r2": fit_.r2,
                     "monotone": fit_.monotone_nonincreasing(config.analysis.powerlaw_min_count),
                     "bins": len(fit_.valid_bins(config.analysis.powerlaw_min_count))}
        except analysis.InsufficientDataError as e:
            power = {"error": str(e)}
        probes = []
        pairs = analysis.collect_probe_pairs(model, probe_seqs)
        lines = [f"# config_hash={h}", "layer,redundancy,held_out,group"]
        for li, (H, A) in sorted(pairs.items()):
            try:
                pr = analysis.train_redundancy_probe(H, A, config.analysis.probe_ridge, li,
                                                     rng=np.random.default_rng([config.seed, li]))
            except analysis.InsufficientDataError:
                continue
            group = next(g for g, c in analysis.head_taxonomy([pr.redundancy]).items() if c)
            probes.append({"layer": li, "redundancy": pr.redundancy, "group": group})
            lines.append(f"{li},{pr.redundancy!r},{pr.held_out},{group}")
        (adir / "probe.csv").write_text("\n".join(lines) + "\n")

        summary = {"config_hash": h, "seed": config.seed, "ablations": list(mc.ablations),
                   "steps": mc.steps, "train_seconds": train_seconds,
                   "eval": ev, "consolidation_ratio": _finite(cons_ratio),
                   "reduction_factor": _finite(ratio),
                   "transition_step": transition["step"] if transition else None,
                   "powerlaw": power, "probes": probes,
                   "theoretical_opt": theoretical_opt(config.data)}
        summary_path.write_text(_dump_json(summary))
        return 0, out
    except Exception as e:  # noqa: BLE001 - any stage failure is reported the same way
        (out / FAILED).write_text(f"stage: {stage}\nconfig_hash: {h}\n"
                                  f"{type(e).__name__}: {e}\n\n{traceback.format_exc()}")
        print(f"experiment failed during {stage}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1, out


def verify_directory(directory: str | Path) -> list[str]:
    """Re-hash ``config.ini`` and check that every artifact carries the same hash."""
    d = Path(directory)
    problems = []
    try:
        cfg = ExperimentConfig.load(d / "config.ini")
    except (OSError, ConfigError) as e:
        return [f"config.ini: {e}"]
    h = cfg.config_hash()
    first = (d / "config.ini").read_text().splitlines()[0]
    if first != f"# config_hash={h}":
        problems.append(f"config.ini: header {first!r} does not match {h}")
    for f in sorted(d.rglob("*")):
        rel = f.relative_to(d)
        if f.is_dir() or rel.parts[0] == "checkpoint" and rel.name != "manifest.json":
            continue
        if f.suffix == ".csv":
            line = f.read_text().split("\n", 1)[0]
            if line != f"# config_hash={h}":
                problems.append(f"{rel}: config hash mismatch ({line!r})")
        elif f.suffix == ".json":
            obj = json.loads(f.read_text())
            got = obj.get("extra", {}).get("config_hash") if rel.name == "manifest.json" \
                else obj.get("config_hash")
            if got != h:
                problems.append(f"{rel}: config hash {got!r} != {h}")
    if (d / "checkpoint" / "manifest.json").exists():
        try:
            load_checkpoint(d / "checkpoint")
        except ValueError as e:
            problems.append(f"checkpoint: {e}")
    return problems


# ---------------------------------------------------------------- suites


def _variant_config(base: ExperimentConfig, ablations: Sequence[str], seed: int,
                    out: Path) -> ExperimentConfig:
    model = dataclasses.replace(base.model, ablations=tuple(ablations))
    return dataclasses.replace(base, model=model, seed=seed, out=str(out))


def _run_member(args) -> tuple[str, int, int, str]:
    name, seed, cfg = args
    status, path = run_experiment(cfg)
    return name, seed, status, str(path)


def _mean_std(values) -> tuple[float, float]:
    v = np.array([x for x in values if x is not None], dtype=np.float64)
    if not len(v):
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def run_variants(variants: dict[str, tuple[str, ...]], base: ExperimentConfig, root: Path,
                 jobs: int = 1) -> tuple[dict, list]:
    tasks = [(name, s, _variant_config(base, flags, s, root / f"{name}-seed{s}"))
             for name, flags in variants.items() for s in SUITE_SEEDS]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_member, tasks))
    else:
        results = [_run_member(t) for t in tasks]
    summaries: dict[str, list] = {name: [] for name in variants}
    failures = []
    for name, seed, status, path in results:
        if status:
            failures.append(f"{name} seed {seed}: see {path}/{FAILED}")
        else:
            summaries[name].append(json.loads((Path(path) / "summary.json").read_text()))
    return summaries, failures


TABLE1 = {"full": (), "no-consolidation": ("no-consolidation-loss",), "ct-only": ("ct-only",),
          "full-attention": ("full-attention",)}
ABLATION_ROWS = {"full": (), "no-consolidation": ("no-consolidation-loss",),
                 "no-q": ("no-q-feature",), "ct-only": ("ct-only",),
                 "full-attention": ("full-attention",)}


def _table(summaries: dict) -> list[dict]:
    rows = []
    for name, runs in summaries.items():
        row = {"variant": name, "runs": len(runs)}
        for key, get in (("dyn_mse", lambda s: s["eval"]["dynamics_mse"]),
                         ("ret_acc", lambda s: s["eval"]["retrieval_accuracy"]),
                         ("attention_fraction", lambda s: s["eval"]["attention_fraction"]),
                         ("consolidation_ratio", lambda s: s["consolidation_ratio"])):
            row[key], row[key + "_std"] = _mean_std([get(s) for s in runs])
        rows.append(row)
    return rows


def transfer_suite(base: ExperimentConfig, root: Path, steps: int = 500) -> tuple[list, list]:
    """Copy-task attention of SRCD-pretrained (frozen semantic + router) vs from scratch."""
    summaries, failures = run_variants({"full": ()}, base, root)
    rows = []
    for s in summaries["full"]:
        path = root / f"full-seed{s['seed']}"
        out = path / "transfer.json"
        h = s["config_hash"]
        if out.exists() and json.loads(out.read_text()).get("steps") == steps:
            rows.append(json.loads(out.read_text()))
            continue
        model, _ = load_checkpoint(path / "checkpoint")
        task = CopyTaskConfig(value_vocab=model.value_vocab, vocab=model.key_vocab,
                              seed=s["seed"])
        res = transfer_comparison(model, task, steps)
        row = {"config_hash": h, "seed": s["seed"], "steps": steps,
               "pretrained_attention": res["pretrained"]["attention_fraction"],
               "scratch_attention": res["scratch"]["attention_fraction"],
               "pretrained_train_attention": res["pretrained"].get("train_attention_fraction"),
               "scratch_train_attention": res["scratch"].get("train_attention_fraction"),
               "pretrained_accuracy": res["pretrained"]["retrieval_accuracy"],
               "scratch_accuracy": res["scratch"]["retrieval_accuracy"]}
        out.write_text(_dump_json(row))
        rows.append(row)
    return rows, failures


def oracle_rows() -> list[dict]:
    rows = []
    for n in (256, 1024, 2048):
        for f in (0.05, 0.1, 0.25):
            for K in (5, 10, 20):
                for eps in (0.0, 0.01, 0.03):
                    task = theory.StaticTask(n, f, K, eps)
                    static = theory.min_static_attention(task, integer_counts=True)
                    bound = theory.static_lower_bound(task)
                    rows.append({"n": n, "f": f, "K": K, "eps": eps,
                                 "static_min": float(static), "bound": float(bound),
                                 "slack": float(static - bound),
                                 "consolidation_m1": theory.consolidation_schedule_cost(
                                     task, 0.3, 1)})
    return rows


def phase_rows() -> list[dict]:
    rows = []
    for p0 in (0.05, 0.1, 0.17, 0.25, 0.4):
        sep = theory.find_separatrix(p0)
        rows.append({"p0": p0, "threshold": sep.threshold, "bisections": len(sep.widths) - 1})
    return rows


def reproduce_suite(name: str, out: str | Path, base: ExperimentConfig | None = None,
                    jobs: int = 1) -> dict:
    """Run a predefined batch and return ``{"rows": [...], "failures": [...]}``."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    base = base or ExperimentConfig()
    failures: list = []
    if name == "table1-desk":
        summaries, failures = run_variants(TABLE1, base, root, jobs)
        rows = _table(summaries)
    elif name == "ablations-desk":
        summaries, failures = run_variants(ABLATION_ROWS, base, root, jobs)
        rows = _table(summaries)
    elif name == "transfer-desk":
        rows, failures = transfer_suite(base, root)
    elif name == "powerlaw":
        summaries, failures = run_variants({"full": ()}, base, root, jobs)
        rows = [{"seed": s["seed"], **(s["powerlaw"] or {})} for s in summaries["full"]]
    elif name == "oracle":
        rows = oracle_rows()
    else:
        rows = phase_rows()
    result = {"suite": name, "seeds": len(SUITE_SEEDS), "rows": rows, "failures": failures}
    (root / f"{name}.json").write_text(_dump_json(result))
    return result


def format_rows(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)"
    cols = list(rows[0])
    fmt = lambda v: f"{v:.4g}" if isinstance(v, float) else str(v)
    table = [cols] + [[fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in table)


# ---------------------------------------------------------------- argument parsing


def _load_config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _data_arg(path: str):
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.tsv"))
        if not files:
            raise FileNotFoundError(f"no .tsv sequence files in {p}")
        seqs = []
        for f in files:
            seqs.extend(read_sequences(f)[0])
        return seqs
    return read_sequences(p)[0]


def cmd_gen_srcd(a) -> int:
    cfg = _load_config(a.config)
    data = cfg.data if a.seed is None else dataclasses.replace(cfg.data, seed=a.seed)
    seqs = SrcdStream(data, a.start).take(a.count)
    write_sequences(a.out, seqs, data.to_dict())
    print(f"wrote {len(seqs)} sequences to {a.out} (hash {data.config_hash()})")
    return 0


def cmd_gen_copy(a) -> int:
    seqs = generate_copy_task(a.seq_len, a.vocab, a.copy_count, a.seed, a.count, a.value_vocab)
    write_sequences(a.out, seqs, {"copy": [a.seq_len, a.vocab, a.copy_count, a.seed,
                                           a.value_vocab]})
    print(f"wrote {len(seqs)} copy-task sequences to {a.out}")
    return 0


def cmd_train(a) -> int:
    cfg = _load_config(a.config)
    model = cfg.model
    if a.ablation:
        model = dataclasses.replace(model, ablations=tuple(model.ablations) + tuple(a.ablation))
    if a.steps is not None:
        model = dataclasses.replace(model, steps=a.steps)
    if a.seed is not None:
        cfg = cfg.with_seed(a.seed)
    cfg = dataclasses.replace(cfg, model=dataclasses.replace(model, seed=cfg.seed))
    status, path = run_experiment(cfg, a.out or cfg.out, verbose=True)
    if status == 0:
        print((path / "summary.json").read_text())
    return status


def cmd_eval(a) -> int:
    model, _ = load_checkpoint(a.ckpt)
    res = evaluate(model, _data_arg(a.data))
    print(_dump_json(res), end="")
    return 0


def cmd_transfer(a) -> int:
    model, _ = load_checkpoint(a.ckpt)
    freeze = [x for x in a.freeze.split(",") if x]
    task = CopyTaskConfig(vocab=model.key_vocab, value_vocab=model.value_vocab, seed=a.seed)
    res = transfer_comparison(model, task, a.steps, freeze)
    print(_dump_json(res), end="")
    return 0


def cmd_oracle_static(a) -> int:
    task = theory.StaticTask(a.n, a.f, a.K, a.eps)
    print(f"static minimum attention: {float(theory.min_static_attention(task, True)):.4f}")
    print(f"lower bound (f - eps) n:  {float(theory.static_lower_bound(task)):.4f}")
    print(f"consolidation schedule:   "
          f"{theory.consolidation_schedule_cost(task, a.eps_cons, a.m):.4f}")
    points = theory.static_routing_frontier(task, task.K <= theory.MAX_ENUMERATION_K)
    bound = float(theory.static_lower_bound(task))
    if a.out:
        # one row per number of patterns routed to attention
        lines = ["size,error,attention,admissible,bound"]
        for p in points:
            s, e, att = p.as_floats()
            lines.append(f"{s},{e!r},{att!r},{int(p.error <= task.eps)},{bound!r}")
        Path(a.out).write_text("\n".join(lines) + "\n")
    elif a.K <= theory.MAX_ENUMERATION_K:
        print("size  error  attention")
        for p in points:
            s, e, att = p.as_floats()
            print(f"{s:4d}  {e:.4f}  {att:.4f}")
    return 0


def cmd_simulate_phase(a) -> int:
    traj = theory.phase_simulate(theory.PhaseState(a.q0, a.p0, a.eta_q, a.eta_p, a.q_star),
                                 a.dt, a.steps)
    if a.out:
        lines = ["t,q,p"] + [f"{i * a.dt!r},{float(q)!r},{float(p)!r}"
                             for i, (q, p) in enumerate(traj)]
        Path(a.out).write_text("\n".join(lines) + "\n")
    print(f"final q={traj[-1, 0]:.6f} p={traj[-1, 1]:.6f} basin={theory.classify_basin(traj)}")
    return 0


def cmd_find_separatrix(a) -> int:
    res = theory.find_separatrix(a.p0, a.q_star, a.eta_q, a.eta_p, a.tolerance)
    print(f"separatrix q0 = {res.threshold:.6f} (bracket [{res.lo:.6f}, {res.hi:.6f}], "
          f"{len(res.widths) - 1} bisections)")
    return 0


def cmd_fit_powerlaw(a) -> int:
    log = RoutingLog.read_csv(a.log)
    fit_ = analysis.fit_power_law(log.repetition, log.pi_episodic, a.min_count,
                                  bootstrap=a.bootstrap)
    print(f"P0={fit_.p0:.4f} gamma={fit_.gamma:.4f} (se {fit_.gamma_se:.4f}) r2={fit_.r2:.4f}")
    for b in fit_.valid_bins(a.min_count):
        print(f"  k~{b.k_center:9.2f}  P={b.mean:.4f}  n={b.count}")
    if a.out:
        first = Path(a.log).read_text().split("\n", 1)[0]
        h = first.split("=", 1)[1] if first.startswith("# config_hash=") else ""
        Path(a.out).write_text(fit_.to_csv(h, min_count=a.min_count))
    return 0


def cmd_probe_redundancy(a) -> int:
    model, _ = load_checkpoint(a.ckpt)
    pairs = analysis.collect_probe_pairs(model, _data_arg(a.data))
    rs = []
    for li, (H, A) in sorted(pairs.items()):
        pr = analysis.train_redundancy_probe(H, A, a.ridge, li)
        rs.append(pr.redundancy)
        print(f"layer {li}: R={pr.redundancy:.4f} (held-out tokens {pr.held_out})")
    print("taxonomy:", analysis.head_taxonomy(rs))
    return 0


def cmd_detect_transition(a) -> int:
    rows, _ = read_metrics_csv(a.log)
    tr = analysis.detect_transition([r.step for r in rows], [r.attention_fraction for r in rows],
                                    a.window)
    print(_dump_json(dataclasses.asdict(tr)), end="")
    return 0


def cmd_reproduce(a) -> int:
    res = reproduce_suite(a.suite, a.out, _load_config(a.config), a.jobs)
    print(format_rows(res["rows"]))
    for f in res["failures"]:
        print("FAILED:", f)
    return 1 if res["failures"] else 0


def cmd_verify(a) -> int:
    problems = verify_directory(a.dir)
    for p in problems:
        print(p)
    print("ok" if not problems else f"{len(problems)} problem(s)")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memroute", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-srcd", help="write SRCD sequences")
    p.add_argument("--config")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_srcd)

    p = sub.add_parser("gen-copy", help="write copy-task sequences")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seq-len", type=int, default=256)
    p.add_argument("--vocab", type=int, default=128)
    p.add_argument("--copy-count", type=int, default=12)
    p.add_argument("--value-vocab", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_copy)

    p = sub.add_parser("train", help="train, evaluate and analyse one configuration")
    p.add_argument("--config")
    p.add_argument("--ablation", nargs="*", choices=ABLATIONS, default=[])
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="copy-task transfer against a from-scratch control")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--freeze", default="semantic,router")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("oracle-static", help="static routing frontier and bounds")
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--f", type=float, default=0.05)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--eps", type=float, default=0.0)
    p.add_argument("--eps-cons", type=float, default=0.3)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--out", help="frontier CSV: size,error,attention,admissible,bound")
    p.set_defaults(func=cmd_oracle_static)

    for name, func in (("simulate-phase", cmd_simulate_phase),
                       ("find-separatrix", cmd_find_separatrix)):
        p = sub.add_parser(name)
        p.add_argument("--p0", type=float, default=0.17)
        p.add_argument("--q-star", type=float, default=0.83)
        p.add_argument("--eta-q", type=float, default=1.0)
        p.add_argument("--eta-p", type=float, default=1.0)
        if name == "simulate-phase":
            p.add_argument("--q0", type=float, default=0.9)
            p.add_argument("--dt", type=float, default=0.01)
            p.add_argument("--steps", type=int, default=5000)
            p.add_argument("--out")
        else:
            p.add_argument("--tolerance", type=float, default=1e-4)
        p.set_defaults(func=func)

    p = sub.add_parser("fit-powerlaw", help="fit P(k) to a routing log")
    p.add_argument("--log", required=True)
    p.add_argument("--min-count", type=int, default=20)
    p.add_argument("--bootstrap", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_powerlaw)

    p = sub.add_parser("probe-redundancy", help="linear redundancy probe per layer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ridge", type=float, default=1e-3)
    p.set_defaults(func=cmd_probe_redundancy)

    p = sub.add_parser("detect-transition", help="find the attention drop in a metrics log")
    p.add_argument("--log", required=True)
    p.add_argument("--window", type=int, default=500)
    p.set_defaults(func=cmd_detect_transition)

    p = sub.add_parser("reproduce", help="run a predefined multi-seed suite")
    p.add_argument("suite", choices=SUITES)
    p.add_argument("--out", default="runs")
    p.add_argument("--config")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("verify", help="check config hashes of an experiment directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
