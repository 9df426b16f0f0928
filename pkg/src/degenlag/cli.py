"""Experiment runner: dataset generation, training, simulation, studies.

Surface:

    degenlag <action> --experiment {lv|mcp|gc} [--config <json>] --out <dir>
             [--seed <n>] [--checkpoint <path>] [--scheme {dvi|rk4}]
             [--h <real>] [--steps <n>]

Actions: gen-data, train, simulate, convergence, compare, classify. Every
command is a pure function of (config, seed, input files); outputs are CSV
tables, JSON metrics, and JSON sidecars carrying the config hash and the
library version. Exit codes: 0 success, 2 configuration error, 3 numerical
failure (all runs divergent). ``DEGENLAG_THREADS`` bounds worker threads
for the run grids (default 1, fully deterministic).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import ConfigError, DegenlagError, PhaseState
from .integrate import (
    config_hash,
    hamiltonian_series,
    read_trajectory,
    reference_solve,
    simulate,
    write_trajectory,
)
from .models import (
    GuidingCenterModel,
    LotkaVolterraModel,
    MasslessParticleModel,
    OrbitClass,
    gc_classify_trajectory,
)
from .nn import NeuralDegenerateModel
from .train import (
    GC_PERIOD_DT,
    VALIDATION,
    TrainConfig,
    TrainPhase,
    build_experiment_model,
    default_epsilon,
    default_phases,
    gc_scheme_rescale,
    gen_dataset_gc,
    gen_dataset_lv,
    gen_dataset_mcp,
    read_pairs_csv,
    read_triples_csv,
    run_training,
    write_pairs_csv,
    write_triples_csv,
)

EXPERIMENTS = ("lv", "mcp", "gc")
ACTIONS = ("gen-data", "train", "simulate", "convergence", "compare", "classify")

# Named guiding-center reference orbits: same start point, varying initial
# parallel velocity, from barely passing to deeply trapped.
GC_NAMED_U0 = {
    "BP": -7.782e-4,
    "BT": -7.610e-4,
    "WT": -7.487e-4,
    "DT": -4.306e-4,
}

LV_PERIOD_11 = 9.3197689626


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("DEGENLAG_THREADS", "1")))
    except ValueError:
        return 1


def _maybe_parallel(fn, items):
    n = thread_count()
    if n <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config JSON: {exc}") from exc


def reference_model(experiment: str, config: dict):
    params = config.get("model", {})
    if experiment == "lv":
        return LotkaVolterraModel()
    if experiment == "mcp":
        return MasslessParticleModel(
            a0=params.get("A0", 1.0), e0=params.get("E0", 1.0)
        )
    if experiment == "gc":
        return GuidingCenterModel(
            b0=params.get("B0", 1.0),
            r0=params.get("R0", 1.0),
            q0=params.get("q0", 2.0),
            mu=params.get("mu", 2.25e-6),
            quadrature_points=params.get("quadrature_points", 20),
        )
    raise ConfigError(f"unknown experiment {experiment!r}")


def default_initial_state(experiment: str) -> PhaseState:
    if experiment == "lv":
        return PhaseState([1.0], [1.0])
    if experiment == "mcp":
        return PhaseState([0.0], [np.pi / 2 + 1.0])
    return PhaseState([0.0, 0.0], [0.05, GC_NAMED_U0["DT"]])


def default_step(experiment: str) -> float:
    return {"lv": 0.1, "mcp": 0.5, "gc": GC_PERIOD_DT / 20.0}[experiment]


def _sidecar(path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["version"] = __version__
    payload["config_hash"] = config_hash(payload)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _load_model(args, config, pairs=None):
    """Checkpointed neural model if given, else the analytic reference."""
    if args.checkpoint:
        return NeuralDegenerateModel.load(args.checkpoint)
    return reference_model(args.experiment, config)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, config: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_cfg = config.get("data", {})
    if args.experiment == "lv":
        pairs, triples = gen_dataset_lv(
            n_traj=data_cfg.get("n_traj", 2000),
            steps=data_cfg.get("steps", 5),
            h=data_cfg.get("h", 0.1),
            seed=args.seed,
        )
    elif args.experiment == "mcp":
        model_cfg = config.get("model", {})
        pairs, triples = gen_dataset_mcp(
            n_points=data_cfg.get("n_points", 15000),
            h=data_cfg.get("h", 0.5),
            seed=args.seed,
            a0=model_cfg.get("A0", 1.0),
            e0=model_cfg.get("E0", 1.0),
        )
    else:
        model_cfg = config.get("model", {})
        pairs, triples = gen_dataset_gc(
            n_traj=data_cfg.get("n_traj", 600),
            steps=data_cfg.get("steps", 60),
            seed=args.seed,
            b0=model_cfg.get("B0", 1.0),
            r0=model_cfg.get("R0", 1.0),
            q0=model_cfg.get("q0", 2.0),
            mu=model_cfg.get("mu", 2.25e-6),
        )
    for ds in (pairs, triples):
        ds.metadata["generator_version"] = __version__
        ds.metadata["seed"] = args.seed
        ds.metadata["config_hash"] = config_hash({"config": config, "seed": args.seed})
    write_pairs_csv(pairs, out / "pairs.csv")
    write_triples_csv(triples, out / "triples.csv")
    print(f"wrote {len(pairs)} pairs and {len(triples)} triples to {out}")
    return 0


def _train_config(args, config: dict) -> TrainConfig:
    t = config.get("train", {})
    loss = t.get("loss", "vf")
    raw_phases = t.get("phases")
    if raw_phases is None:
        phases = default_phases(args.experiment, "scheme" if loss == "scheme" else "vf")
    else:
        phases = [
            TrainPhase(int(p[0]), float(p[1]), bool(p[2]) if len(p) > 2 else False)
            for p in raw_phases
        ]
    epsilon = t.get(
        "epsilon", default_epsilon(args.experiment, "scheme" if loss == "scheme" else "vf")
    )
    return TrainConfig(
        phases=phases,
        loss=loss,
        epsilon=float(epsilon),
        batch_size=int(t.get("batch_size", 500)),
        seed=args.seed,
        use_gram=bool(t.get("use_gram", True)),
        componentwise_gram=bool(t.get("componentwise_gram", False)),
        gram_per_batch=bool(t.get("gram_per_batch", True)),
    )


def cmd_train(args, config: dict) -> int:
    out = Path(args.out)
    pairs_path = out / "pairs.csv"
    triples_path = out / "triples.csv"
    if not pairs_path.exists():
        raise ConfigError(f"dataset not found in {out}; run gen-data first")
    pairs = read_pairs_csv(pairs_path)
    train_cfg = _train_config(args, config)
    if train_cfg.loss == "scheme":
        if not triples_path.exists():
            raise ConfigError(f"triples dataset not found in {out}")
        triples = read_triples_csv(triples_path)
        dataset = triples
        rescale = gc_scheme_rescale(triples) if args.experiment == "gc" else None
        model = build_experiment_model(
            args.experiment, pairs, seed=args.seed, h_rescale_override=rescale
        )
    else:
        dataset = pairs
        model = build_experiment_model(args.experiment, pairs, seed=args.seed)

    hidden = config.get("train", {}).get("hidden")
    if hidden:
        from .nn import build_neural_model

        model = build_neural_model(
            model.dimension,
            list(hidden),
            pairs.select(0)[0],
            angular=args.experiment == "gc",
            final_bias=args.experiment != "gc",
            h_rescale=model.h_rescale,
            seed=args.seed,
            name=model.name,
        )

    run = run_training(train_cfg, dataset, model, verbose=bool(config.get("verbose")))
    label = config.get("train", {}).get("label", train_cfg.loss)
    ckpt = out / f"model_{label}.json"
    model.save(ckpt)
    run.write_trace_csv(out / f"trace_{label}.csv")
    _sidecar(
        out / f"trace_{label}.json",
        {
            "experiment": args.experiment,
            "seed": args.seed,
            "loss": train_cfg.loss,
            "epsilon": train_cfg.epsilon,
            "phases": [[p.epochs, p.learning_rate, p.use_approximate_residual] for p in train_cfg.phases],
            "aborted": run.aborted,
            "final_test_loss": run.trace[-1]["test_loss"] if run.trace else None,
        },
    )
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_simulate(args, config: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim_cfg = config.get("simulate", {})
    model = _load_model(args, config)
    z0_cfg = sim_cfg.get("z0")
    z0 = PhaseState.from_z(np.asarray(z0_cfg, dtype=float)) if z0_cfg else default_initial_state(
        args.experiment
    )
    h = args.h if args.h is not None else sim_cfg.get("h", default_step(args.experiment))
    steps = args.steps if args.steps is not None else sim_cfg.get("steps", 1000)
    scheme = args.scheme or sim_cfg.get("scheme", "dvi")
    record_every = int(sim_cfg.get("record_every", 1))
    traj = simulate(model, z0, float(h), int(steps), scheme=scheme, record_every=record_every)
    name = f"traj_{args.experiment}_{scheme}"
    write_trajectory(
        traj,
        out / f"{name}.csv",
        {
            "experiment": args.experiment,
            "model": getattr(model, "name", "model"),
            "scheme": scheme,
            "h": float(h),
            "steps": int(steps),
            "seed": args.seed,
            "diverged": traj.diverged,
            "version": __version__,
        },
    )
    print(f"wrote {out / (name + '.csv')} (diverged={traj.diverged})")
    return 3 if traj.diverged and len(traj) <= 1 else 0


def _validation_ics(args, config: dict, n: int) -> np.ndarray:
    """Initial conditions of validation trajectories, or fresh samples."""
    pairs_path = Path(args.out) / "pairs.csv"
    if pairs_path.exists():
        pairs = read_pairs_csv(pairs_path)
        mask = pairs.split == VALIDATION
        ids = np.unique(pairs.traj_id[mask])
        ics = []
        for t in ids[:n]:
            rows = np.where(pairs.traj_id == t)[0]
            ics.append(pairs.z[rows[0]])
        if ics:
            return np.asarray(ics)
    rng = np.random.default_rng(args.seed + 1)
    if args.experiment == "lv":
        ics = []
        while len(ics) < n:
            x, y = rng.uniform(0.15, 7.6), rng.uniform(0.02, 5.0)
            if x + y - 2 * np.log(x) - np.log(y) <= 4.4:
                ics.append([x, y])
        return np.asarray(ics)
    if args.experiment == "mcp":
        pts = []
        while len(pts) < n:
            radius, ang = np.pi * np.sqrt(rng.uniform()), rng.uniform(0, 2 * np.pi)
            x, y = radius * np.cos(ang), np.pi / 2 + radius * np.sin(ang)
            if 2 - np.cos(x) - np.sin(y) <= 1.5:
                pts.append([x, y])
        return np.asarray(pts)
    return np.column_stack(
        [
            rng.uniform(-np.pi / 10, np.pi / 10, n),
            rng.uniform(0, 2 * np.pi, n),
            np.sqrt(rng.uniform(0.03**2, 0.055**2, n)),
            rng.uniform(-9e-4, -3e-4, n),
        ]
    )


def cmd_convergence(args, config: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    conv = config.get("convergence", {})
    ladder = conv.get("h_ladder", [0.05, 0.025, 0.0125, 0.00625])
    t_end = float(conv.get("t_end", 10.0))
    n_ics = int(conv.get("n_ics", 20))
    schemes = [args.scheme] if args.scheme else ["dvi", "rk4"]
    model = _load_model(args, config)
    truth = reference_model(args.experiment, config)
    ics = _validation_ics(args, config, n_ics)

    ref_endpoints = [
        reference_solve(truth, PhaseState.from_z(z), (0.0, t_end), t_eval=[0.0, t_end]).states[-1]
        for z in ics
    ]

    def run_one(job):
        h, scheme, z0, ref_end = job
        n_steps = int(round(t_end / h))
        traj = simulate(model, PhaseState.from_z(z0), h, n_steps, scheme=scheme)
        if traj.diverged or len(traj) != n_steps + 1:
            return np.inf
        return float(np.linalg.norm(traj.states[-1] - ref_end))

    rows = []
    total_runs, divergent_runs = 0, 0
    for h in ladder:
        for scheme in schemes:
            jobs = [(h, scheme, z, e) for z, e in zip(ics, ref_endpoints)]
            errs = np.asarray(_maybe_parallel(run_one, jobs))
            total_runs += len(errs)
            divergent_runs += int(np.sum(~np.isfinite(errs)))
            finite = errs[np.isfinite(errs)]
            med = float(np.median(errs)) if len(finite) else np.inf
            p5 = float(np.percentile(finite, 5)) if len(finite) else np.inf
            p95 = float(np.percentile(finite, 95)) if len(finite) else np.inf
            rows.append((h, scheme, med, p5, p95, int(np.sum(~np.isfinite(errs)))))

    import csv as _csv

    with open(out / "convergence.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["h", "scheme", "median_error", "p5_error", "p95_error", "n_divergent"])
        for row in rows:
            w.writerow([repr(float(row[0])), row[1]] + [repr(float(v)) for v in row[2:5]] + [row[5]])
    _sidecar(
        out / "convergence.json",
        {
            "experiment": args.experiment,
            "seed": args.seed,
            "t_end": t_end,
            "h_ladder": list(map(float, ladder)),
            "schemes": schemes,
            "n_ics": n_ics,
            "checkpoint": args.checkpoint,
        },
    )
    print(f"wrote {out / 'convergence.csv'}")
    return 3 if divergent_runs == total_runs else 0


def cmd_compare(args, config: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cmp_cfg = config.get("compare", {})
    truth = reference_model(args.experiment, config)
    models = [("reference", truth)]
    checkpoints = list(cmp_cfg.get("checkpoints", []))
    if args.checkpoint:
        checkpoints.append(args.checkpoint)
    for path in checkpoints:
        model = NeuralDegenerateModel.load(path)
        models.append((Path(path).stem, model))

    h = args.h if args.h is not None else cmp_cfg.get("h", default_step(args.experiment))
    schemes = [args.scheme] if args.scheme else list(cmp_cfg.get("schemes", ["dvi", "rk4"]))

    if args.experiment == "gc":
        named = {
            name: np.array([0.0, 0.0, 0.05, u0]) for name, u0 in GC_NAMED_U0.items()
        }
        t_end = float(cmp_cfg.get("t_end", 100 * GC_PERIOD_DT))
    elif args.experiment == "lv":
        named = {"default": np.array([1.0, 1.0])}
        t_end = float(cmp_cfg.get("t_end", LV_PERIOD_11))
    else:
        named = {"default": np.array([0.0, np.pi / 2 + 1.0])}
        t_end = float(cmp_cfg.get("t_end", 50.0))
    if "initial_conditions" in cmp_cfg:
        named = {k: np.asarray(v, dtype=float) for k, v in cmp_cfg["initial_conditions"].items()}

    n_steps = int(round(t_end / h))
    record_every = max(1, int(cmp_cfg.get("record_every", max(1, n_steps // 2000))))

    results = {}
    total, divergent = 0, 0
    for ic_name, z0 in named.items():
        ref = reference_solve(
            truth,
            PhaseState.from_z(z0),
            (0.0, t_end),
            t_eval=np.arange(n_steps + 1) * h,
        )
        ref_class = (
            gc_classify_trajectory(ref.states).value if args.experiment == "gc" else None
        )
        for label, model in models:
            for scheme in schemes:
                total += 1
                traj = simulate(
                    model, PhaseState.from_z(z0), h, n_steps, scheme=scheme,
                    record_every=record_every,
                )
                key = f"{ic_name}/{label}/{scheme}"
                entry = {"diverged": traj.diverged, "n_states": len(traj)}
                if traj.diverged:
                    divergent += 1
                n_common = min(len(traj), len(ref.states[:: record_every]))
                ref_states = ref.states[::record_every][:n_common]
                scale = max(float(np.max(np.abs(ref_states))), 1e-30)
                entry["sup_error"] = float(
                    np.max(np.abs(traj.states[:n_common] - ref_states)) / scale
                ) if n_common else np.inf
                h_true = hamiltonian_series(truth, traj.states)
                h0 = h_true[0]
                with np.errstate(invalid="ignore"):
                    entry["max_rel_h_drift"] = float(
                        np.nanmax(np.abs(h_true - h0) / max(abs(h0), 1e-30))
                    )
                if args.experiment == "gc" and len(traj) > 1:
                    entry["classification"] = gc_classify_trajectory(traj.states).value
                    entry["reference_classification"] = ref_class
                fname = out / f"compare_{ic_name}_{label}_{scheme}.csv"
                write_trajectory(
                    traj,
                    fname,
                    {
                        "experiment": args.experiment,
                        "ic": ic_name,
                        "model": label,
                        "scheme": scheme,
                        "h": float(h),
                        "seed": args.seed,
                        "version": __version__,
                    },
                )
                results[key] = entry

    _sidecar(
        out / "compare.json",
        {
            "experiment": args.experiment,
            "seed": args.seed,
            "h": float(h),
            "t_end": t_end,
            "schemes": schemes,
            "results": results,
        },
    )
    print(f"wrote {out / 'compare.json'} ({len(results)} runs)")
    return 3 if total and divergent == total else 0


def cmd_classify(args, config: dict) -> int:
    if args.experiment != "gc":
        raise ConfigError("classification applies to the guiding-center experiment")
    traj_path = config.get("classify", {}).get("trajectory_csv")
    if traj_path is None:
        raise ConfigError("config must point at classify.trajectory_csv")
    traj = read_trajectory(traj_path)
    label = gc_classify_trajectory(traj.states)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _sidecar(
        out / "classification.json",
        {
            "experiment": "gc",
            "trajectory": str(traj_path),
            "classification": label.value,
            "seed": args.seed,
        },
    )
    print(label.value)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="degenlag",
        description="Degenerate variational integration and learning experiments",
    )
    parser.add_argument("action", choices=ACTIONS)
    parser.add_argument("--experiment", choices=EXPERIMENTS, required=True)
    parser.add_argument("--config", default=None, help="JSON config path")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--checkpoint", default=None, help="neural model checkpoint")
    parser.add_argument("--scheme", choices=["dvi", "rk4"], default=None)
    parser.add_argument("--h", type=float, default=None, help="time step override")
    parser.add_argument("--steps", type=int, default=None, help="step count override")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "convergence": cmd_convergence,
    "compare": cmd_compare,
    "classify": cmd_classify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        return COMMANDS[args.action](args, config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DegenlagError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
