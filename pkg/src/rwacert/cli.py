"""Command-line surface: synthesis, verification, composition, simulation.

One JSON config file drives every command; defaults reproduce the docking
study's parameter set and print with ``--print-defaults``. All randomness
flows from the seeds in the config, so reruns are byte-reproducible.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import composition, dynamics, geometry, nn, training
from .certificate import (
    FrwaCertificate,
    RwaCertificate,
    Witness,
    certificate_from_dict,
    certificate_to_dict,
)
from .dynamics import Plant, double_integrator_plant, simulate, simulate_batch, spacecraft_plant
from .geometry import RwaTask, make_docking_task, make_surrogate_task, task_from_dict, task_to_dict
from .training import TrainConfig, cegis
from .verifier import (
    BnbConfig,
    check_condition1,
    check_condition2_filtered,
    check_condition2_plain,
    check_condition3,
    check_safety_direct,
    verdict_to_dict,
)

__all__ = ["main", "default_config", "load_config", "RunConfig"]

BUNDLE_FORMAT = "rwacert-bundle-v1"


def default_config() -> dict:
    """The full default configuration (docking-study values)."""
    return {
        "task": {
            "kind": "docking",  # or "surrogate"
            "a": 1.0,
            "n_directions": 8,
            "v_tol": 1e-6,
            "v_max": 0.5,
            "goal_half_width": 0.35,
        },
        "system": {
            "m": 12.0,
            "n": geometry.MEAN_MOTION,
            "t_step": 1.0,
            "thrust_limit": 1.0,
        },
        "mode": "frwa",
        "witness": {"alpha": 1.0 + 1e-5, "beta": 1.0, "epsilon": 1e-7},
        "clamps": {"c1": -10.0, "c2": 1.2},
        "architecture": {"controller": [20, 20], "certificate": [30, 30]},
        "controller_init": "regress_to_baseline",
        "import_path": None,
        "train": {
            "c_s": 1.0,
            "c_d": 10.0,
            "delta1": 1e-4 - 1e-5,
            "delta2": 1e-4 - 1e-7,
            "lr_initial": 5e-3,
            "lr_finetune": 1e-4,
            "epochs_max": 2500,
            "batch_size": 0,
            "zero_loss_tol": 0.0,
            "neighbor_count": 100,
            "neighbor_radius": 0.05,
            "seed": 0,
            "momentum": 0.9,
            "lr_decay": 0.999,
            "sublevel_pad": 0.3,
            "warmup_epochs": 500,
            "warmup_horizon": 400,
            "c_u": 1.0,
            "delta3": 1e-4 - 1e-5,
            "data_uniform": 8000,
            "data_initial": 2000,
        },
        "bnb": {
            "max_boxes": 5_000_000,
            "min_width_pos": 1e-4,
            "min_width_vel": 1e-5,
            "relaxation": "linear",
            "soundness_margin": 1e-9,
            "parallel_workers": 1,
            "batch_size": 2048,
            "probe_samples": 32,
        },
        "wall_budget_s": 14400.0,
        "schedule": [],
        "simulate": {"trials": 1000, "max_steps": 2000, "seed": 0, "start": None},
        "check_direct_safety": False,
    }


def _merge(base: dict, override: dict, path="") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise KeyError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


@dataclass(frozen=True, eq=False)
class RunConfig:
    raw: dict
    task: RwaTask
    plant: Plant
    witness: Witness
    train: TrainConfig
    bnb: BnbConfig

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def clamps(self) -> tuple[float, float]:
        return float(self.raw["clamps"]["c1"]), float(self.raw["clamps"]["c2"])

    def architecture(self, dim: int, control_dim: int) -> tuple[list[int], list[int]]:
        arch = self.raw["architecture"]
        pi = [dim] + [int(x) for x in arch["controller"]] + [control_dim]
        v = [dim] + [int(x) for x in arch["certificate"]] + [1]
        return pi, v


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    doc = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SystemExit(f"config parse error in {path} at line {exc.lineno}: {exc.msg}")
        doc = _merge(doc, user)
    if overrides:
        doc = _merge(doc, overrides)

    t = doc["task"]
    sysd = doc["system"]
    if t["kind"] == "docking":
        task = make_docking_task(
            float(t["a"]),
            n_directions=int(t["n_directions"]),
            v_tol=float(t["v_tol"]),
            v_max=float(t["v_max"]),
            goal_half_width=float(t["goal_half_width"]),
            mean_motion=float(sysd["n"]),
        )
        params = dynamics.SystemParams(
            m=float(sysd["m"]),
            n=float(sysd["n"]),
            t_step=float(sysd["t_step"]),
            thrust_limit=float(sysd["thrust_limit"]),
        )
        plant = spacecraft_plant(params)
    elif t["kind"] == "surrogate":
        task = make_surrogate_task(
            float(t["a"]),
            n_directions=int(t["n_directions"]),
            v_tol=float(t["v_tol"]),
            v_max=float(t["v_max"]),
            goal_half_width=float(t["goal_half_width"]),
            mean_motion=float(sysd["n"]),
        )
        plant = double_integrator_plant(
            t_step=float(sysd["t_step"]),
            mass=float(sysd["m"]),
            accel_limit=float(sysd["thrust_limit"]),
        )
    else:
        raise SystemExit(f"unknown task kind {t['kind']!r}")

    witness = Witness(**{k: float(v) for k, v in doc["witness"].items()})
    train = TrainConfig(**doc["train"])
    bnb = BnbConfig(**doc["bnb"])
    return RunConfig(doc, task, plant, witness, train, bnb)


# ---------------------------------------------------------------------------
# Artifact I/O
# ---------------------------------------------------------------------------


def write_bundle(path, cert, controller, task, cfg: RunConfig) -> None:
    doc = {
        "format": BUNDLE_FORMAT,
        "certificate": certificate_to_dict(cert),
        "controller": nn.to_dict(controller),
        "task": task_to_dict(task),
        "config": {"task": cfg.raw["task"], "system": cfg.raw["system"], "mode": cfg.mode},
    }
    Path(path).write_text(json.dumps(doc))


def read_bundle(path):
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise SystemExit(f"cannot read bundle {path}: {exc}")
    if doc.get("format") != BUNDLE_FORMAT:
        raise SystemExit(f"{path} is not a certificate bundle")
    cert = certificate_from_dict(doc["certificate"])
    controller = nn.from_dict(doc["controller"])
    task = task_from_dict(doc["task"])
    return cert, controller, task, doc


ITERATION_CSV_HEADER = [
    "iteration",
    "loss",
    "train_status",
    "train_epochs",
    "verdicts",
    "counterexamples",
    "wall_time_s",
]


def write_iteration_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ITERATION_CSV_HEADER)
        for r in records:
            verdicts = ";".join(f"{k}:{v.status.value}" for k, v in r.verdicts.items())
            cexs = ";".join(
                ("pseudo:" if pseudo else "") + name + ":" + ",".join(f"{x:.17g}" for x in pt)
                for name, pt, pseudo in r.counterexamples
            )
            writer.writerow(
                [r.iteration, f"{r.loss:.17g}", r.train_status, r.train_epochs, verdicts, cexs,
                 f"{r.wall_time_s:.3f}"]
            )


STAGE_CSV_HEADER = [
    "stage",
    "n",
    "initial",
    "cumulative_time_s",
    "min_time_s",
    "mean_time_s",
    "max_time_s",
    "min_iters",
    "mean_iters",
    "max_iters",
    "success",
]


def write_stage_csv(path, result: composition.CrwaResult, specs) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STAGE_CSV_HEADER)
        cumulative = 0.0
        for rec, spec in zip(result.records, specs):
            desc = geometry.region_to_dict(spec.initial, inline_networks=False)
            t = rec.wall_time_s
            iters = rec.cegis.iterations
            writer.writerow(
                [
                    rec.index,
                    rec.index + 1,
                    json.dumps(desc),
                    f"{cumulative:.3f}",
                    f"{t:.3f}",
                    f"{t:.3f}",
                    f"{t:.3f}",
                    iters,
                    iters,
                    iters,
                    int(rec.cegis.verified),
                ]
            )
            cumulative += t


def trajectory_csv_header(task: RwaTask) -> list[str]:
    if task.dim == 4:
        state_cols = ["x", "y", "xdot", "ydot"]
        input_cols = ["fx", "fy"]
    else:
        state_cols = ["x", "xdot"]
        input_cols = ["fx"]
    return ["t"] + state_cols + input_cols + ["stage"]


def write_trajectory_csv(path, traj: dynamics.Trajectory, task: RwaTask, stages=None) -> None:
    header = trajectory_csv_header(task)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        n = traj.states.shape[0]
        for i in range(n):
            row = [i]
            row.extend(f"{v:.17g}" for v in traj.states[i])
            if i < traj.inputs.shape[0]:
                row.extend(f"{v:.17g}" for v in traj.inputs[i])
            else:
                row.extend("" for _ in range(traj.inputs.shape[1] if traj.inputs.size else task.dim // 2))
            row.append(int(stages[i]) if stages is not None else 0)
            writer.writerow(row)


def write_stats_csv(path, stats: dynamics.BatchStats) -> None:
    doc = stats.as_dict()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(doc.keys()))
        writer.writerow([doc[k] for k in doc])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_cegis(args) -> int:
    cfg = load_config(args.config)
    if args.dry_run:
        print("config ok")
        return 0
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task, plant = cfg.task, cfg.plant
    pi_sizes, v_sizes = cfg.architecture(task.dim, plant.control_dim)
    c1, c2 = cfg.clamps

    def log(rec):
        verdicts = " ".join(f"{k}={v.status.value}" for k, v in rec.verdicts.items())
        print(
            f"iteration {rec.iteration}: loss={rec.loss:.3e} train={rec.train_status} {verdicts}",
            flush=True,
        )

    result = cegis(
        task,
        plant,
        cfg.train,
        cfg.bnb,
        float(cfg.raw["wall_budget_s"]),
        mode=cfg.mode,
        witness=cfg.witness,
        c1=c1,
        c2=c2,
        controller_init=cfg.raw["controller_init"],
        import_path=cfg.raw["import_path"],
        pi_sizes=pi_sizes,
        v_sizes=v_sizes,
        on_iteration=log,
    )
    write_bundle(out / "certificate_bundle.json", result.certificate, result.controller, task, cfg)
    nn.save(result.controller, out / "controller.json")
    write_iteration_csv(out / "iterations.csv", result.records)
    print(f"status: {result.status} after {result.iterations} iterations "
          f"({result.wall_time_s:.1f}s)")
    return 0 if result.verified else 1


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    cert, controller, task, _ = read_bundle(args.bundle)
    if args.controller:
        controller = nn.load(args.controller)
    plant = cfg.plant
    report = {}
    verdicts = {}
    verdicts["condition1"] = check_condition1(cert, task, cfg.bnb)
    if isinstance(cert, FrwaCertificate):
        verdicts["condition2"] = check_condition2_filtered(cert, controller, plant, task, cfg.bnb)
    else:
        verdicts["condition2"] = check_condition2_plain(cert, controller, plant, task, cfg.bnb)
        verdicts["condition3"] = check_condition3(cert, task, cfg.bnb)
    if cfg.raw["check_direct_safety"]:
        verdicts["safety_direct"] = check_safety_direct(
            controller, plant, task.domain, task.layout, task.n_directions, cfg.bnb
        )
    for name, verdict in verdicts.items():
        print(f"{name}: {verdict.status.value}"
              + (f" at {verdict.counterexample.tolist()}" if verdict.is_counterexample else "")
              + (f" ({verdict.reason})" if verdict.reason else ""))
        report[name] = verdict_to_dict(verdict)
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2))
    return 0 if all(v.is_verified for v in verdicts.values()) else 1


def cmd_compose(args) -> int:
    cfg = load_config(args.config)
    if args.dry_run:
        print("config ok")
        return 0
    schedule = [float(a) for a in cfg.raw["schedule"]]
    if not schedule:
        raise SystemExit("compose needs a non-empty 'schedule' list in the config")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task, plant = cfg.task, cfg.plant
    specs = composition.docking_stage_specs(schedule, task)
    pi_sizes, v_sizes = cfg.architecture(task.dim, plant.control_dim)
    c1, c2 = cfg.clamps
    result = composition.train_crwa(
        specs,
        task,
        plant,
        cfg.train,
        cfg.bnb,
        float(cfg.raw["wall_budget_s"]),
        mode=cfg.mode,
        witness=cfg.witness,
        c1=c1,
        c2=c2,
        controller_init=cfg.raw["controller_init"],
        pi_sizes=pi_sizes,
        v_sizes=v_sizes,
    )
    write_stage_csv(out / "stages.csv", result, specs)
    for rec in result.records:
        write_iteration_csv(out / f"stage{rec.index}_iterations.csv", rec.cegis.records)
    if result.chain is not None:
        Path(out / "chain_bundle.json").write_text(json.dumps(composition.chain_to_dict(result.chain)))
    if result.complete:
        report = composition.validate_chain(result.chain, task, cfg.bnb)
        for check in report.checks:
            print(f"{'PASS' if check.passed else 'FAIL'} {check.name}"
                  + (f" ({check.detail})" if check.detail else ""))
        print(f"chain of {len(result.chain)} stages trained and validated: "
              f"{'ok' if report.passed else 'INVALID'}")
        return 0 if report.passed else 1
    print(f"stage {result.failed_stage} failed; partial chain written")
    return 1


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task, plant = cfg.task, cfg.plant
    sim = cfg.raw["simulate"]
    chain = None
    if args.chain:
        chain = composition.chain_from_dict(json.loads(Path(args.chain).read_text()))
        controller = None
    elif args.bundle:
        _, controller, task, _ = read_bundle(args.bundle)
    elif args.controller:
        controller = nn.load(args.controller)
    else:
        raise SystemExit("simulate needs --bundle, --controller, or --chain")

    start = sim.get("start")
    if start is None:
        start = geometry.sample_region(task.initial, task.domain, 1, int(sim["seed"]))[0]
    else:
        start = np.asarray(start, dtype=np.float64)
    if chain is not None:
        traj, stages = composition.simulate_meta(chain, start, task, plant, int(sim["max_steps"]))
        write_trajectory_csv(out / "trajectory.csv", traj, task, stages)
        meta_ctrl_stats = _chain_batch_stats(chain, task, plant, sim)
        write_stats_csv(out / "stats.csv", meta_ctrl_stats)
        print(f"single trajectory: {traj.outcome.value} in {traj.steps} steps")
        print(meta_ctrl_stats.as_dict())
        return 0
    traj = simulate(controller, start, task, plant, int(sim["max_steps"]))
    write_trajectory_csv(out / "trajectory.csv", traj, task)
    stats = simulate_batch(
        controller, task, plant, int(sim["trials"]), int(sim["max_steps"]), int(sim["seed"])
    )
    write_stats_csv(out / "stats.csv", stats)
    print(f"single trajectory: {traj.outcome.value} in {traj.steps} steps")
    print(stats.as_dict())
    return 0


def _chain_batch_stats(chain, task, plant, sim) -> dynamics.BatchStats:
    trials = int(sim["trials"])
    starts = geometry.sample_region(task.initial, task.domain, trials, int(sim["seed"]))
    outcomes = {"docked": 0, "unsafe": 0, "truncated": 0}
    dock_steps = []
    for s0 in starts:
        traj, _ = composition.simulate_meta(chain, s0, task, plant, int(sim["max_steps"]))
        outcomes[traj.outcome.value] += 1
        if traj.outcome is dynamics.Outcome.DOCKED:
            dock_steps.append(traj.steps)
    n_docked = outcomes["docked"]
    return dynamics.BatchStats(
        trials=trials,
        safety_success_pct=100.0 * (trials - outcomes["unsafe"]) / trials,
        docking_success_pct=100.0 * n_docked / trials,
        mean_docking_steps=float(np.mean(dock_steps)) if dock_steps else float("nan"),
        outcome_counts=outcomes,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rwacert",
        description="Train, verify, compose, and simulate reach-while-avoid certificates.",
    )
    parser.add_argument(
        "--print-defaults", action="store_true", help="print the default config as JSON and exit"
    )
    sub = parser.add_subparsers(dest="command")

    p_cegis = sub.add_parser("cegis", aliases=["train"], help="run the synthesis loop")
    p_cegis.add_argument("--config", default=None)
    p_cegis.add_argument("--out-dir", default="out")
    p_cegis.add_argument("--dry-run", action="store_true")
    p_cegis.set_defaults(func=cmd_cegis)

    p_verify = sub.add_parser("verify", help="check a certificate bundle")
    p_verify.add_argument("--bundle", required=True)
    p_verify.add_argument("--controller", default=None)
    p_verify.add_argument("--config", default=None)
    p_verify.add_argument("--report", default=None, help="write the verdict report JSON here")
    p_verify.set_defaults(func=cmd_verify)

    p_compose = sub.add_parser("compose", help="train a chained certificate from a schedule")
    p_compose.add_argument("--config", default=None)
    p_compose.add_argument("--out-dir", default="out")
    p_compose.add_argument("--dry-run", action="store_true")
    p_compose.set_defaults(func=cmd_compose)

    p_sim = sub.add_parser("simulate", help="roll out a controller or chain")
    p_sim.add_argument("--config", default=None)
    p_sim.add_argument("--bundle", default=None)
    p_sim.add_argument("--controller", default=None)
    p_sim.add_argument("--chain", default=None)
    p_sim.add_argument("--out-dir", default="out")
    p_sim.set_defaults(func=cmd_simulate)

    args = parser.parse_args(argv)
    if args.print_defaults:
        print(json.dumps(default_config(), indent=2))
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
