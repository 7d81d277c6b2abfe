"""End-to-end experiment pipelines.

Subcommands: phantom, simulate, reconstruct, compare, wrong-motion.
Each is deterministic given (config, seed).  Motion-aware reconstruction
consumes only the list-mode file; classical reconstructions consume only
binned sinograms.  Errors exit nonzero with a JSON payload on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import (
    DensityImage,
    GridGeometry,
    kl_images,
    load_image,
    make_derenzo,
    save_image,
    save_pgm,
)
from .motion import (
    MassPreservingDiffeoMotion,
    MotionModel,
    StaticMotion,
    VelocityField,
    model_from_descriptor,
    save_velocity,
)
from .projector import ProjectorConfig, Sinogram, StripProjector, load_sinogram, save_sinogram, sinogram_to_csv
from .recon import (
    classical_mlem_step,
    default_mu0,
    event_kernels,
    gated_mlem_step,
    gated_operators,
    mlem_run,
    sensitivity,
)
from .simulate import aggregate, load_listmode, save_listmode, simulate_listmode

PROFILES = {
    "fast": {"nx": 64, "ny": 64, "n_angles": 30, "n_tangential": 32},
    "paper": {"nx": 128, "ny": 128, "n_angles": 45, "n_tangential": 64},
}

FRAME_TIMES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
WRONG_MOTION_DELTAS = (0.0, 0.05, 0.1, 0.2)


@dataclass
class ExperimentConfig:
    geom: GridGeometry
    proj_config: ProjectorConfig
    motion_descriptor: dict
    dose: float
    seed: int
    iterations: int
    time_samples: int
    c_floor_rel: float
    memory_budget_bytes: int
    mu0: str
    windows: dict
    out: Path
    scenario: str

    @property
    def partial_window(self) -> tuple[float, float] | None:
        w = self.windows.get("partial")
        return (float(w[0]), float(w[1])) if w else None


def default_swirl_field(geom: GridGeometry, omega: float = 1.2, sigma: float = 7.0) -> VelocityField:
    """Differential rotation concentrated near the center of the FOV.

    The field is tangential, so trajectories preserve radius and the
    deformed support never grows; the angular rate falls off with a
    Gaussian envelope, shearing the phantom visibly in the middle while
    leaving its rim almost still.
    """
    X, Y = geom.centers()
    env = omega * np.exp(-(X**2 + Y**2) / (2.0 * sigma * sigma))
    return VelocityField(geom, -env * Y, env * X)


def perturbation_field(geom: GridGeometry) -> VelocityField:
    """Fixed smooth unit-sup-norm field used to corrupt a motion model."""
    X, Y = geom.centers()
    env = np.exp(-((X - 5.0) ** 2 + (Y - 3.0) ** 2) / (2.0 * 36.0))
    px = -env * (Y - 3.0)
    py = env * (X - 5.0)
    sup = float(np.sqrt(px**2 + py**2).max())
    return VelocityField(geom, px / sup, py / sup)


def _scenario_motion(scenario: str, geom: GridGeometry, out: Path, steps: int = 32) -> dict:
    if scenario == "static":
        return {"type": "static"}
    if scenario == "translation":
        return {"type": "translation", "a": 40.0 / 3.0, "b": -10.0, "stop": 0.75}
    if scenario == "diffeo":
        vel = default_swirl_field(geom)
        out.mkdir(parents=True, exist_ok=True)
        save_velocity(vel, out / "velocity.f32")
        return {"type": "diffeo", "velocity_file": "velocity.f32", "steps": steps}
    raise ValueError(f"unknown scenario {scenario!r}")


def _default_windows(scenario: str) -> dict:
    if scenario == "translation":
        return {"full": [0.0, 1.0], "partial": [0.75, 1.0]}
    if scenario == "diffeo":
        return {"full": [0.0, 1.0], "partial": [0.0, 0.25]}
    return {"full": [0.0, 1.0]}


def load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        raw["out"] = args.out
    if getattr(args, "profile", None) is not None:
        raw["profile"] = args.profile
    if getattr(args, "scenario", None) is not None:
        raw["scenario"] = args.scenario
    profile = raw.get("profile", "fast")
    base = dict(PROFILES[profile])
    gspec = raw.get("geometry", {})
    nx = int(gspec.get("nx", base["nx"]))
    ny = int(gspec.get("ny", base["ny"]))
    extent = tuple(gspec.get("extent", (-20.0, 20.0, -20.0, 20.0)))
    geom = GridGeometry(nx, ny, extent)
    pspec = raw.get("projector", {})
    proj_config = ProjectorConfig(
        int(pspec.get("n_angles", base["n_angles"])),
        int(pspec.get("n_tangential", base["n_tangential"])),
        pspec.get("fov_radius"),
    )
    out = Path(raw.get("out", "motionpet_out"))
    scenario = raw.get("scenario", "static")
    motion = raw.get("motion")
    if motion is None:
        motion = _scenario_motion(scenario, geom, out)
    windows = raw.get("windows") or _default_windows(scenario)
    return ExperimentConfig(
        geom=geom,
        proj_config=proj_config,
        motion_descriptor=motion,
        dose=float(raw.get("dose", 10.0)),
        seed=int(raw.get("seed", 0)),
        iterations=int(raw.get("iterations", 10)),
        time_samples=int(raw.get("time_samples", 64)),
        c_floor_rel=float(raw.get("c_floor_rel", 1e-6)),
        memory_budget_bytes=int(raw.get("memory_budget_bytes", 2 << 30)),
        mu0=raw.get("mu0", "uniform"),
        windows=windows,
        out=out,
        scenario=scenario,
    )


def _build(cfg: ExperimentConfig):
    proj = StripProjector(cfg.geom, cfg.proj_config)
    model = model_from_descriptor(cfg.motion_descriptor, base_dir=cfg.out)
    mu_r = make_derenzo(cfg.geom, cfg.dose)
    return proj, model, mu_r


def _write_motion(cfg: ExperimentConfig):
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "motion.json").write_text(json.dumps(cfg.motion_descriptor, indent=1) + "\n")


def relative_l2(recon: DensityImage, truth: DensityImage) -> float:
    diff = recon.values - truth.values
    denom = float(np.linalg.norm(truth.values.ravel()))
    return float(np.linalg.norm(diff.ravel())) / denom if denom > 0 else math.inf


def cmd_phantom(cfg: ExperimentConfig) -> dict:
    proj, model, mu_r = _build(cfg)
    _write_motion(cfg)
    save_image(mu_r, cfg.out / "mu_r.f32")
    save_pgm(mu_r, cfg.out / "mu_r.pgm")
    frames = []
    for t in FRAME_TIMES:
        frame = model.push_forward(t, mu_r)
        name = f"frame_{t:.1f}"
        save_image(frame, cfg.out / f"{name}.f32")
        save_pgm(frame, cfg.out / f"{name}.pgm")
        frames.append({"t": t, "file": f"{name}.f32", "total_mass": frame.total_mass})
    return {"phantom": "mu_r.f32", "total_mass": mu_r.total_mass, "frames": frames}


def cmd_simulate(cfg: ExperimentConfig) -> dict:
    proj, model, mu_r = _build(cfg)
    _write_motion(cfg)
    data = simulate_listmode(mu_r, model, proj, cfg.seed)
    save_listmode(data, cfg.out / "listmode.csv", seed=cfg.seed, model_descriptor=cfg.motion_descriptor)
    full = cfg.windows.get("full", [0.0, 1.0])
    sino_full = aggregate(data, float(full[0]), float(full[1]))
    save_sinogram(sino_full, cfg.out / "sino_full.f32")
    sinogram_to_csv(sino_full, cfg.out / "sino_full.csv")
    written = {"listmode": "listmode.csv", "sino_full": "sino_full.f32", "n": data.n}
    pw = cfg.partial_window
    if pw is not None:
        sino_partial = aggregate(data, pw[0], pw[1])
        save_sinogram(sino_partial, cfg.out / "sino_partial.f32")
        written["sino_partial"] = "sino_partial.f32"
    if cfg.motion_descriptor.get("type") == "gated":
        times = cfg.motion_descriptor["times"]
        for s in range(len(times) - 1):
            t1, t2 = float(times[s]), float(times[s + 1])
            save_sinogram(aggregate(data, t1, t2), cfg.out / f"sino_gate_{s}.f32")
        written["gates"] = len(times) - 1
    # fictitious static acquisition of the same phantom for the same time
    static_data = simulate_listmode(mu_r, StaticMotion(), proj, cfg.seed)
    save_sinogram(aggregate(static_data, 0.0, 1.0), cfg.out / "sino_static.f32")
    written["sino_static"] = "sino_static.f32"
    save_image(mu_r, cfg.out / "mu_r.f32")
    return written


def _mu0_for(cfg: ExperimentConfig, f) -> DensityImage | None:
    if cfg.mu0 == "uniform":
        return None
    return load_image(cfg.out / cfg.mu0)


def _write_diagnostics(path: Path, state) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "loss", "mass", "surrogate_gap", "min_grad", "supp_grad_max"])
        for k in range(len(state.loss_history)):
            gap = state.gap_history[k - 1] if k >= 1 and state.gap_history else ""
            kkt = state.kkt_history[k - 1] if k >= 1 and state.kkt_history else ("", "")
            writer.writerow([k, repr(state.loss_history[k]), repr(state.mass_history[k]), gap, kkt[0], kkt[1]])


def _classical_iterates(mu0: DensityImage, y: Sinogram, proj: StripProjector, iterations: int, c_floor_rel: float):
    mu = mu0
    for _ in range(iterations):
        mu = classical_mlem_step(mu, y, proj, c_floor_rel=c_floor_rel)
    return mu


def _classical_mu0(proj: StripProjector, y_total: float, c_floor_rel: float) -> DensityImage:
    f_static = sensitivity(StaticMotion(), proj, c_floor_rel=c_floor_rel)
    return default_mu0(f_static, int(round(y_total)))


def cmd_reconstruct(cfg: ExperimentConfig, method: str) -> dict:
    proj, model, mu_r = _build(cfg)
    if method == "motion":
        data, _ = load_listmode(cfg.out / "listmode.csv")
        f = sensitivity(model, proj, cfg.time_samples, cfg.c_floor_rel)
        kernels = event_kernels(data, model, proj, cfg.memory_budget_bytes)
        state = mlem_run(_mu0_for(cfg, f), f, kernels, cfg.iterations, diagnostics=True)
        recon = state.mu
        _write_diagnostics(cfg.out / "diagnostics_motion.csv", state)
    elif method in ("classical-static", "classical-aggregated", "classical-partial"):
        sino_name = {
            "classical-static": "sino_static.f32",
            "classical-aggregated": "sino_full.f32",
            "classical-partial": "sino_partial.f32",
        }[method]
        y = load_sinogram(cfg.out / sino_name)
        mu = _classical_mu0(proj, y.total, cfg.c_floor_rel)
        mu = _classical_iterates(mu, y, proj, cfg.iterations, cfg.c_floor_rel)
        if method == "classical-partial":
            pw = cfg.partial_window
            if pw is None:
                raise ValueError("no partial window configured")
            scale = 1.0 / (pw[1] - pw[0])
            mu = DensityImage(mu.geom, mu.values * scale)
        recon = mu
    elif method == "gated":
        if cfg.motion_descriptor.get("type") != "gated":
            raise ValueError("gated reconstruction needs a gated motion descriptor")
        times = cfg.motion_descriptor["times"]
        counts = [load_sinogram(cfg.out / f"sino_gate_{s}.f32") for s in range(len(times) - 1)]
        f = sensitivity(model, proj, cfg.time_samples, cfg.c_floor_rel)
        n = int(sum(c.total for c in counts))
        mu = default_mu0(f, n)
        ops = gated_operators(model, proj)
        for _ in range(cfg.iterations):
            mu = gated_mlem_step(mu, counts, model, proj, operators=ops, c_floor_rel=cfg.c_floor_rel)
        recon = mu
    else:
        raise ValueError(f"unknown reconstruction method {method!r}")
    stem = f"recon_{method.replace('-', '_')}"
    save_image(recon, cfg.out / f"{stem}.f32")
    save_pgm(recon, cfg.out / f"{stem}.pgm")
    return {"method": method, "image": f"{stem}.f32"}


def _truth_for(method: str, cfg: ExperimentConfig, model: MotionModel, mu_r: DensityImage) -> DensityImage:
    if method in ("motion", "classical-static", "gated"):
        return mu_r
    if method == "classical-aggregated":
        return model.push_forward(float(cfg.windows.get("full", [0, 1])[1]), mu_r)
    if method == "classical-partial":
        pw = cfg.partial_window
        return model.push_forward(pw[1], mu_r)
    raise ValueError(method)


def cmd_compare(cfg: ExperimentConfig) -> dict:
    proj, model, mu_r = _build(cfg)
    rows = []
    for method in ("motion", "classical-static", "classical-aggregated", "classical-partial", "gated"):
        stem = f"recon_{method.replace('-', '_')}"
        path = cfg.out / f"{stem}.f32"
        if not path.exists():
            continue
        recon = load_image(path)
        truth = _truth_for(method, cfg, model, mu_r)
        rows.append(
            {
                "method": method,
                "rel_l2": relative_l2(recon, truth),
                "kl_to_truth": kl_images(truth, recon) if np.all(recon.values[truth.values > 0] > 0) else math.inf,
            }
        )
    with open(cfg.out / "compare.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "rel_l2", "kl_to_truth"])
        writer.writeheader()
        writer.writerows(rows)
    return {"metrics": rows}


def cmd_wrong_motion(cfg: ExperimentConfig, deltas=WRONG_MOTION_DELTAS) -> dict:
    proj, model, mu_r = _build(cfg)
    if not isinstance(model, MassPreservingDiffeoMotion):
        raise ValueError("wrong-motion experiments need a diffeo scenario")
    data, _ = load_listmode(cfg.out / "listmode.csv")
    pert = perturbation_field(cfg.geom)
    vnorm = model.velocity.sup_norm()
    results = []
    for delta in deltas:
        if delta == 0.0:
            wrong = model
        else:
            vel = VelocityField(
                cfg.geom,
                model.velocity.vx + delta * vnorm * pert.vx,
                model.velocity.vy + delta * vnorm * pert.vy,
            )
            wrong = MassPreservingDiffeoMotion(vel, flow_steps=model.flow_steps)
        f = sensitivity(wrong, proj, cfg.time_samples, cfg.c_floor_rel)
        kernels = event_kernels(data, wrong, proj, cfg.memory_budget_bytes)
        state = mlem_run(None, f, kernels, cfg.iterations)
        err = relative_l2(state.mu, mu_r)
        stem = f"recon_wrong_{delta:g}"
        save_image(state.mu, cfg.out / f"{stem}.f32")
        save_pgm(state.mu, cfg.out / f"{stem}.pgm")
        results.append({"delta": delta, "rel_l2": err, "image": f"{stem}.f32"})
    (cfg.out / "wrong_motion.json").write_text(json.dumps(results, indent=1) + "\n")
    return {"sweep": results}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="motionpet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None)
    common.add_argument("--profile", choices=sorted(PROFILES), default=None)
    common.add_argument("--scenario", choices=["static", "translation", "diffeo"], default=None)
    sub.add_parser("phantom", parents=[common])
    sub.add_parser("simulate", parents=[common])
    p_rec = sub.add_parser("reconstruct", parents=[common])
    p_rec.add_argument(
        "--method",
        required=True,
        choices=["motion", "classical-static", "classical-aggregated", "classical-partial", "gated"],
    )
    sub.add_parser("compare", parents=[common])
    p_wm = sub.add_parser("wrong-motion", parents=[common])
    p_wm.add_argument("--deltas", type=float, nargs="*", default=list(WRONG_MOTION_DELTAS))
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "phantom":
            result = cmd_phantom(cfg)
        elif args.command == "simulate":
            result = cmd_simulate(cfg)
        elif args.command == "reconstruct":
            result = cmd_reconstruct(cfg, args.method)
        elif args.command == "compare":
            result = cmd_compare(cfg)
        elif args.command == "wrong-motion":
            result = cmd_wrong_motion(cfg, tuple(args.deltas))
        else:  # pragma: no cover
            raise ValueError(f"unknown command {args.command!r}")
        json.dump(result, sys.stdout, indent=1)
        sys.stdout.write("\n")
        return 0
    except Exception as exc:  # deliberate: machine-readable failure channel
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
