"""Command-line interface.

Exit status is 0 on success, 1 for invalid input (malformed files, bad
flags, failed preconditions) and 2 for numerical failures during fitting.
The thread count comes from the ``PEDRECON_THREADS`` environment variable.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .fitter import AdmissionFilter
from .optim import NonFiniteError

log = logging.getLogger("pedrecon")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _template(args):
    from .template import make_template

    return io.load_template(args.template) if args.template else make_template()


def _gmm(args):
    from .motion import default_prior

    return io.load_gmm(args.gmm) if args.gmm else default_prior()


def _manifest(args, command, config_text, inputs, outputs, started, out_dir=None):
    if out_dir is None:
        out_dir = Path(outputs[0]).parent
    m = io.RunManifest.build(command, config_text, inputs, outputs, getattr(args, "seed", None), started)
    io.save_manifest(out_dir / f"{command}.manifest.json", m)


def cmd_make_template(args, started):
    from .motion import default_prior
    from .template import HumanoidConfig, make_template

    cfg = io.load_humanoid_config(args.config) if args.config else HumanoidConfig()
    if args.resolution is not None:
        cfg = HumanoidConfig(**{**cfg.__dict__, "resolution": args.resolution})
    out = Path(args.out)
    io.save_template(out, make_template(cfg))
    outputs = [out]
    if args.gmm_out:
        io.save_gmm(args.gmm_out, default_prior(seed=args.seed))
        outputs.append(Path(args.gmm_out))
    _manifest(args, "make-template", io.dumps("humanoid_config", dict(cfg.__dict__)), [], outputs, started)
    print(f"wrote {out}")


def cmd_synth(args, started):
    from .simulate import SynthConfig, synth_ground_truth

    cfg = io.load_synth_config(args.config) if args.config else SynthConfig()
    overrides = {}
    if args.pixel_noise is not None:
        overrides["pixel_noise"] = args.pixel_noise
    if args.yaw is not None:
        overrides["yaw"] = args.yaw
    if overrides:
        cfg = SynthConfig(**{**cfg.__dict__, **overrides})
    template = _template(args)
    obs, truth = synth_ground_truth(template, args.seed, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_observations(out / "observations.json", obs)
    io.save_truth(out / "truth.json", truth.params, truth.heading)
    inputs = [args.template] if args.template else []
    outputs = [out / "observations.json", out / "truth.json"]
    _manifest(args, "synth", io.dumps("synth_config", dict(cfg.__dict__)), inputs, outputs, started)
    counts = [len(o.scan.target_points) for o in obs]
    print(f"wrote {len(obs)} frames to {out} (points per frame {min(counts)}-{max(counts)})")


def cmd_fit(args, started):
    from .fitter import FitConfig, fit_sequence

    cfg = io.load_fit_config(args.config) if args.config else FitConfig()
    obs = io.load_observations(args.observations)
    template = _template(args)
    result = fit_sequence(obs, template, _gmm(args), cfg)
    out = Path(args.out)
    io.save_fit_result(out, result)
    inputs = [args.observations] + [p for p in (args.template, args.gmm, args.config) if p]
    _manifest(args, "fit", io.dumps("fit_config", io.fit_config_body(cfg)), inputs, [out], started)
    print(
        f"yaw {result.yaw:.4f}  energy {result.initial_energy:.6g} -> {result.final_energy:.6g}  "
        f"iterations {result.traces['pose'].iterations}+{result.traces['shape'].iterations}"
    )


def cmd_metrics(args, started):
    from .fitter import metrics, posed_result

    template = _template(args)
    result = io.load_fit_result(args.result)
    truth, _ = io.load_truth(args.truth)
    pv, pj = posed_result(template, result.params)
    gv, gj = posed_result(template, truth)
    m = metrics(pv, gv, pj, gj)
    for k in ("PVE", "MPJPE", "CD"):
        print(f"{k} {m[k]:.4f} cm")


def cmd_bank_add(args, started):
    from .energy import SequenceEnergy
    from .fitter import admit
    from .retarget import AssetSequence, clip_cycle

    template = _template(args)
    obs = io.load_observations(args.observations)
    result = io.load_fit_result(args.result)
    cfg = io.load_fit_config(args.config) if args.config else None
    problem = SequenceEnergy(template, obs, _gmm(args), cfg.weights if cfg else None)
    per_frame = problem.evaluate(result.params).per_frame
    flt = AdmissionFilter(
        min_points=args.min_points,
        min_frames=args.min_frames,
        max_e_sim=args.max_e_sim,
        max_e_joint=args.max_e_joint,
        max_e_other=args.max_e_other,
    )
    ok, report = admit(obs, per_frame, flt)
    if not ok:
        raise UsageError(f"sequence rejected by the admission filter: {report}")
    p = result.params
    asset = AssetSequence(
        args.id,
        result.shape,
        p.rotations,
        p.offsets,
        np.array([o.timestamp for o in obs]),
        False,
        args.template or "default",
        {"admission": report},
    )
    asset = clip_cycle(asset, args.tau, args.min_len, template.root)
    bank = Path(args.bank)
    bank.mkdir(parents=True, exist_ok=True)
    out = bank / f"{args.id}.json"
    io.save_asset(out, asset)
    _manifest(args, "bank-add", "", [args.result, args.observations], [out], started)
    print(f"added {args.id} ({len(asset.timestamps)} frames, cycle {asset.duration:.3f} s)")


def cmd_retarget(args, started):
    from .retarget import retarget_sequence, retrieve

    bank = io.load_bank(args.bank)
    query = io.load_query(args.query)
    asset = bank[args.asset] if args.asset else retrieve(bank, query)
    traj = retarget_sequence(asset, query)
    out = Path(args.out)
    io.save_trajectory(out, traj)
    _manifest(args, "retarget", "", [args.query], [out], started)
    print(f"retargeted asset {asset.asset_id} onto {len(query.timestamps)} waypoints")


def cmd_simulate(args, started):
    from .retarget import retarget_sequence, retrieve
    from .simulate import Actor, Obstacle, Scene, simulate

    template = _template(args)
    script = io.load_scenario(args.scenario)
    bank = io.load_bank(args.bank) if args.bank else None
    actors = []
    for spec in script.actors:
        if bank is None:
            raise UsageError("scenario has actors but no --bank was given")
        try:
            asset = bank[spec.asset] if spec.asset else retrieve(bank, spec.query)
        except KeyError:
            raise UsageError(f"actor {spec.name!r}: asset {spec.asset!r} not in the bank") from None
        traj = retarget_sequence(asset, spec.query, template.root)
        actors.append(Actor(spec.name, template, traj.shape, traj.timestamps, traj.rotations, traj.offsets))
    obstacles = [Obstacle(o.name, o.vertices, o.faces) for o in script.obstacles]
    scene = Scene(actors, obstacles, script.sensor, script.sweep_times)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    names = [a.name for a in actors]
    for i, sweep in enumerate(simulate(scene)):
        path = out / f"sweep_{i:04d}.json"
        io.write(path, "sweep", io.sweep_body(sweep, scene.sensor, names, script.labels))
        outputs.append(path)
    _manifest(args, "simulate", "", [args.scenario], outputs, started, out)
    print(f"wrote {len(outputs)} sweeps to {out}")


def cmd_gradcheck(args, started):
    from .gradcheck import run_gradcheck

    report = run_gradcheck(args.seed, args.trials)
    for term, err in report.max_rel_error.items():
        print(f"{term:6s} max rel. error {err:.3e}")
    print(f"{report.trials} trials in {report.seconds:.1f} s")
    if not report.passed(args.tol):
        raise FloatingPointError(f"gradient check exceeded {args.tol}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pedrecon", description="Pedestrian reconstruction, retargeting and LiDAR simulation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=False, template=True, gmm=False, config=False):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if template:
            sp.add_argument("--template", help="template file (default: built-in humanoid)")
        if gmm:
            sp.add_argument("--gmm", help="pose prior file (default: built-in prior)")
        if config:
            sp.add_argument("--config")

    s = sub.add_parser("make-template", help="write the built-in humanoid template")
    s.add_argument("--out", required=True)
    s.add_argument("--resolution", type=float)
    s.add_argument("--gmm-out", help="also write the default pose prior")
    common(s, seed=True, template=False, config=True)
    s.set_defaults(func=cmd_make_template)

    s = sub.add_parser("synth", help="generate a synthetic observed sequence with ground truth")
    s.add_argument("--out", required=True)
    s.add_argument("--pixel-noise", type=float)
    s.add_argument("--yaw", type=float)
    common(s, seed=True, config=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", help="fit pose and shape to an observation sequence")
    s.add_argument("observations")
    s.add_argument("--out", required=True)
    common(s, seed=True, gmm=True, config=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("metrics", help="PVE, MPJPE and CD of a fit against ground truth")
    s.add_argument("result")
    s.add_argument("truth")
    common(s)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("bank-add", help="admit a fitted sequence to the asset bank")
    s.add_argument("result")
    s.add_argument("--observations", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--tau", type=float, default=0.15)
    s.add_argument("--min-len", type=float, default=0.75)
    d = AdmissionFilter()
    s.add_argument("--min-points", type=int, default=d.min_points)
    s.add_argument("--min-frames", type=int, default=d.min_frames)
    s.add_argument("--max-e-sim", type=float, default=d.max_e_sim)
    s.add_argument("--max-e-joint", type=float, default=d.max_e_joint)
    s.add_argument("--max-e-other", type=float, default=d.max_e_other)
    common(s, gmm=True, config=True)
    s.set_defaults(func=cmd_bank_add)

    s = sub.add_parser("retarget", help="retarget a bank asset onto a query trajectory")
    s.add_argument("query")
    s.add_argument("--bank", required=True)
    s.add_argument("--asset", help="asset id (default: retrieve by speed)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_retarget)

    s = sub.add_parser("simulate", help="render LiDAR sweeps of a scenario")
    s.add_argument("scenario")
    s.add_argument("--bank")
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("gradcheck", help="finite-difference check of all energy gradients")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-4)
    common(s, seed=True, template=False)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _threads():
    n = os.environ.get("PEDRECON_THREADS")
    if n:
        import torch

        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise UsageError(f"PEDRECON_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        _threads()
        args.func(args, time.time())
    except (NonFiniteError, FloatingPointError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
