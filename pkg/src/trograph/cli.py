"""Command-line entry point: ``trograph <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import se3
from .bench import SUITES, run_bench
from .config import ConfigError, RunConfig, default_t_star, load_config
from .denoiser import (
    DenoiserConfig,
    DenoiserModel,
    TrainConfig,
    load_checkpoint,
    oracle_denoiser,
    save_checkpoint,
    smooth,
    train,
)
from .diffusion import GuidanceSpec, linear_schedule, snap_to_grid
from .harness import ClosedLoopScenario, run_closed_loop, write_report
from .iksolver import IkProblem, batch_solve, thread_cap
from .kinematics import KinematicHand, embodiment_similarity, load_hand, save_hand
from .pipeline import demo_graph, grasp_record, sample_grasp, solve_graph_ik
from .pointcloud import encode_object, load_xyz
from .synthdata import FAMILIES, PrimitiveObject, generate_demos, make_hand, random_object, read_dataset, write_dataset
from .trograph import TroGraph, build_link_nodes, graph_from_grasp, hand_link_nodes, link_geometry, serialize_graph

log = logging.getLogger("trograph")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class InvalidInput(ValueError):
    pass


# -- helpers -----------------------------------------------------------------


def _configure_threads() -> None:
    torch.set_num_threads(thread_cap())


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InvalidInput(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: invalid JSON ({exc})") from exc


def _write_json(path, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **doc}, indent=2, sort_keys=True) + "\n")


def _hand(path) -> KinematicHand:
    p = Path(path)
    if not (p / "hand.urdf").exists():
        raise InvalidInput(f"{p} is not a hand directory (missing hand.urdf)")
    return load_hand(p)


def _object(path):
    """Cloud plus the primitive description from a ``<stem>.json`` sidecar, if any."""
    p = Path(path)
    if not p.exists():
        raise InvalidInput(f"object file not found: {p}")
    cloud = load_xyz(p)
    meta = p.with_suffix(".json")
    prim = PrimitiveObject.from_dict(json.loads(meta.read_text())) if meta.exists() else None
    return cloud, prim


def _grasp(path, hand: KinematicHand):
    doc = _read_json(path)
    try:
        q = np.asarray(doc["q"], dtype=float)
        base = np.asarray(doc.get("base", np.eye(4)), dtype=float)
    except KeyError as exc:
        raise InvalidInput(f"{path}: grasp needs key {exc}") from exc
    if q.shape != (hand.dof,) or base.shape != (4, 4):
        raise InvalidInput(f"{path}: q must have {hand.dof} entries and base must be 4x4")
    return q, base


def _schedule(cfg: RunConfig, lam: float | None = None):
    s = cfg.schedule
    return linear_schedule(s.T, s.beta_min, s.beta_max, s.M, s.lam if lam is None else lam)


def _denoiser(args, cfg: RunConfig):
    """Model from ``--checkpoint`` (with its graph sizes) or None for oracle mode."""
    if getattr(args, "oracle", False):
        return None, cfg.graph.P, cfg.graph.L_pad
    if not getattr(args, "checkpoint", None):
        raise InvalidInput("pass either --checkpoint or --oracle")

    path = Path(args.checkpoint)
    if not path.exists() or not Path(str(path) + ".json").exists():
        raise InvalidInput(f"checkpoint or its sidecar not found: {path}")
    model, _, sidecar = load_checkpoint(path)
    extra = sidecar.get("extra", {})
    return model, int(extra.get("P", cfg.graph.P)), int(extra.get("L_pad", cfg.graph.L_pad))


# -- commands ----------------------------------------------------------------


def cmd_init_config(args, cfg: RunConfig) -> int:
    cfg.save(args.out)
    return EXIT_OK


def cmd_gen_hand(args, cfg: RunConfig) -> int:
    hand = make_hand(args.template, args.scale, args.seed)
    save_hand(hand, Path(args.out))
    print(str(args.out))
    return EXIT_OK


def cmd_gen_data(args, cfg: RunConfig) -> int:
    hand = make_hand(args.template, args.scale, args.seed)
    rng = np.random.default_rng(args.seed)
    objects, demos, skipped = [], [], 0
    for i in range(args.n_objects):
        family = FAMILIES[i % len(FAMILIES)]
        obj = random_object(family, rng, name=f"obj{i:03d}_{family}")
        found, sk = generate_demos(hand, obj, args.demos_per_object, seed=int(rng.integers(2**31)), cone_deg=args.cone_deg, spin_deg=args.spin_deg)
        skipped += sk
        if not found:
            log.warning("object %s: no reachable grasp, skipped", obj.name)
            continue
        if len(found) < args.demos_per_object:
            log.warning("object %s: %d of %d demos reachable", obj.name, len(found), args.demos_per_object)
        objects.append(obj)
        demos.extend(found)
    write_dataset(args.out, hand, objects, demos, n_points=cfg.graph.n_points)
    print(json.dumps({"objects": len(objects), "demos": len(demos), "skipped_attempts": skipped}, sort_keys=True))
    return EXIT_OK


def cmd_build_graph(args, cfg: RunConfig) -> int:
    hand = _hand(args.hand)
    if hand.palm_link is None:
        log.warning("hand %s has no palm_link configured; pose/contact guidance will be unavailable", hand.name)
    cloud, _ = _object(args.object)
    nodes = encode_object(cloud, cfg.graph.P, seed=args.seed)
    if args.grasp:
        q, base = _grasp(args.grasp, hand)
        g = graph_from_grasp(nodes, hand, q, base, cfg.graph.L_pad, seed=args.seed)
    else:
        doc = _read_json(args.poses)
        arr = np.asarray(doc.get("poses", doc.get("transforms")), dtype=float)
        geom = link_geometry(hand, cfg.graph.L_pad)
        if arr.ndim == 3:
            links = build_link_nodes(geom, transforms=arr, link_names=hand.link_names)
        else:
            if arr.shape != (hand.L, 6):
                raise InvalidInput(f"poses must have shape ({hand.L}, 6)")
            padded = np.zeros((cfg.graph.L_pad, 6))
            padded[: hand.L] = arr
            links = build_link_nodes(geom, poses=padded)
        g = TroGraph(nodes, links, {"hand_name": hand.name, "P": nodes.P, "L_pad": cfg.graph.L_pad, "seed": args.seed})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(serialize_graph(g))
    return EXIT_OK


def _guidance(args, cfg: RunConfig, hand: KinematicHand, schedule, template):
    """(guidance spec, initial-status graph or None) from the guide flags."""
    t_star = args.t_star if args.t_star is not None else cfg.guidance.t_star
    if t_star is not None:
        snapped = snap_to_grid(t_star, schedule)
        if snapped != t_star:
            print(f"notice: t-star {t_star} snapped to grid step {snapped}", file=sys.stderr)
        t_star = snapped
    if args.guide_pose:
        if hand.palm_link is None:
            raise InvalidInput("pose guidance needs palm_link in the hand config")
        doc = _read_json(args.guide_pose)
        init = None
        if "q" in doc:
            q, base = _grasp(args.guide_pose, hand)
            links = hand_link_nodes(hand, q, base, template.L_pad)
            init = TroGraph(template.object_nodes, links, dict(template.meta))
        if "r_init" in doc:
            r_init = np.asarray(doc["r_init"], dtype=float)
        elif init is not None:
            r_init = se3.so3_exp(init.poses[hand.palm_index, 3:])
        else:
            raise InvalidInput("pose guidance file needs r_init or an initial grasp (q, base)")
        if init is not None and t_star is None:
            t_star = default_t_star(schedule.T, schedule.M)
        spec = GuidanceSpec("pose", hand.palm_index, r_init=r_init, t_star=t_star if init is not None else None, strength=cfg.guidance.strength)
        return spec, init
    if args.guide_contact:
        if hand.palm_link is None:
            raise InvalidInput("contact guidance needs palm_link in the hand config")
        doc = _read_json(args.guide_contact)
        try:
            spec = GuidanceSpec(
                "contact", hand.palm_index, strength=cfg.guidance.strength,
                contact_points=np.asarray(doc["points"], dtype=float), heat=np.asarray(doc["heat"], dtype=float),
                r_cont=np.asarray(doc["r_cont"], dtype=float),
            )
        except KeyError as exc:
            raise InvalidInput(f"contact file needs key {exc}") from exc
        return spec, None
    return None, None


def cmd_sample(args, cfg: RunConfig) -> int:
    if args.n < 1:
        raise InvalidInput("--n must be >= 1")
    hand = _hand(args.hand)
    cloud, prim = _object(args.object)
    model, P, L_pad = _denoiser(args, cfg)
    oracle = model is None
    schedule = _schedule(cfg, lam=0.0 if oracle else None)
    nodes = encode_object(cloud, P, seed=args.seed)
    meta = {"hand_name": hand.name, "P": P, "L_pad": L_pad, "seed": args.seed}
    if oracle:
        if not args.grasp:
            raise InvalidInput("--oracle needs --grasp with the reference grasp")
        q, base = _grasp(args.grasp, hand)
        template = graph_from_grasp(nodes, hand, q, base, L_pad, seed=args.seed)
        denoiser = oracle_denoiser(template.poses, schedule)
    else:
        geom = link_geometry(hand, L_pad)
        template = TroGraph(nodes, build_link_nodes(geom, poses=np.zeros((L_pad, 6))), meta)
        denoiser = model
    guidance, init = _guidance(args, cfg, hand, schedule, template)
    records, timings = [], []
    for i in range(args.n):
        t0 = time.perf_counter()
        rng = np.random.default_rng([args.seed, i])
        g = sample_grasp(template, schedule, denoiser, rng, guidance, init)
        sol = solve_graph_ik(hand, g, seed=args.seed + i)
        records.append(grasp_record(hand, g, sol, prim))
        timings.append(time.perf_counter() - t0)
        log.info("grasp %d: %.3f s", i, timings[-1])
    print(f"sampled {args.n} grasps, mean {np.mean(timings):.3f} s per grasp", file=sys.stderr)
    _write_json(args.out, {"hand": hand.name, "mode": "oracle" if oracle else "checkpoint", "seed": args.seed, "grasps": records})
    if args.timing:
        _write_json(args.timing, {"seconds_per_grasp": timings})
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    root = Path(args.dataset)
    try:
        ds = read_dataset(root)
    except FileNotFoundError as exc:
        raise InvalidInput(str(exc)) from exc
    if not ds.demos:
        raise InvalidInput(f"{root}: dataset has no demos")
    P, L_pad = cfg.graph.P, cfg.graph.L_pad
    graphs = []
    for demo in ds.demos:
        if demo.hand not in ds.hands:
            raise InvalidInput(f"demo references unknown hand {demo.hand!r}")
        hand = ds.hands[demo.hand]
        cloud = ds.objects[demo.object.name][1] if demo.object.name in ds.objects else None
        graphs.append(demo_graph(hand, demo, P, L_pad, link_geometry(hand, L_pad), cfg.graph.n_points, cloud=cloud))
    tc = cfg.training
    train_cfg = TrainConfig(tc.gamma_p, tc.gamma_r, tc.epochs, tc.batch_size, tc.lr, tc.lr_decay, tc.lr_decay_every, seed=args.seed, max_steps=tc.max_steps)
    if args.resume:
        model, state, _ = load_checkpoint(args.resume)
    else:
        m = cfg.model
        model, state = DenoiserModel(DenoiserConfig(m.d, m.n_layers, m.ff_mult, cfg.schedule.T, seed=args.seed, length_unit=m.length_unit)), None
    schedule = _schedule(cfg)
    out = Path(args.out_checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace = Path(str(out) + ".loss.csv")
    extra = {"P": P, "L_pad": L_pad, "schedule": vars(cfg.schedule)}
    try:
        result = train(model, graphs, schedule, train_cfg, state)
    except Exception as exc:
        losses = getattr(exc, "losses", None)
        if losses is not None:
            _write_trace(trace, losses, [train_cfg.lr] * len(losses), 0)
        raise
    start = result.state.step - len(result.losses)
    _write_trace(trace, result.losses, result.lrs, start)
    save_checkpoint(out, result.model, result.state, train_cfg, extra)
    sm = smooth(result.losses) if result.losses else np.zeros(1)
    print(json.dumps({"steps": result.state.step, "final_smoothed_loss": float(sm[-1])}, sort_keys=True))
    return EXIT_OK


def _write_trace(path: Path, losses, lrs, start: int) -> None:
    sm = smooth(losses) if len(losses) else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "loss", "smoothed", "lr"))
        for k, (lv, s, lr) in enumerate(zip(losses, sm, lrs)):
            w.writerow([start + k + 1, repr(float(lv)), repr(float(s)), repr(float(lr))])


def cmd_ik(args, cfg: RunConfig) -> int:
    hand = _hand(args.hand)
    doc = _read_json(args.targets)
    items = doc["problems"] if "problems" in doc else [doc]
    problems = []
    for item in items:
        try:
            problems.append(IkProblem(
                hand, np.asarray(item["targets"], dtype=float),
                mask=item.get("mask"), weights=item.get("weights"),
                base_transform=np.asarray(item["base"], dtype=float) if "base" in item else None,
                solve_base=bool(item.get("solve_base", True)), seed=int(item.get("seed", args.seed)),
            ))
        except KeyError as exc:
            raise InvalidInput(f"IK problem needs key {exc}") from exc
    sols = batch_solve(problems)
    out = [{"q": s.q.tolist(), "base": s.base.tolist(), "residual": s.residual, "converged": bool(s.converged), "iterations": s.iterations, "error": s.error} for s in sols]
    _write_json(args.out, {"hand": hand.name, "solutions": out})
    return EXIT_OK


def cmd_similarity(args, cfg: RunConfig) -> int:
    a, b = _hand(args.hand_a), _hand(args.hand_b)
    s_l, s_j = embodiment_similarity(a, b)
    doc = {"hand_a": a.name, "hand_b": b.name, "S_L": s_l, "S_J": s_j}
    if args.out:
        _write_json(args.out, doc)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


SCENARIO_PRESETS = {
    "constant_velocity": {"kind": "constant_velocity"},
    "static": {"kind": "constant_velocity", "velocity": (0.0, 0.0, 0.0)},
    "random_perturbation": {"kind": "random_perturbation"},
}


def cmd_closed_loop(args, cfg: RunConfig) -> int:
    if args.scenario in SCENARIO_PRESETS:
        scn = ClosedLoopScenario(**SCENARIO_PRESETS[args.scenario], seed=args.seed)
    else:
        scn = ClosedLoopScenario.from_dict(_read_json(args.scenario))
    hand = _hand(args.hand)
    cloud, _ = _object(args.object)
    q, base = _grasp(args.grasp, hand)
    model, P, L_pad = _denoiser(args, cfg)
    schedule = _schedule(cfg)
    t_star = args.t_star if args.t_star is not None else (cfg.guidance.t_star or default_t_star(schedule.T, schedule.M))
    result = run_closed_loop(
        hand, cloud, q, base, scn, schedule, model, t_star=t_star,
        steer=cfg.guidance.closed_loop_mode == "renoise+steer", strength=cfg.guidance.strength, P=P, L_pad=L_pad, seed=args.seed,
    )
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    write_report(result, args.report, args.timing)
    failed = sum(r.status != "ok" for r in result.records)
    print(json.dumps({"ticks": len(result.records), "failed": failed, "max_error": float(np.nanmax(result.errors)) if failed < len(result.records) else None}, sort_keys=True))
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    suites = SUITES if args.suite == "all" else [s for s in args.suite.split(",") if s]
    report = run_bench(suites, repeats=args.repeats, n=args.n, seed=args.seed)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommands repeat the flags without defaults so they never mask a value given earlier
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", help="run config JSON (defaults used when absent)", **kw)
        g.add_argument("--seed", type=int, **(kw or {"default": 0}))
        g.add_argument("--verbose", "-v", action="store_true", **kw)
        return g

    common = global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="trograph", description=__doc__.splitlines()[0], parents=[global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    sp = add("init-config", cmd_init_config, "write the default run config")
    sp.add_argument("--out", required=True)

    sp = add("gen-hand", cmd_gen_hand, "write a synthetic hand directory")
    sp.add_argument("--template", default="two_finger")
    sp.add_argument("--scale", type=float, default=1.0)
    sp.add_argument("--out", required=True)

    sp = add("gen-data", cmd_gen_data, "write a synthetic grasp dataset")
    sp.add_argument("--template", default="two_finger")
    sp.add_argument("--scale", type=float, default=1.0)
    sp.add_argument("--n-objects", type=int, default=16)
    sp.add_argument("--demos-per-object", type=int, default=1)
    sp.add_argument("--cone-deg", type=float, default=30.0)
    sp.add_argument("--spin-deg", type=float, default=30.0)
    sp.add_argument("--out", required=True)

    sp = add("build-graph", cmd_build_graph, "build a graph JSON from an object and a grasp")
    sp.add_argument("--object", required=True)
    sp.add_argument("--hand", required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--grasp", help="JSON with q and base")
    g.add_argument("--poses", help="JSON with per-link poses (L x 6) or transforms (L x 4 x 4)")
    sp.add_argument("--out", required=True)

    sp = add("sample", cmd_sample, "synthesize grasps")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", action="store_true", help="closed-form denoiser for --grasp (lambda forced to 0)")
    sp.add_argument("--grasp", help="reference grasp for --oracle")
    sp.add_argument("--hand", required=True)
    sp.add_argument("--object", required=True)
    gd = sp.add_mutually_exclusive_group()
    gd.add_argument("--guide-pose", help="JSON with r_init and/or an initial grasp (q, base)")
    gd.add_argument("--guide-contact", help="JSON with points, heat, r_cont")
    sp.add_argument("--t-star", type=int)
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.add_argument("--timing", help="optional JSON with wall-clock per grasp")

    sp = add("train", cmd_train, "train the denoiser on a dataset directory")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out-checkpoint", required=True)
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = add("ik", cmd_ik, "solve IK for per-link targets")
    sp.add_argument("--hand", required=True)
    sp.add_argument("--targets", required=True)
    sp.add_argument("--out", required=True)

    sp = add("similarity", cmd_similarity, "embodiment similarity of two hands")
    sp.add_argument("--hand-a", required=True)
    sp.add_argument("--hand-b", required=True)
    sp.add_argument("--out")

    sp = add("closed-loop", cmd_closed_loop, "closed-loop tracking harness")
    sp.add_argument("--scenario", default="constant_velocity", help=f"preset {sorted(SCENARIO_PRESETS)} or scenario JSON")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", action="store_true")
    sp.add_argument("--hand", required=True)
    sp.add_argument("--object", required=True)
    sp.add_argument("--grasp", required=True)
    sp.add_argument("--t-star", type=int)
    sp.add_argument("--report", required=True)
    sp.add_argument("--timing", help="optional CSV of per-tick latency")

    sp = add("bench", cmd_bench, "throughput benchmarks")
    sp.add_argument("--suite", default="all", help="comma list of sampling,ik,graph or 'all'")
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--n", type=int, default=5)
    sp.add_argument("--out")
    return p


_INVALID = (InvalidInput, ConfigError, FileNotFoundError, KeyError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        _configure_threads()
        return args.func(args, cfg)
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # runtime failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
