"""Command-line entry point: ``evplan <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from typing import Optional

import numpy as np

log = logging.getLogger("evplan")

EVAL_COLUMNS = ("mode", "n_prior", "zeta", "lambda")
ANCHOR_COLUMNS = ("index", "beta_prior", "evidence", "beta_post", "q_bar")
PRIOR_COLUMNS = ("index", "reward", "rank", "p", "beta")
EVIDENCE_COLUMNS = ("split", "n_scenes", "median_total_evidence", "ratio_id_over_ood")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _road_kinds(text: str) -> dict:
    out = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        out[key.strip()] = float(value)
    return out


def _hierarchy(args, F: int):
    from evplan.rules import default_hierarchy, load_rule_config

    params = load_rule_config(args.rule_config) if getattr(args, "rule_config", None) else None
    return default_hierarchy(F, params)


def _checkpoint(path: Optional[str]):
    if path is None:
        return None
    from evplan.train import load_checkpoint

    return load_checkpoint(path)[0]


def _needs(mode: str, params, what: str = "--checkpoint"):
    if mode in ("rulefuser", "il", "mix") and params is None:
        raise SystemExit(f"mode {mode} requires {what}")


# --- subcommands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from evplan.scene import save_dataset
    from evplan.synth import GenConfig, generate_scenes

    cfg = GenConfig(
        n_scenes=args.n_scenes,
        driving_side=args.side,
        mean_agent_density=args.density,
        road_kinds=_road_kinds(args.road_kinds),
        speed_noise=args.speed_noise,
        lateral_noise=args.lateral_noise,
        lane_change_prob=args.lane_change_prob,
        brake_event_prob=args.brake_prob,
        seed=args.seed,
    )
    ds = generate_scenes(cfg)
    save_dataset(ds, args.out)
    log.info("wrote %d scenes (%s) to %s", len(ds), ds.meta.regime, args.out)
    return 0


def cmd_train(args) -> int:
    from evplan.net import NetConfig
    from evplan.scene import load_dataset
    from evplan.train import TrainingDiverged, TrainSettings, save_checkpoint, train

    data = load_dataset(args.data)
    val = load_dataset(args.val_data) if args.val_data else None
    cfg = NetConfig(d=args.d, H=data.meta.H, F=data.meta.F, uce_prior=args.uce_prior)
    settings = TrainSettings(lr=args.lr, batch_size=args.batch_size, max_epochs=args.epochs, patience=args.patience,
                             cosine_decay=args.cosine)

    def report(rec):
        log.info("epoch %d  mse %.4f  uce %.4f  val %.4f", rec.epoch, rec.train_mse, rec.train_uce, rec.val_total)

    meta = {"data": str(args.data), "val_data": args.val_data, "seed": args.seed, "n_train": len(data)}
    try:
        result = train(data, cfg, args.seed, val_dataset=val, settings=settings, log_path=args.log, on_epoch=report)
    except TrainingDiverged as exc:
        save_checkpoint(args.out, exc.params, {**meta, "diverged": str(exc)})
        log.error("%s; last good parameters saved to %s", exc, args.out)
        return 2
    save_checkpoint(args.out, result.params, {**meta, "epochs": len(result.history), "best_epoch": result.best_epoch})
    log.info("saved checkpoint to %s (best epoch %d)", args.out, result.best_epoch)
    return 0


def cmd_eval(args) -> int:
    from evplan.fusion import plan_many, prepare
    from evplan.metrics import REPORT_COLUMNS, compute_metrics
    from evplan.scene import load_dataset

    data = load_dataset(args.data)
    params = _checkpoint(args.checkpoint)
    _needs(args.mode, params)
    hierarchy = _hierarchy(args, data.meta.F)
    inputs = prepare(
        data.scenes,
        params if args.mode != "rh" else None,
        hierarchy if args.mode != "il" else None,
        F=data.meta.F,
        dt=data.meta.dt,
    )
    outputs = plan_many(inputs, args.mode, n_prior=args.n_prior, zeta=args.zeta, lam=args.lam)
    report = compute_metrics(outputs, data)
    row = {"mode": args.mode, "n_prior": args.n_prior, "zeta": args.zeta, "lambda": args.lam, **report.as_row()}
    if args.report:
        with open(args.report, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(EVAL_COLUMNS + REPORT_COLUMNS))
            w.writeheader()
            w.writerow(row)
    if args.prior_dump:
        if args.mode == "il":
            raise SystemExit("--prior-dump needs a rule-based mode")
        _dump_priors(args.prior_dump, inputs, hierarchy, args.zeta, args.n_prior)
    for key in REPORT_COLUMNS:
        print(f"{key:>20s}  {row[key]:.6g}" if isinstance(row[key], float) else f"{key:>20s}  {row[key]}")
    return 0


def _dump_priors(path, inputs, hierarchy, zeta, n_prior):
    from evplan.rh_planner import BoltzmannConfig, boltzmann_distribution, prior_from_rewards, score_anchors

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("scene_id",) + PRIOR_COLUMNS)
        for inp in inputs:
            scores = score_anchors(inp.anchors, inp.scene, hierarchy)
            p = boltzmann_distribution(scores.rewards, BoltzmannConfig(zeta))
            beta = prior_from_rewards(scores.rewards, BoltzmannConfig(zeta), n_prior).concentration
            for k in range(inp.anchors.K):
                w.writerow((inp.scene.scene_id, k, f"{scores.rewards[k]:.10g}", int(scores.ranks[k]),
                            f"{p[k]:.10g}", f"{beta[k]:.10g}"))


def cmd_plan(args) -> int:
    from evplan.fusion import plan
    from evplan.scene import load_dataset

    data = load_dataset(args.data)
    matches = [s for s in data.scenes if s.scene_id == args.scene_id] if args.scene_id else data.scenes[:1]
    if not matches:
        raise SystemExit(f"scene {args.scene_id!r} not found in {args.data}")
    scene = matches[0]
    params = _checkpoint(args.checkpoint)
    _needs(args.mode, params)
    hierarchy = _hierarchy(args, data.meta.F)
    if scene.dt is None:
        scene = replace(scene, dt=data.meta.dt)
    out = plan(scene, args.mode, params if args.mode != "rh" else None, hierarchy if args.mode != "il" else None,
               n_prior=args.n_prior, zeta=args.zeta, lam=args.lam)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ANCHOR_COLUMNS)
        for k in range(out.K):
            w.writerow((k, f"{out.prior.concentration[k]:.10g}", f"{out.evidence[k]:.10g}",
                        f"{out.posterior.concentration[k]:.10g}", f"{out.marginal[k]:.10g}"))
    if args.trajectory_out:
        traj = out.selected
        with open(args.trajectory_out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("t", "x", "y", "heading", "speed"))
            for s in traj.states:
                w.writerow((s.timestamp_index, f"{s.position[0]:.6f}", f"{s.position[1]:.6f}",
                            f"{s.heading:.6f}", f"{s.speed:.6f}"))
    if args.anchors_csv:
        with open(args.anchors_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("anchor", "t", "x", "y"))
            for k, pts in enumerate(out.anchor_positions):
                for i, (x, y) in enumerate(pts):
                    w.writerow((k, i + 1, f"{x:.6f}", f"{y:.6f}"))
    if args.svg:
        from evplan.plots import plot_plan

        plot_plan(scene, out, args.svg)
    print(f"scene {scene.scene_id}: mode {out.mode}, selected anchor {out.selected_index}, "
          f"total evidence {out.total_evidence:.6g}")
    return 0


def cmd_sweep(args) -> int:
    from evplan.experiments import DEFAULT_N_PRIOR_GRID, pareto_sweep, plot_sweep, write_rows
    from evplan.scene import load_dataset

    ds_id = load_dataset(args.data_id)
    ds_ood = load_dataset(args.data_ood)
    params = _checkpoint(args.checkpoint)
    hierarchy = _hierarchy(args, ds_id.meta.F)
    grid = _floats(args.grid) if args.grid else list(DEFAULT_N_PRIOR_GRID)
    lam_grid = _floats(args.lambda_grid) if args.lambda_grid else []
    rows = pareto_sweep(ds_id, ds_ood, params, hierarchy, grid, lam_grid, zeta=args.zeta)
    write_rows(rows, args.out)
    if args.svg:
        plot_sweep(rows, args.svg)
    log.info("wrote %d rows to %s", len(rows), args.out)
    return 0


def cmd_evidence(args) -> int:
    from evplan.experiments import total_evidence
    from evplan.scene import load_dataset

    params = _checkpoint(args.checkpoint)
    ds_id = load_dataset(args.data_id)
    ds_ood = load_dataset(args.data_ood)
    ev_id = total_evidence(params, ds_id)
    ev_ood = total_evidence(params, ds_ood)
    med_id, med_ood = float(np.median(ev_id)), float(np.median(ev_ood))
    ratio = med_id / med_ood
    rows = [("ID", len(ev_id), med_id, ratio), ("OOD", len(ev_ood), med_ood, ratio)]
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(EVIDENCE_COLUMNS)
            w.writerows(rows)
    print(json.dumps({"median_id": med_id, "median_ood": med_ood, "ratio": ratio}))
    return 0


# --- parser ----------------------------------------------------------------------------


def _planner_flags(p, default_mode="rulefuser"):
    p.add_argument("--mode", "--planner", dest="mode", default=default_mode, choices=("rulefuser", "il", "rh", "mix"))
    p.add_argument("--checkpoint")
    p.add_argument("--rule-config", help="key = value rule parameter file")
    p.add_argument("--n-prior", type=float, default=1.0)
    p.add_argument("--zeta", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evplan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--n-scenes", type=int, default=100)
    g.add_argument("--side", choices=("right", "left"), default="right")
    g.add_argument("--density", type=float, default=3.0, help="mean number of agents per scene")
    g.add_argument("--road-kinds", default="straight=0.5,curve=0.3,intersection=0.2")
    g.add_argument("--speed-noise", type=float, default=0.3)
    g.add_argument("--lateral-noise", type=float, default=0.05)
    g.add_argument("--lane-change-prob", type=float, default=0.2)
    g.add_argument("--brake-prob", type=float, default=0.15)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the evidential network")
    t.add_argument("--data", required=True)
    t.add_argument("--val-data")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--log", help="per-epoch loss CSV")
    t.add_argument("--d", type=int, default=64, help="latent width")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--uce-prior", type=float, default=0.0, help="per-anchor pseudo-count in the classification loss")
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--cosine", action="store_true", help="cosine learning-rate decay")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a planner on a dataset")
    e.add_argument("--data", required=True)
    _planner_flags(e)
    e.add_argument("--report", help="metrics CSV")
    e.add_argument("--prior-dump", help="per-anchor rule prior CSV")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="plan a single scene")
    p.add_argument("--data", required=True)
    p.add_argument("--scene-id")
    _planner_flags(p)
    p.add_argument("--out", required=True, help="per-anchor CSV")
    p.add_argument("--trajectory-out", help="selected trajectory CSV")
    p.add_argument("--anchors-csv", help="anchor positions CSV")
    p.add_argument("--svg", help="overlay plot")
    p.set_defaults(func=cmd_plan)

    s = sub.add_parser("sweep", help="sweep the prior strength and mixing weight")
    s.add_argument("--data-id", required=True)
    s.add_argument("--data-ood", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--rule-config")
    s.add_argument("--grid", help="comma-separated prior strengths")
    s.add_argument("--lambda-grid", help="comma-separated mixing weights")
    s.add_argument("--zeta", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.add_argument("--svg")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("evidence", help="median total evidence on ID and OOD sets")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data-id", required=True)
    v.add_argument("--data-ood", required=True)
    v.add_argument("--out")
    v.set_defaults(func=cmd_evidence)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
