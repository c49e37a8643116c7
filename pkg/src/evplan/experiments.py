"""Prior-strength sweeps, prior-strength selection and evidence statistics."""

from __future__ import annotations

import csv
from typing import Optional, Sequence

import numpy as np

from evplan.fusion import SceneInputs, plan_many, prepare
from evplan.metrics import REPORT_COLUMNS, MetricsReport, compute_metrics
from evplan.net import NetParams
from evplan.rules import RuleHierarchy
from evplan.scene import Dataset

DEFAULT_N_PRIOR_GRID = (0.0,) + tuple(float(v) for v in np.logspace(-1, 9, 14))
SWEEP_COLUMNS = ("method", "value", "split") + REPORT_COLUMNS
SPLITS = ("ID", "OOD", "combined")


def _report(inputs: Sequence[SceneInputs], scenes, mode: str, **kw) -> MetricsReport:
    return compute_metrics(plan_many(inputs, mode, **kw), scenes)


def pareto_sweep(
    dataset_id: Dataset,
    dataset_ood: Dataset,
    params: NetParams,
    hierarchy: RuleHierarchy,
    n_prior_grid: Sequence[float] = DEFAULT_N_PRIOR_GRID,
    lambda_grid: Sequence[float] = (),
    zeta: float = 1.0,
) -> list[dict]:
    """One row per (method, grid value, split); IL and RH rows come first.

    The combined split is the concatenation of both sets.
    """
    if len(n_prior_grid) == 0 and len(lambda_grid) == 0:
        raise ValueError("empty sweep grid")
    prepared = {
        "ID": prepare(dataset_id.scenes, params, hierarchy, dt=dataset_id.meta.dt),
        "OOD": prepare(dataset_ood.scenes, params, hierarchy, dt=dataset_ood.meta.dt),
    }
    prepared["combined"] = prepared["ID"] + prepared["OOD"]
    scenes = {"ID": dataset_id.scenes, "OOD": dataset_ood.scenes}
    scenes["combined"] = scenes["ID"] + scenes["OOD"]

    settings = [("il", None, {}), ("rh", None, {})]
    settings += [("rulefuser", float(n), {"n_prior": float(n)}) for n in n_prior_grid]
    settings += [("mix", float(lam), {"lam": float(lam)}) for lam in lambda_grid]
    rows = []
    for method, value, kw in settings:
        for split in SPLITS:
            if not prepared[split]:
                continue
            report = _report(prepared[split], scenes[split], method, zeta=zeta, **kw)
            rows.append({"method": method, "value": value, "split": split, **report.as_row()})
    return rows


def write_rows(rows: Sequence[dict], path, columns: Sequence[str] = SWEEP_COLUMNS) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})


def plot_sweep(rows: Sequence[dict], path, split: str = "combined") -> None:
    """Safety score against ADE, one series per method, as a standalone SVG."""
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "evplan"  # stable element ids
    fig, ax = plt.subplots(figsize=(6, 4.5))
    styles = {"rulefuser": ("o-", "tab:blue"), "mix": ("s--", "tab:orange"), "il": ("*", "tab:green"),
              "rh": ("^", "tab:red")}
    for method, (marker, color) in styles.items():
        sel = [r for r in rows if r["method"] == method and r["split"] == split]
        if not sel:
            continue
        sel.sort(key=lambda r: (r["value"] is None, r["value"] or 0.0))
        ax.plot([r["ade"] for r in sel], [r["safety_score"] for r in sel], marker, color=color,
                label=method, markersize=9 if method in ("il", "rh") else 5)
    ax.set_xlabel("ADE [m]")
    ax.set_ylabel("safety score (lower is safer)")
    ax.set_title(f"prior strength sweep ({split})")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def select_n_prior(
    dataset_val: Dataset,
    params: NetParams,
    hierarchy: RuleHierarchy,
    grid: Sequence[float] = DEFAULT_N_PRIOR_GRID,
    ade_tolerance: float = 0.05,
    zeta: float = 1.0,
    inputs: Optional[Sequence[SceneInputs]] = None,
) -> tuple[float, list[dict]]:
    """Prior strength with the lowest validation safety score among those whose ADE stays within
    ``ade_tolerance`` (relative) of the learned planner alone; the larger strength wins ties."""
    if inputs is None:
        inputs = prepare(dataset_val.scenes, params, hierarchy, dt=dataset_val.meta.dt)
    il = _report(inputs, dataset_val.scenes, "il", zeta=zeta)
    limit = il.ade * (1.0 + ade_tolerance)
    table = []
    for n in sorted(grid):
        rep = _report(inputs, dataset_val.scenes, "rulefuser", n_prior=float(n), zeta=zeta)
        table.append({"n_prior": float(n), "ade": rep.ade, "safety_score": rep.safety_score})
    ok = [r for r in table if r["ade"] <= limit]
    if not ok:
        return 0.0, table
    best = min(ok, key=lambda r: (r["safety_score"], -r["n_prior"]))
    return best["n_prior"], table


def total_evidence(params: NetParams, dataset: Dataset) -> np.ndarray:
    inputs = prepare(dataset.scenes, params, None, dt=dataset.meta.dt)
    return np.array([float(np.sum(i.net.evidence)) for i in inputs])


def evidence_report(params: NetParams, dataset_id: Dataset, dataset_ood: Dataset) -> tuple[float, float, float]:
    """(median total evidence on ID, median on OOD, ID / OOD)."""
    ev_id = total_evidence(params, dataset_id)
    ev_ood = ev_id if dataset_ood is dataset_id else total_evidence(params, dataset_ood)
    med_id, med_ood = float(np.median(ev_id)), float(np.median(ev_ood))
    return med_id, med_ood, med_id / med_ood
