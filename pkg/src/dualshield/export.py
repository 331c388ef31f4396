"""Trial artefacts: JSON results, CSV traces and a static SVG overview."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .grid import atomic_write

CSV_COLUMNS = ("t", "p_x", "p_y", "theta", "v", "w", "a", "w_safe", "a_safe", "eps", "V_min")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write(path, dumps(obj))


def trace_csv(result) -> str:
    """One row per state ``k = 0..K``; control columns are blank on the last row."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    n = len(result.ego_states)
    for k in range(n):
        s = result.ego_states[k]
        if k < len(result.u_plan):
            ctrl = [repr(float(x)) for x in (*result.u_plan[k], *result.u_safe[k], result.eps[k])]
        else:
            ctrl = [""] * 5
        vm = result.v_min[k]
        wr.writerow([repr(round(k * result.dt, 10)), *(repr(float(x)) for x in s), *ctrl,
                     "" if not np.isfinite(vm) else repr(float(vm))])
    return buf.getvalue()


def plot_svg(result, scn) -> str:
    """Trajectory overlay plus the ``V_min`` timeline as SVG text."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax, bx) = plt.subplots(2, 1, figsize=(8, 7), gridspec_kw={"height_ratios": [2, 1]})
    ax.plot(result.ego_states[:, 0], result.ego_states[:, 1], color="tab:blue", label="ego")
    for i, hv in enumerate(result.hv_states):
        ax.plot(hv[:, 0], hv[:, 1], color="tab:red", alpha=0.8, label=f"HV{i + 1} ({result.modes[i]})")
    if len(scn.statics):
        ax.scatter(scn.statics[:, 0], scn.statics[:, 1], s=12, color="k", label="static")
    ax.axhline(scn.y_bounds[0], color="0.6", lw=0.8)
    ax.axhline(scn.y_bounds[1], color="0.6", lw=0.8)
    ax.plot(*scn.goal[:2], marker="*", color="tab:green", ms=10, ls="none", label="goal")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="upper right", fontsize=7)
    t = np.arange(len(result.v_min)) * result.dt
    bx.plot(t, result.v_min, color="tab:purple")
    bx.axhline(0.0, color="k", lw=0.8)
    active = np.flatnonzero(result.shield_active)
    if len(active):
        bx.scatter(active * result.dt, np.zeros(len(active)), s=6, color="tab:orange", label="shield active")
        bx.legend(loc="upper right", fontsize=7)
    bx.set_xlabel("t [s]")
    bx.set_ylabel("V_min")
    fig.tight_layout()
    buf = io.StringIO()
    # fixed hash salt and no date keep the SVG reproducible
    matplotlib.rcParams["svg.hashsalt"] = "dualshield"
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def export_trial(result, scn, directory, stem: str = "trial") -> dict:
    """Write ``<stem>.csv`` (ego trace), ``<stem>_hv<i>.csv`` and ``<stem>.svg``."""
    d = Path(directory)
    paths = {"csv": d / f"{stem}.csv", "svg": d / f"{stem}.svg"}
    atomic_write(paths["csv"], trace_csv(result))
    for i, hv in enumerate(result.hv_states):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(("t", "p_x", "p_y", "theta", "v"))
        for k, s in enumerate(hv):
            wr.writerow([repr(round(k * result.dt, 10)), *(repr(float(x)) for x in s)])
        p = d / f"{stem}_hv{i + 1}.csv"
        atomic_write(p, buf.getvalue())
        paths[f"hv{i + 1}"] = p
    atomic_write(paths["svg"], plot_svg(result, scn))
    return paths
