"""Cross-run comparison: a success/grounding table, per-interval improvement
series and bar/line figures.

Each run directory holds ``config.json`` and one ``seed_<n>`` directory per
seed.  Only the ``final`` evaluation record of every seed is compared.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from ..errors import UsageError
from .metrics import read_metrics

TABLE_FIELDS = [
    "method", "strategy", "algorithm", "seeds",
    "success_median", "success_min", "success_max",
    "grounding_median", "grounding_min", "grounding_max",
    "mean_reward_median", "base_success_median",
]


def relative_improvement(value: float, baseline: float) -> float:
    """``(value - baseline) / baseline``; ``inf`` for a zero baseline unless both are zero."""
    if baseline == 0:
        return 0.0 if value == 0 else math.copysign(math.inf, value)
    return (value - baseline) / baseline


def load_run(directory: str | Path) -> dict:
    directory = Path(directory)
    cfg_path = directory / "config.json"
    if not cfg_path.exists():
        raise UsageError(f"{directory}: not a run directory (no config.json)")
    cfg = json.loads(cfg_path.read_text())
    seeds = {}
    for sd in sorted(directory.glob("seed_*"), key=lambda p: int(p.name.split("_")[1])):
        if not (sd / "metrics.jsonl").exists():
            continue
        recs = {r.stage: r for r in read_metrics(sd)}
        if "final" in recs:
            seeds[int(sd.name.split("_")[1])] = recs
    if not seeds:
        raise UsageError(f"{directory}: no evaluated seeds")
    return {"dir": str(directory), "config": cfg, "seeds": seeds}


def _split_key(cfg: dict) -> tuple:
    return (cfg["env"]["name"], json.dumps(cfg["env"]["params"], sort_keys=True),
            json.dumps(cfg["split"], sort_keys=True))


def _dispersion(values) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(np.median(v)), float(v.min()), float(v.max())


def summarize_run(run: dict) -> dict:
    finals = [recs["final"] for recs in run["seeds"].values()]
    succ = _dispersion([r.success_rate for r in finals])
    gro = _dispersion([r.grounding_accuracy for r in finals])
    bins = list(finals[0].interval_counts)
    return {
        "method": run["config"]["name"],
        "strategy": run["config"]["strategy"]["kind"],
        "algorithm": run["config"]["algorithm"],
        "seeds": len(finals),
        "success_median": succ[0], "success_min": succ[1], "success_max": succ[2],
        "grounding_median": gro[0], "grounding_min": gro[1], "grounding_max": gro[2],
        "mean_reward_median": _dispersion([r.mean_reward for r in finals])[0],
        "base_success_median": _dispersion([recs["base"].success_rate for recs in run["seeds"].values()])[0],
        "success_per_seed": {str(k): recs["final"].success_rate for k, recs in run["seeds"].items()},
        "interval_successes_median": {b: float(np.median([r.interval_successes[b] for r in finals])) for b in bins},
        "interval_counts_median": {b: float(np.median([r.interval_counts[b] for r in finals])) for b in bins},
    }


def interval_series(summary: dict, baseline: dict) -> list[dict]:
    """Per length bin: median success counts of both runs and the relative improvement."""
    rows = []
    for b, v in summary["interval_successes_median"].items():
        base = baseline["interval_successes_median"][b]
        rows.append({
            "method": summary["method"], "bin": b, "successes": v, "baseline_successes": base,
            "relative_improvement": relative_improvement(v, base),
        })
    return rows


def longest_populated_bin(rows: list[dict]) -> str | None:
    """Last length bin where either compared run has a nonzero median success count."""
    populated = [r["bin"] for r in rows if r["successes"] > 0 or r["baseline_successes"] > 0]
    return populated[-1] if populated else None


def compare_runs(dirs: list[str | Path], out_dir: str | Path, baseline: str | None = None, plots: bool = True) -> dict:
    """Compare run directories that share environment and task split.

    ``baseline`` names the reference method; by default the vanilla PPO run
    (strategy ``none`` with ``ppo``), else the first run.
    """
    if not dirs:
        raise UsageError("compare_runs() needs at least one run directory")
    runs = [load_run(d) for d in dirs]
    key = _split_key(runs[0]["config"])
    for r in runs[1:]:
        if _split_key(r["config"]) != key:
            raise UsageError(f"{r['dir']} uses a different environment or task split than {runs[0]['dir']}")
    summaries = [summarize_run(r) for r in runs]
    names = [s["method"] for s in summaries]
    if len(set(names)) != len(names):
        for s, r in zip(summaries, runs):
            s["method"] = f"{s['method']}@{Path(r['dir']).name}"
        names = [s["method"] for s in summaries]
    if baseline is None:
        ref = next((s for s in summaries if s["strategy"] == "none" and s["algorithm"] == "ppo"), summaries[0])
    else:
        matches = [s for s in summaries if s["method"] == baseline]
        if not matches:
            raise UsageError(f"baseline {baseline!r} is not among {names}")
        ref = matches[0]
    intervals = [row for s in summaries for row in interval_series(s, ref)]
    longest = {s["method"]: longest_populated_bin([r for r in intervals if r["method"] == s["method"]]) for s in summaries}

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, TABLE_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(summaries)
    with open(out / "intervals.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["method", "bin", "successes", "baseline_successes", "relative_improvement"], lineterminator="\n")
        w.writeheader()
        w.writerows(intervals)
    report = {"baseline": ref["method"], "methods": summaries, "intervals": intervals, "longest_populated_bin": longest}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if plots:
        plot_report(report, out)
    return report


def plot_report(report: dict, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = report["methods"]
    names = [m["method"] for m in methods]
    x = np.arange(len(methods))
    paths = []
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, metric, label in zip(axes, ("success", "grounding"), ("success rate", "grounding accuracy")):
        med = np.array([m[f"{metric}_median"] for m in methods])
        lo = med - np.array([m[f"{metric}_min"] for m in methods])
        hi = np.array([m[f"{metric}_max"] for m in methods]) - med
        ax.bar(x, med, yerr=[lo, hi], capsize=3, color="0.6", edgecolor="k")
        ax.set_xticks(x, names, rotation=30, ha="right")
        ax.set_ylabel(f"test {label} (median, min-max)")
        ax.set_ylim(0, 1.05)
    fig.tight_layout()
    paths.append(out / "success_grounding.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for m in methods:
        if m["method"] == report["baseline"]:
            continue
        rows = [r for r in report["intervals"] if r["method"] == m["method"]]
        bins = [r["bin"] for r in rows if r["successes"] > 0 or r["baseline_successes"] > 0]
        vals = [r["relative_improvement"] for r in rows if r["bin"] in bins]
        vals = [np.nan if not math.isfinite(v) else v for v in vals]
        ax.plot(bins, vals, marker="o", label=m["method"])
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("episode length bin (steps)")
    ax.set_ylabel(f"relative improvement over {report['baseline']}")
    if len(methods) > 1:
        ax.legend(fontsize="small")
    fig.tight_layout()
    paths.append(out / "interval_improvement.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    return paths
