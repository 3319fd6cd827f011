"""Figures and CSV tables rendered from a saved evaluation report."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _ks(table: Mapping) -> list[str]:
    return sorted(table, key=int)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curves(logs: Mapping[str, Mapping[str, list]], path) -> Path:
    """Convergence proxy and cycle loss per epoch, one line per (variant, target)."""
    fig, (ax_p, ax_c) = plt.subplots(1, 2, figsize=(10, 4))
    for variant, per_attr in logs.items():
        for attr, log in per_attr.items():
            if not log:
                continue
            epochs = [e["epoch"] for e in log]
            label = f"{variant} {attr}"
            ax_p.plot(epochs, [e["convergence_proxy"] for e in log], label=label)
            ax_c.plot(epochs, [e["cycle"] for e in log], label=label)
    ax_p.set(xlabel="epoch", ylabel="mean cos(x, x_hat)", title="convergence proxy")
    ax_c.set(xlabel="epoch", ylabel="cycle loss", title="cycle reconstruction", yscale="log")
    ax_p.legend(fontsize=6, ncol=2)
    return _save(fig, Path(path))


def plot_ablation(report: Mapping, path, k: int = 10) -> Path:
    t = report["t_at_k"]
    variants = list(t)
    cols = list(next(iter(t.values())))
    width = 0.8 / max(len(variants), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(cols))
    for i, v in enumerate(variants):
        ax.bar(x + i * width, [t[v][c][str(k)] for c in cols], width, label=v)
    ax.set_xticks(x + width * (len(variants) - 1) / 2, cols)
    ax.set(ylabel=f"T@{k}", title=f"T@{k} by manipulated attribute")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_topk(report: Mapping, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    r = report["r_at_k"]
    ax.plot([int(k) for k in _ks(r)], [r[k] for k in _ks(r)], "k--", label="R@k (original)")
    for v, table in report["t_at_k"].items():
        ks = _ks(table["All"])
        ax.plot([int(k) for k in ks], [table["All"][k] for k in ks], marker="o", label=f"T@k {v}")
    ax.set(xlabel="k", ylabel="accuracy", xscale="log", ylim=(0, 1.05), title="retrieval accuracy vs k")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_probe(report: Mapping, path) -> Path:
    pd = report["probe_delta"]
    variants = list(pd)
    attrs = list(next(iter(pd.values()))["per_attribute"])
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(attrs))
    width = 0.8 / (len(variants) + 1)
    first = pd[variants[0]]["per_attribute"]
    ax.bar(x, [first[a]["original"] for a in attrs], width, label="original", color="0.6")
    for i, v in enumerate(variants, start=1):
        ax.bar(x + i * width, [pd[v]["per_attribute"][a]["manipulated"] for a in attrs], width, label=v)
    ax.set_xticks(x + width * len(variants) / 2, attrs)
    ax.set(ylabel="probe accuracy", ylim=(0, 1.05), title="probe accuracy, original vs manipulated")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def tables(report: Mapping) -> dict[str, str]:
    """CSV text keyed by file name."""
    out = {}

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "attribute", "k", "t_at_k", "unreachable"])
    for v, table in report["t_at_k"].items():
        for attr, row in table.items():
            for k in _ks(row):
                w.writerow([v, attr, k, f"{row[k]:.4f}", report["unreachable_count"].get(v, {}).get(attr, "")])
    out["t_at_k.csv"] = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "r_at_k"])
    for k in _ks(report["r_at_k"]):
        w.writerow([k, f"{report['r_at_k'][k]:.4f}"])
    out["r_at_k.csv"] = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "attribute", "original", "manipulated", "delta", "remaining_drop_max"])
    for v, pd in report["probe_delta"].items():
        for attr, row in pd["per_attribute"].items():
            drop = max((r["original"] - r["manipulated"] for r in row["remaining"].values()), default=0.0)
            w.writerow([v, attr, f"{row['original']:.4f}", f"{row['manipulated']:.4f}", f"{row['delta']:+.4f}",
                        f"{drop:.4f}"])
    out["probe_delta.csv"] = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "attribute", "final_convergence_proxy"])
    for v, per_attr in report.get("convergence_proxy", {}).items():
        for attr, value in per_attr.items():
            w.writerow([v, attr, "" if value is None else f"{value:.4f}"])
    out["convergence_proxy.csv"] = buf.getvalue()
    return out


def render_report(report: Mapping, logs: Mapping[str, Mapping[str, list]], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [plot_topk(report, out_dir / "topk.png")]
    if report.get("t_at_k"):
        written.append(plot_ablation(report, out_dir / "ablation_t10.png"))
    if report.get("probe_delta"):
        written.append(plot_probe(report, out_dir / "probe_delta.png"))
    if logs:
        written.append(plot_training_curves(logs, out_dir / "training_curves.png"))
    for name, text in tables(report).items():
        p = out_dir / name
        p.write_text(text)
        written.append(p)
    return written
