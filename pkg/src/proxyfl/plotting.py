"""Figures written next to metrics.csv."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .protocols import Method, comm_cost_model  # noqa: E402


def _curves(rows, key):
    per = defaultdict(lambda: defaultdict(list))
    for r in rows:
        per[r["method"]][r["round"]].append(r[key])
    return per


def plot_accuracy(rows: Sequence[dict], path, key: str = "accuracy") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, by_round in sorted(_curves(rows, key).items()):
        rounds = np.array(sorted(by_round))
        mean = np.array([np.mean(by_round[t]) for t in rounds])
        std = np.array([np.std(by_round[t]) for t in rounds])
        line, = ax.plot(rounds + 1, mean, label=method)
        ax.fill_between(rounds + 1, mean - std, mean + std, color=line.get_color(), alpha=0.2)
    ax.set_xlabel("round")
    ax.set_ylabel(key.replace("_", " "))
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_comm_scaling(methods: Sequence[str], model_bytes: int, link_time_per_byte: float,
                      path, max_clients: int = 64) -> Path:
    ks = np.arange(1, max_clients + 1)
    fig, ax = plt.subplots(figsize=(5, 4))
    for m in methods:
        if Method(m) in (Method.REGULAR, Method.JOINT):
            continue
        ax.plot(ks, [comm_cost_model(m, int(k), model_bytes, link_time_per_byte) for k in ks],
                label=m)
    ax.set_xlabel("number of clients")
    ax.set_ylabel("simulated communication time per round (s)")
    if ax.lines:
        ax.legend(fontsize=8)
    else:
        ax.text(0.5, 0.5, "no communicating methods", ha="center", transform=ax.transAxes)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_figures(rows: Sequence[dict], out_dir, model_bytes: int = None,
                   link_time_per_byte: float = None) -> List[Path]:
    out = Path(out_dir)
    paths = [plot_accuracy(rows, out / "accuracy.png"),
             plot_accuracy(rows, out / "macro_accuracy.png", key="macro_accuracy")]
    if model_bytes and link_time_per_byte:
        methods = sorted({r["method"] for r in rows if not r["method"].endswith("-proxy")})
        paths.append(plot_comm_scaling(methods, model_bytes, link_time_per_byte,
                                       out / "comm_time.png"))
    return paths
