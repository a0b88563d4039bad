"""Writes metrics.csv, summary.json and privacy_report.txt for a set of runs."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .protocols import ExperimentResult

CSV_FIELDS = ["run", "round", "client", "method", "accuracy", "macro_accuracy", "epsilon",
              "bytes_sent", "bytes_received", "comm_time"]
_INT_FIELDS = {"run", "round", "client", "bytes_sent", "bytes_received"}
_FLOAT_FIELDS = {"accuracy", "macro_accuracy", "epsilon", "comm_time"}


def metric_rows(results: Iterable[ExperimentResult]) -> List[dict]:
    rows = []
    for res in results:
        for m in res.metrics:
            rows.extend(m.rows())
    return rows


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            # repr round-trips floats exactly
            w.writerow({k: repr(float(r[k])) if k in _FLOAT_FIELDS else r[k]
                        for k in CSV_FIELDS})


def read_metrics_csv(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        out = []
        for r in csv.DictReader(f):
            row = {}
            for k in CSV_FIELDS:
                if k in _INT_FIELDS:
                    row[k] = int(r[k])
                elif k in _FLOAT_FIELDS:
                    row[k] = float(r[k])
                else:
                    row[k] = r[k]
            out.append(row)
        return out


def _finite_or_none(x: float):
    return x if math.isfinite(x) else None


def summarize(rows: Sequence[dict]) -> Dict[str, dict]:
    """Final-round mean and population std over all clients of all runs."""
    by_method: Dict[str, List[dict]] = defaultdict(list)
    for r in rows:
        by_method[r["method"]].append(r)
    out = {}
    for method, rs in by_method.items():
        last = max(r["round"] for r in rs)
        final = [r for r in rs if r["round"] == last]
        acc = np.array([r["accuracy"] for r in final])
        macro = np.array([r["macro_accuracy"] for r in final])
        eps = np.array([r["epsilon"] for r in final])
        per_round = defaultdict(int)
        for r in rs:
            per_round[(r["run"], r["round"])] += r["bytes_sent"]
        out[method] = {
            "final_round": last,
            "num_runs": len({r["run"] for r in final}),
            "num_clients": len({r["client"] for r in final}),
            "accuracy_mean": float(acc.mean()),
            "accuracy_std": float(acc.std()),
            "macro_accuracy_mean": float(macro.mean()),
            "macro_accuracy_std": float(macro.std()),
            "epsilon_mean": _finite_or_none(float(eps.mean())),
            "epsilon_max": _finite_or_none(float(eps.max())),
            "comm_time_per_round": float(final[0]["comm_time"]),
            "bytes_sent_per_round": float(np.mean(list(per_round.values()))),
        }
    return out


def privacy_report(results: Iterable[ExperimentResult]) -> str:
    lines = []
    for res in results:
        for c in res.clients:
            fields = {"method": res.method.value, "run": res.run, "seed": res.seed,
                      "client": c.client_id, "dp_invocations": c.dp_invocations,
                      "exhausted": c.exhausted}
            if c.ledger is None:
                fields.update(epsilon="inf", delta="n/a", steps=0)
            else:
                rep = c.ledger.report()
                fields.update(epsilon=f"{rep['epsilon']:.6g}", delta=f"{rep['delta']:.3g}",
                              steps=rep["steps"], q=f"{rep['sampling_rate']:.6g}",
                              sigma=f"{rep['noise_multiplier']:.6g}")
                if c.ledger.budget_epsilon is not None:
                    fields["budget"] = f"{c.ledger.budget_epsilon:.6g}"
            lines.append(" ".join(f"{k}={v}" for k, v in fields.items()))
    return "\n".join(lines) + "\n"


def emit_results(results: Sequence[ExperimentResult], out_dir, figures: bool = True,
                 link_time_per_byte: float = None) -> List[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rows = metric_rows(results)
        paths = [out / "metrics.csv", out / "summary.json", out / "privacy_report.txt"]
        write_metrics_csv(rows, paths[0])
        paths[1].write_text(json.dumps(summarize(rows), indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
        paths[2].write_text(privacy_report(results), encoding="utf-8")
        if figures:
            from .plotting import render_figures
            spec = next((c.proxy_spec for r in results for c in r.clients if c.proxy_spec), None)
            paths.extend(render_figures(rows, out, spec.num_bytes if spec else None,
                                        link_time_per_byte))
    except OSError as e:
        raise OSError(f"cannot write results under {out}: {e}") from e
    return paths
