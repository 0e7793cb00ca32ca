#!/usr/bin/env python3
"""
Render evaluation results and run history as text or JSON
"""
import argparse
import json
import os
import sys
from typing import Dict, List, Optional

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from settings import load_config
from store import RunStore, get_store


def fmt_metric(value: Optional[float]) -> str:
    if value is None:
        return "-"
    if value != 0 and abs(value) < 1e-3:
        return f"{value:.3e}"
    return f"{value:.4f}"


def fmt_pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{value * 100:+.1f}%"


def _cell(value) -> str:
    return fmt_metric(value) if isinstance(value, float) else str(value)


def _table(headers: List[str], rows: List[List[str]]) -> List[str]:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    out = [line, "-" * len(line)]
    for r in rows:
        out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return out


def render_text(report: Dict) -> str:
    """Human-readable summary of a report dictionary (EvalReport.to_dict() plus extras)"""
    lines = []
    title = report.get("title") or f"{report.get('dataset', '?')} [{report.get('mode', '?')}]"
    lines.append(f"PCD Forecast Report - {title}")
    lines.append("=" * 50)

    if report.get("composition"):
        lines.append(f"Composition: {report['composition']}   Mask: {report.get('mask_kind', '-')}")
    per_horizon = report.get("per_horizon") or {}
    if per_horizon:
        lines.append("")
        rows = [[h, fmt_metric(m["mse"]), fmt_metric(m["mae"]), fmt_metric(m.get("cd_ratio"))]
                for h, m in sorted(per_horizon.items(), key=lambda kv: int(kv[0]))]
        avg = report.get("average") or {}
        rows.append(["avg", fmt_metric(avg.get("mse")), fmt_metric(avg.get("mae")), ""])
        lines += _table(["horizon", "mse", "mae", "cd_ratio"], rows)

    mask_bits = [f"{k}={fmt_metric(report.get(k))}" for k in ("cd_ratio", "alpha", "beta", "r_abs")
                 if report.get(k) is not None]
    if mask_bits:
        lines.append("")
        lines.append("Mask: " + "  ".join(mask_bits))

    if report.get("stats"):
        s = report["stats"]
        lines.append("")
        lines.append(f"Channels: {s['channels']}   Metric: {s['metric']}")
        lines.append(f"r(|R|) = {fmt_metric(s['r_abs'])}   r(R_bar) = {fmt_metric(s['r_bar'])}"
                     f"   r(M) = {fmt_metric(s.get('r_mask'))}")
        for w in s.get("warnings") or []:
            lines.append(f"  warning: {w}")

    if report.get("mcp"):
        lines.append("")
        lines.append("Masked channel prediction:")
        headers = list(report["mcp"][0])
        lines += _table(headers, [[_cell(r[h]) for h in headers] for r in report["mcp"]])

    if report.get("ablation"):
        lines.append("")
        lines.append("Ablation:")
        lines += _table(["mask", "composition", "mse", "mae", "cd_ratio"],
                        [[r["mask"], r["composition"], fmt_metric(r["mse"]), fmt_metric(r["mae"]),
                          fmt_metric(r["cd_ratio"])] for r in report["ablation"]])

    if report.get("robustness"):
        lines.append("")
        lines.append("Missing-value robustness:")
        lines += _table(["ratio", "r_abs", "mse", "mae"],
                        [[f"{r['ratio']:.2f}", fmt_metric(r["r_abs"]), fmt_metric(r["mse"]),
                          fmt_metric(r["mae"])] for r in report["robustness"]])

    if report.get("params"):
        p = report["params"]
        lines.append("")
        lines.append(f"Domain parameters ({p['strategy']}): alpha={fmt_metric(p['alpha'])} "
                     f"beta={fmt_metric(p['beta'])}")

    if report.get("gradcheck"):
        lines.append("")
        for name, err in report["gradcheck"].items():
            lines.append(f"grad check {name}: max relative error {err:.3e}")

    if report.get("history"):
        h = report["history"]
        lines.append("")
        lines.append(f"Best epoch: {h['best_epoch']} (selected on {h['selected_on']} loss)")

    lines.append("")
    return "\n".join(lines)


def render_json(report: Dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def write_report(out_dir: str, report: Dict) -> None:
    """report.json and report.txt under out_dir"""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        f.write(render_json(report) + "\n")
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(render_text(report))


def history_report(store: RunStore, dataset: Optional[str] = None) -> Dict:
    return {"runs": store.get_runs(dataset), "cd_gain": store.get_cd_gain(dataset)}


def render_history(history: Dict) -> str:
    lines = ["PCD Run History", "=" * 50]
    runs = history["runs"]
    if not runs:
        lines.append("No runs recorded.")
        return "\n".join(lines) + "\n"
    lines += _table(["dataset", "mode", "comp", "mask", "H", "seed", "mse", "mae", "cd_ratio"],
                    [[r["dataset"], r["mode"], r["composition"], r["mask_kind"], str(r["horizon"]),
                      str(r["seed"]), fmt_metric(r["mse"]), fmt_metric(r["mae"]),
                      fmt_metric(r["cd_ratio"])] for r in runs])
    if history["cd_gain"]:
        lines.append("")
        lines.append("Gain over CI:")
        lines += _table(["dataset", "H", "mode", "mask", "ci_mse", "mse", "gain", "cd_ratio", "r_abs"],
                        [[g["dataset"], str(g["horizon"]), g["mode"], g["mask_kind"],
                          fmt_metric(g["ci_mse"]), fmt_metric(g["other_mse"]), fmt_pct(g["gain"]),
                          fmt_metric(g["cd_ratio"]), fmt_metric(g["r_abs"])]
                         for g in history["cd_gain"]])
    lines.append("")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Show recorded PCD runs and CD gains")
    parser.add_argument("--dataset", type=str, default=None, help="Only this dataset")
    parser.add_argument("--json", action="store_true", help="Output as JSON")
    parser.add_argument("--config", type=str, default=None, help="Config file path")
    parser.add_argument("--storage", type=str, default=None, help="Storage directory")

    args = parser.parse_args(argv)
    config = load_config(args.config)
    store = get_store(config, args.storage)
    history = history_report(store, args.dataset)

    if args.json:
        print(render_json(history))
    else:
        print(render_history(history), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
