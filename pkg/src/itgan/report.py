"""JSON-lines run reports and plot-ready CSV rendering."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from pathlib import Path
from typing import Any, Iterable

import numpy as np

SUMMARY_FIELDS = ("method", "arch", "size_per_class", "seed_latent", "seed_train", "test_acc", "epochs")


class ReportError(ValueError):
    pass


class JsonLines:
    """Append-only event stream; every line is a self-contained JSON object."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict[str, Any]) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True, allow_nan=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ReportError(f"{path}:{n}: malformed JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise ReportError(f"{path}:{n}: expected a JSON object")
        out.append(rec)
    return out


def _csv(rows: Iterable[Iterable[Any]], header: Iterable[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def summary_csv(runs: list[dict]) -> str:
    return _csv(([r[k] for k in SUMMARY_FIELDS] for r in runs), SUMMARY_FIELDS)


def curves_csv(runs: list[dict]) -> str:
    rows = []
    for r in runs:
        c = r.get("curves") or {}
        for e, tr, te in zip(c.get("epoch", []), c.get("train_acc", []), c.get("test_acc", [])):
            rows.append((r["method"], r["arch"], r["size_per_class"], r["seed_latent"], r["seed_train"], e, tr, te))
    return _csv(rows, ("method", "arch", "size_per_class", "seed_latent", "seed_train", "epoch", "train_acc", "test_acc"))


def aggregate(runs: list[dict]) -> list[dict]:
    """Mean and population std of test accuracy per (method, arch, size)."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in runs:
        if r.get("error") is None:
            groups[(r["method"], r["arch"], r["size_per_class"])].append(float(r["test_acc"]))
    return [
        {"method": m, "arch": a, "size_per_class": s, "mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
        for (m, a, s), v in sorted(groups.items())
    ]


def render(run_dir: str | Path) -> dict[str, Path]:
    """Rebuild the per-figure CSVs of a finished run from its eval event stream.

    Writes ``report/curves_by_method.csv`` (epoch vs mean test accuracy per method and
    size) and ``report/accuracy_by_size.csv`` (one row per method and size). Output is
    a pure function of the input, so re-rendering overwrites byte-identically.
    """
    run_dir = Path(run_dir)
    src = run_dir / "eval" / "report.jsonl"
    if not src.exists():
        raise FileNotFoundError(str(src))
    runs = [r for r in read_jsonl(src) if r.get("event") == "run"]
    if not any((r.get("curves") or {}).get("epoch") for r in runs):
        raise ReportError(f"{src}: no learning curves recorded")
    curve_groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in runs:
        if r.get("error") is None and (r.get("curves") or {}).get("epoch"):
            curve_groups[(r["method"], r["arch"], r["size_per_class"])].append(r["curves"])
    rows = []
    for (m, a, s), cs in sorted(curve_groups.items()):
        for i, e in enumerate(cs[0]["epoch"]):
            rows.append((m, a, s, e, float(np.mean([c["test_acc"][i] for c in cs]))))
    agg = aggregate(runs)
    out_dir = run_dir / "report"
    out_dir.mkdir(exist_ok=True)
    files = {
        "curves": out_dir / "curves_by_method.csv",
        "sizes": out_dir / "accuracy_by_size.csv",
        "summary": out_dir / "summary.json",
    }
    files["curves"].write_text(_csv(rows, ("method", "arch", "size_per_class", "epoch", "mean_test_acc")))
    files["sizes"].write_text(
        _csv(((g["method"], g["arch"], g["size_per_class"], g["mean"], g["std"], g["n"]) for g in agg),
             ("method", "arch", "size_per_class", "mean", "std", "n"))
    )
    check = consistency(agg, run_dir / "eval" / "summary.json")
    files["summary"].write_text(json.dumps({"aggregates": agg, "consistency": check}, sort_keys=True, indent=1) + "\n")
    return files


def consistency(agg: list[dict], summary_path: Path, tol: float = 1e-9) -> dict:
    """Compare re-derived aggregates with the ones the eval stage stored."""
    if not summary_path.exists():
        return {"checked": False, "max_abs_diff": None, "ok": None}
    stored = {(g["method"], g["arch"], g["size_per_class"]): g for g in json.loads(summary_path.read_text())["aggregates"]}
    diff = 0.0
    for g in agg:
        s = stored.get((g["method"], g["arch"], g["size_per_class"]))
        if s is None:
            return {"checked": True, "max_abs_diff": None, "ok": False}
        diff = max(diff, abs(s["mean"] - g["mean"]), abs(s["std"] - g["std"]))
    return {"checked": True, "max_abs_diff": diff, "ok": diff <= tol and len(stored) == len(agg)}
