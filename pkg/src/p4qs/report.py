"""Privacy/performance report: stable serialization and rendered figures.

The report is a flat record with two nested tables (anonymity-set size
distribution and reject reasons).  Field order is fixed so CSV and JSON
output are byte-stable for a given report; golden files pin both formats.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def latency_summary(samples: list) -> dict:
    if not samples:
        return {"count": 0, "mean": 0.0, "p50": 0.0, "p95": 0.0, "max": 0.0}
    ordered = sorted(samples)
    n = len(ordered)

    def pct(p: float) -> float:
        return float(ordered[min(n - 1, int(p * n))])

    return {"count": n, "mean": sum(ordered) / n, "p50": pct(0.50),
            "p95": pct(0.95), "max": float(ordered[-1])}


@dataclass
class PrivacyReport:
    scenario: str = ""
    protocol: str = ""
    seed: int = 0
    peers: int = 0
    k: int = 0
    queries_scheduled: int = 0
    queries_sent: int = 0
    queries_completed: int = 0
    queries_failed: int = 0
    queries_deferred: int = 0
    retries: int = 0
    batches: int = 0
    batch_members_real: int = 0
    fakes: int = 0
    fakes_unticketed: int = 0
    collab_merges: int = 0
    reforwarded: int = 0
    non_delivery: int = 0
    anonymity_min: int = 0
    anonymity_mean: float = 0.0
    anonymity_distribution: dict = field(default_factory=dict)
    linkage_token_ledger: float = 0.0
    linkage_spatiotemporal: float = 0.0
    linkage_chance: float = 0.0
    sender_attribution: float = 0.0
    ownership_analytic: float | None = None
    ownership_empirical: float = 0.0
    speed_inference_success: float | None = None
    latency_count: int = 0
    latency_mean_ms: float = 0.0
    latency_p50_ms: float = 0.0
    latency_p95_ms: float = 0.0
    latency_max_ms: float = 0.0
    rejects: dict = field(default_factory=dict)
    messages_sent: int = 0
    messages_delivered: int = 0
    trace_hash: str = ""

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate_rates(self) -> None:
        for name in ("linkage_token_ledger", "linkage_spatiotemporal",
                     "linkage_chance", "sender_attribution",
                     "ownership_empirical"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"rate {name} out of [0,1]: {value}")
        for name in ("ownership_analytic", "speed_inference_success"):
            value = getattr(self, name)
            if value is not None and not (0.0 <= value <= 1.0):
                raise ValueError(f"rate {name} out of [0,1]: {value}")
        if self.anonymity_distribution:
            total = sum(self.anonymity_distribution.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"anonymity distribution sums to {total}")


def emit_report(report: PrivacyReport, fmt: str) -> bytes:
    """Serialize with a stable field order; fmt is 'json' or 'csv'."""
    report.validate_rates()
    data = report.to_dict()
    if fmt == "json":
        return (json.dumps(data, indent=2, allow_nan=False) + "\n").encode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        buf.write("field,value\n")
        for key, value in data.items():
            if isinstance(value, dict):
                for sub in sorted(value, key=_dist_key):
                    buf.write(f"{key}.{sub},{_csv_cell(value[sub])}\n")
            else:
                buf.write(f"{key},{_csv_cell(value)}\n")
        return buf.getvalue().encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


def _dist_key(key: str):
    return (0, int(key)) if key.isdigit() else (1, key)


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(report: PrivacyReport, path, fmt: str | None = None) -> Path:
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "json"
    payload = emit_report(report, fmt)  # serialize fully before touching disk
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    return path


# ---------------------------------------------------------------------------
# Figures


def render_figures(report: PrivacyReport, out_dir, stem: str = "report") -> list:
    """Render the report's headline charts as PNG files; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        _fig_anonymity(report, out / f"{stem}_anonymity.png"),
        _fig_latency(report, out / f"{stem}_latency.png"),
        _fig_linkage(report, out / f"{stem}_linkage.png"),
        _fig_rejects(report, out / f"{stem}_rejects.png"),
    ]
    return paths


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def _fig_anonymity(report: PrivacyReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    dist = report.anonymity_distribution
    if dist:
        keys = sorted(dist, key=_dist_key)
        ax.bar(keys, [dist[k] for k in keys], color="#4878cf")
    ax.axvline(-0.5, color="none")
    ax.set_xlabel("batch size (anonymity set)")
    ax.set_ylabel("fraction of batches")
    ax.set_title(f"{report.scenario or 'run'}: anonymity sets (K={report.k})")
    return _save(fig, path)


def _fig_latency(report: PrivacyReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = ["mean", "p50", "p95", "max"]
    values = [report.latency_mean_ms, report.latency_p50_ms,
              report.latency_p95_ms, report.latency_max_ms]
    ax.bar(labels, values, color="#6acc65")
    ax.set_ylabel("ms")
    ax.set_title(f"query completion latency (n={report.latency_count})")
    return _save(fig, path)


def _fig_linkage(report: PrivacyReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    labels = ["ledger", "spatiotemporal", "chance", "sender attr."]
    values = [report.linkage_token_ledger, report.linkage_spatiotemporal,
              report.linkage_chance, report.sender_attribution]
    if report.speed_inference_success is not None:
        labels.append("speed inf.")
        values.append(report.speed_inference_success)
    ax.bar(labels, values, color="#d65f5f")
    if report.ownership_analytic is not None:
        ax.axhline(report.ownership_analytic, ls="--", color="black", lw=1,
                   label="ownership (analytic)")
        ax.legend(fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy / rate")
    ax.set_title(f"linkage attacks ({report.protocol})")
    return _save(fig, path)


def _fig_rejects(report: PrivacyReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    rejects = report.rejects
    if rejects:
        keys = sorted(rejects)
        ax.bar(keys, [rejects[k] for k in keys], color="#956cb4")
        ax.tick_params(axis="x", labelrotation=20)
    ax.set_ylabel("count")
    ax.set_title("server-side rejections by reason")
    return _save(fig, path)
