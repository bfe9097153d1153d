"""Figures for transcript metrics, rendered straight to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def render_metrics(metrics: dict, path: str | Path, title: str = "") -> Path:
    """Per-relay inbound bytes beside per-transaction propagation latency."""
    per_relay = metrics.get("per_relay", {})
    latency = metrics.get("latency_ticks", {})
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    names = sorted(per_relay)
    left.bar(names, [per_relay[n]["bytes_in"] for n in names], color="#4a7ab5")
    left.set_ylabel("bytes received")
    left.set_title("relay load")
    left.tick_params(axis="x", rotation=45)
    txids = list(latency)
    right.bar(range(len(txids)), [latency[t] for t in txids], color="#c0703a")
    right.set_xticks(range(len(txids)), [t[:8] for t in txids], rotation=45)
    right.set_ylabel("ticks to full propagation")
    right.set_title("transaction latency")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
