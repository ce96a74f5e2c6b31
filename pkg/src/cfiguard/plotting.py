"""Bar charts for the overhead report (PNG, headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import REFERENCE, OverheadReport  # noqa: E402


def plot_overheads(report: OverheadReport, out_dir: str | Path) -> list[Path]:
    """Write overhead_size.png and overhead_insns.png; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    apps = [r.app for r in report.rows]
    paths = []
    for fname, title, values, ref_index in (
        ("overhead_size.png", "Binary size overhead (%)", [r.size_pct for r in report.rows], 0),
        ("overhead_insns.png", "Executed-instruction overhead (%)", [r.insn_pct for r in report.rows], 1),
    ):
        refs = [REFERENCE.get(a, (0.0, 0.0))[ref_index] for a in apps]
        fig, ax = plt.subplots(figsize=(8, 4))
        xs = range(len(apps))
        ax.bar([x - 0.2 for x in xs], values, width=0.4, label="this toolchain")
        ax.bar([x + 0.2 for x in xs], refs, width=0.4, label="published (time in µs)" if ref_index else "published")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(apps, rotation=30, ha="right")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


__all__ = ["plot_overheads"]
