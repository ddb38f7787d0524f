"""Report figures: training loss curves and tuning grids."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no version or date strings, so figures are byte-stable across runs
_META = {"Software": None}


def _save(fig, path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def loss_curve(rows: list[dict], path: str | Path, title: str = "") -> None:
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for key, style in (("total", "-o"), ("main", "--"), ("multitask", ":"), ("aux", "-.")):
        vals = [float(r[key]) for r in rows]
        if key != "total" and not any(vals):
            continue
        ax.plot(epochs, vals, style, label=key, markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss per frame")
    ax.set_title(title)
    ax.legend(frameon=False)
    _save(fig, path)


def tuning_report(stage1: list[dict], stage2: list[dict], path: str | Path) -> None:
    """Stage-1 WER per grid point and stage-2 WER against the LM scale."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.4))
    if stage1:
        labels = [f"{r['prior_scale']}/{r['tdp_scale']}/{r['silence_exit']}" for r in stage1]
        a1.bar(range(len(stage1)), [float(r["wer"]) for r in stage1], color="0.6")
        a1.set_xticks(range(len(stage1)))
        a1.set_xticklabels(labels, rotation=90, fontsize=7)
        a1.set_xlabel("prior / tdp scale / silence exit")
    else:
        a1.text(0.5, 0.5, "single grid point", ha="center", va="center", transform=a1.transAxes)
    a1.set_ylabel("dev WER [%]")
    a1.set_title("stage 1")
    a2.plot([float(r["lm_scale"]) for r in stage2], [float(r["wer"]) for r in stage2], "-o", markersize=3)
    a2.set_xlabel("LM scale")
    a2.set_ylabel("dev WER [%]")
    a2.set_title("stage 2 (lattice rescoring)")
    _save(fig, path)
