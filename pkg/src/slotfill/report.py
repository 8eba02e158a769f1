"""Report files: tab-separated tables with rendered figures beside them.

Each writer emits one .tsv and one .png under the same stem so a run's
numbers and their picture always travel together. The Agg backend keeps
rendering headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import EvalReport  # noqa: E402


def _finish(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_training_report(result, out_dir, stem: str = "training") -> list[Path]:
    """Metrics table plus loss and dev-F1 curves for one training run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = out_dir / f"{stem}.tsv"
    png = out_dir / f"{stem}.png"
    tsv.write_text(result.metrics_log(), encoding="utf-8")

    history = result.history
    epochs = [s.epoch for s in history]
    fig, (ax_loss, ax_f1) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [s.l_bdy for s in history], label="boundary")
    ax_loss.plot(epochs, [s.l_typ for s in history], label="typing")
    ax_loss.plot(epochs, [s.l_ctr for s in history], label="contrastive")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean loss")
    ax_loss.legend()
    ax_f1.plot(epochs, [s.dev_f1 for s in history], marker="o")
    ax_f1.set_xlabel("epoch")
    ax_f1.set_ylabel("dev span F1")
    ax_f1.set_ylim(0.0, 1.05)
    _finish(fig, png)
    return [tsv, png]


def write_eval_report(report: EvalReport, out_dir, stem: str = "eval") -> list[Path]:
    """Span-F1 table plus per-label and seen/unseen bar charts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = out_dir / f"{stem}.tsv"
    png = out_dir / f"{stem}.png"
    tsv.write_text(report.to_tsv(), encoding="utf-8")

    fig, (ax_lab, ax_grp) = plt.subplots(1, 2, figsize=(10, 3.8))
    labels = sorted(report.per_label)
    ax_lab.bar(range(len(labels)), [report.per_label[l].f1 for l in labels])
    ax_lab.set_xticks(range(len(labels)))
    ax_lab.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax_lab.set_ylabel("span F1")
    ax_lab.set_ylim(0.0, 1.05)
    ax_lab.set_title("per label")

    groups = [("overall", report.f1)]
    for name, g in (("seen", report.seen), ("unseen", report.unseen),
                    ("seen uttr", report.seen_uttr),
                    ("unseen uttr", report.unseen_uttr)):
        if g is not None:
            groups.append((name, g.f1))
    ax_grp.bar(range(len(groups)), [f for _, f in groups],
               color="tab:orange")
    ax_grp.set_xticks(range(len(groups)))
    ax_grp.set_xticklabels([n for n, _ in groups], rotation=30, ha="right",
                           fontsize=8)
    ax_grp.set_ylim(0.0, 1.05)
    ax_grp.set_title("groups")
    _finish(fig, png)
    return [tsv, png]


def write_benchmark_report(timings: dict[str, float], out_dir,
                           stem: str = "benchmark") -> list[Path]:
    """Decode latency per mode, with the batched speedup called out."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = out_dir / f"{stem}.tsv"
    png = out_dir / f"{stem}.png"

    lines = ["mode\tseconds"]
    for mode in sorted(timings):
        lines.append(f"{mode}\t{timings[mode]:.6f}")
    if "batched" in timings and "instance-wise" in timings and timings["batched"] > 0:
        speedup = timings["instance-wise"] / timings["batched"]
        lines.append(f"speedup\t{speedup:.3f}")
    tsv.write_text("\n".join(lines) + "\n", encoding="utf-8")

    modes = sorted(timings)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(range(len(modes)), [timings[m] for m in modes], color="tab:green")
    ax.set_xticks(range(len(modes)))
    ax.set_xticklabels(modes)
    ax.set_ylabel("median seconds")
    _finish(fig, png)
    return [tsv, png]
