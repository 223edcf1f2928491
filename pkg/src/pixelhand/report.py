"""Report serialization: key=value summaries, CSV series, rendered figures.

Figures are rendered through the Agg backend with pinned metadata so repeated
runs produce byte-identical PNG files.
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_PNG_METADATA = {"Software": "pixelhand"}
_FIGSIZE = (6.0, 4.0)
_DPI = 100


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def format_eval_report(report) -> str:
    lines = [
        f"level={report.level}",
        f"images={report.n_images}",
        f"annotations={report.n_truths}",
        f"detections={report.n_detections}",
        f"ap={_fmt(report.ap)}",
        f"ar={_fmt(report.ar)}",
    ]
    return "\n".join(lines) + "\n"


def write_pr_csv(report, path) -> None:
    with open(path, "w") as f:
        f.write("cutoff,recall,precision\n")
        for cutoff, recall, precision in report.pr:
            f.write(f"{_fmt(cutoff)},{_fmt(recall)},{_fmt(precision)}\n")


def write_fppi_csv(report, path) -> None:
    with open(path, "w") as f:
        f.write("budget,recall\n")
        for budget, recall in report.fppi:
            f.write(f"{_fmt(budget)},{_fmt(recall)}\n")


def render_pr_curve(report, path) -> None:
    fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=_DPI)
    if report.pr:
        recalls = [p[1] for p in report.pr]
        precisions = [p[2] for p in report.pr]
        ax.plot(recalls, precisions, marker=".", linewidth=1.2)
    ax.set_xlim(0.0, 1.05)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"level {report.level}: AP {report.ap:.4f}")
    ax.grid(True, linewidth=0.3)
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def format_mot_report(report) -> str:
    lines = [
        f"mota={_fmt(report.mota)}",
        f"motp={_fmt(report.motp)}",
        f"recall={_fmt(report.recall)}",
        f"precision={_fmt(report.precision)}",
        f"mostly_tracked={_fmt(report.mt)}",
        f"mostly_lost={_fmt(report.ml)}",
        f"id_switches={report.ids}",
        f"fragmentations={report.frag}",
        f"gt_boxes={report.gt_count}",
        f"false_positives={report.fp}",
        f"misses={report.fn}",
        f"matches={report.matches}",
    ]
    return "\n".join(lines) + "\n"


def write_mot_timeline_csv(report, path) -> None:
    with open(path, "w") as f:
        f.write("frame,matches,false_positives,misses\n")
        for frame, matches, fp, fn in report.per_frame:
            f.write(f"{frame},{matches},{fp},{fn}\n")


def render_mot_timeline(report, path) -> None:
    fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=_DPI)
    if report.per_frame:
        frames = [r[0] for r in report.per_frame]
        for idx, label in ((1, "matches"), (2, "false positives"), (3, "misses")):
            ax.step(frames, [r[idx] for r in report.per_frame], where="mid", label=label)
    ax.set_xlabel("frame")
    ax.set_ylabel("count")
    ax.set_title(f"MOTA {report.mota:.4f}, {report.ids} id switches")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, linewidth=0.3)
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def format_loss_report(breakdown) -> str:
    lines = []
    for s, sl in enumerate(breakdown.scales):
        lines.append(f"scale{s}_score={_fmt(sl.l_sco)}")
        lines.append(f"scale{s}_rotation={_fmt(sl.l_rot)}")
        lines.append(f"scale{s}_distance={_fmt(sl.l_dis)}")
        lines.append(f"scale{s}_combined={_fmt(sl.l_s)}")
    lines.append(f"total={_fmt(breakdown.total)}")
    return "\n".join(lines) + "\n"


def write_loss_csv(breakdown, path) -> None:
    with open(path, "w") as f:
        f.write("scale,score,rotation,distance,combined\n")
        for s, sl in enumerate(breakdown.scales):
            f.write(f"{s},{_fmt(sl.l_sco)},{_fmt(sl.l_rot)},{_fmt(sl.l_dis)},{_fmt(sl.l_s)}\n")


def render_loss_chart(breakdown, path) -> None:
    fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=_DPI)
    n = len(breakdown.scales)
    xs = np.arange(n, dtype=np.float64)
    width = 0.25
    for off, (label, key) in enumerate(
        (("score", "l_sco"), ("rotation", "l_rot"), ("distance", "l_dis"))
    ):
        vals = [getattr(sl, key) for sl in breakdown.scales]
        ax.bar(xs + (off - 1) * width, vals, width=width, label=label)
    ax.set_xticks(xs)
    ax.set_xticklabels([f"scale {s}" for s in range(n)])
    ax.set_ylabel("loss term")
    ax.set_title(f"total {breakdown.total:.6f}")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, axis="y", linewidth=0.3)
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def write_pgm(values: np.ndarray, path) -> None:
    """8-bit binary portable graymap of a 2-D array; values clipped to [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"graymap needs a 2-D array, got shape {arr.shape}")
    pixels = np.clip(np.rint(np.clip(arr, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
