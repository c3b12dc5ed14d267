"""Evaluation and training reports: JSON, plain-text table and PNG figures."""

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRIC_NAMES  # noqa: E402

REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


def format_table(reports):
    """Fixed-width table, one row per predictor, with excluded-image counts."""
    header = ["predictor"] + list(METRIC_NAMES) + ["n", "excluded(hd95/asd)"]
    rows = [header]
    for name, rep in reports.items():
        ex = rep.excluded
        rows.append([name] + [_fmt(rep.aggregate.get(m)) for m in METRIC_NAMES]
                    + [str(rep.n_images), f"{ex.get('hd95', 0)}/{ex.get('asd', 0)}"])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def metrics_figure(reports, path):
    names = list(reports)
    overlap = ["dice", "iou", "e_measure"]
    distance = ["hd95", "asd"]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    width = 0.8 / max(len(names), 1)
    for axis, metrics in ((ax1, overlap), (ax2, distance)):
        x = np.arange(len(metrics))
        for i, name in enumerate(names):
            vals = [reports[name].aggregate.get(m, float("nan")) for m in metrics]
            axis.bar(x + i * width, vals, width, label=name)
        axis.set_xticks(x + width * (len(names) - 1) / 2)
        axis.set_xticklabels(metrics)
        axis.spines["right"].set_visible(False)
        axis.spines["top"].set_visible(False)
    ax1.set_ylim(0, 1)
    ax1.set_ylabel("score")
    ax2.set_ylabel("pixels")
    ax1.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def samples_figure(images, masks, preds, path, n=4):
    """Image / ground truth / each predictor, for the first ``n`` 2D samples."""
    n = min(n, len(images))
    keys = [k for k in ("A", "B", "final") if k in preds]
    cols = 2 + len(keys)
    fig, axes = plt.subplots(n, cols, figsize=(1.8 * cols, 1.8 * n), squeeze=False)
    for r in range(n):
        img = images[r] if images[r].ndim == 2 else images[r][images[r].shape[0] // 2]
        panels = [("image", None), ("truth", masks[r])] + [(k, preds[k][r]) for k in keys]
        for c, (title, lab) in enumerate(panels):
            ax = axes[r, c]
            ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            if lab is not None:
                lab = lab if lab.ndim == 2 else lab[lab.shape[0] // 2]
                ax.contour(lab > 0, levels=[0.5], colors="r", linewidths=0.8)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_figure(records, path):
    keys = [k for k in ("L_total", "L_s_A", "L_s_B", "L_P", "L_f") if any(k in r for r in records)]
    fig, ax = plt.subplots(figsize=(6, 3.4))
    for k in keys:
        steps = [r["step"] for r in records if k in r]
        ax.plot(steps, [r[k] for r in records if k in r], lw=0.8, label=k)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report(reports, out_dir, dataset=None, preds=None, extra=None):
    """Write ``report.json``, ``report.txt`` and figures into ``out_dir``; return the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"predictors": {k: r.to_dict() for k, r in reports.items()},
               "exclusion_policy": "hd95/asd undefined when either mask is empty; such images are "
                                   "excluded from the mean and counted under 'excluded'"}
    if extra:
        payload.update(extra)
    paths = {"json": out / REPORT_JSON, "table": out / REPORT_TXT}
    paths["json"].write_text(json.dumps(_json_safe(payload), indent=1, sort_keys=True))
    paths["table"].write_text(format_table(reports))
    paths["metrics_png"] = metrics_figure(reports, out / "metrics.png")
    if dataset is not None and preds is not None:
        paths["samples_png"] = samples_figure(dataset.images, dataset.masks, preds, out / "samples.png")
    return paths
