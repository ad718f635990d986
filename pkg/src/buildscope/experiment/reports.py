"""CSV tables and SVG box plots from a run manifest.

Output bytes depend only on the manifest: floats are written with ``repr``
and the SVG writer runs with a fixed hash salt and no date stamp.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..errors import BuildscopeError  # noqa: E402
from .grid import RunManifest  # noqa: E402
from .stats import QUARTILE_METHOD, box_stats, per_scene_model_means  # noqa: E402

METRICS = (("clip", "clip_pct", "CLIP score (%)"),
           ("blip", "blip_pct", "BLIP score (%)"),
           ("pac", "pac_pct", "PAC score (%)"))
SCORES_HEADER = ["scene", "model", "iteration", "asset_id", "clip_pct", "blip_pct", "pac_pct"]
SUMMARY_HEADER = ["model", "metric", "n", "min", "q1", "median", "q3", "max", "mean", "iqr",
                  "lower_whisker", "upper_whisker", "n_outliers", "outliers",
                  "quartile_method"]
MEAN_COLOR = "green"

_RC = {"svg.hashsalt": "buildscope", "svg.fonttype": "path", "font.family": "DejaVu Sans",
       "figure.dpi": 100, "path.simplify": False}


class ReportError(BuildscopeError):
    pass


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("utf-8")


def scores_rows(manifest: RunManifest):
    for cell in manifest.cells:
        if cell.status != "ok":
            continue
        for t in cell.scored:
            yield [cell.scene, cell.model, cell.iteration, t.asset_id,
                   _num(t.clip_pct), _num(t.blip_pct), _num(t.pac_pct)]


def metric_samples(manifest: RunManifest, attr: str) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {m: [] for m in manifest.model_labels}
    for cell in manifest.cells:
        if cell.status == "ok":
            out.setdefault(cell.model, []).extend(getattr(t, attr) for t in cell.scored)
    return out


def summary_rows(manifest: RunManifest):
    for metric, attr, _ in METRICS:
        for model, xs in metric_samples(manifest, attr).items():
            if not xs:
                continue
            b = box_stats(xs)
            yield [model, metric, b.n, _num(b.min), _num(b.q1), _num(b.median), _num(b.q3),
                   _num(b.max), _num(b.mean), _num(b.iqr), _num(b.lower_whisker),
                   _num(b.upper_whisker), len(b.outliers), " ".join(map(_num, b.outliers)),
                   QUARTILE_METHOD]


def means_rows(manifest: RunManifest):
    table = per_scene_model_means(manifest)
    for scene, vals in table.rows():
        yield [scene, *(_num(v) for v in vals)]


def _svg_bytes(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": "buildscope"})
    plt.close(fig)
    return buf.getvalue()


def box_plot_svg(samples: dict[str, list[float]], ylabel: str) -> bytes:
    labels = [m for m, xs in samples.items() if xs]
    stats = []
    for m in labels:
        b = box_stats(samples[m])
        stats.append({"label": m, "med": b.median, "q1": b.q1, "q3": b.q3, "mean": b.mean,
                      "whislo": b.lower_whisker, "whishi": b.upper_whisker,
                      "fliers": list(b.outliers)})
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        ax.bxp(stats, showmeans=True,
               meanprops={"marker": "^", "markerfacecolor": MEAN_COLOR,
                          "markeredgecolor": MEAN_COLOR},
               flierprops={"marker": "o", "markersize": 4})
        ax.set_ylabel(ylabel)
        ax.tick_params(axis="x", labelrotation=15)
        fig.tight_layout()
        return _svg_bytes(fig)


def means_plot_svg(manifest: RunManifest) -> bytes:
    table = per_scene_model_means(manifest)
    n_models = max(1, len(table.models))
    width = 0.8 / n_models
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7.2, 4.0))
        for j, model in enumerate(table.models):
            xs, ys = [], []
            for k, scene in enumerate(table.scenes):
                v = table.get(scene, model)
                if v is not None:
                    xs.append(k - 0.4 + width * (j + 0.5))
                    ys.append(v)
            ax.bar(xs, ys, width, label=model)
        ax.set_xticks(range(len(table.scenes)), table.scenes, rotation=20, ha="right")
        ax.set_ylabel("mean CLIP score (%)")
        ax.legend(fontsize="small")
        fig.tight_layout()
        return _svg_bytes(fig)


def emit_reports(manifest: RunManifest, out_dir, plots: bool = True) -> list[Path]:
    """Write scores/summary/means CSVs and, when there is data, SVG plots."""
    manifest.check()
    out_dir = Path(out_dir)
    files: dict[str, bytes] = {
        "scores.csv": _csv_bytes(SCORES_HEADER, scores_rows(manifest)),
        "summary.csv": _csv_bytes(SUMMARY_HEADER, summary_rows(manifest)),
        "means.csv": _csv_bytes(["scene", *manifest.model_labels], means_rows(manifest)),
    }
    if plots and manifest.totals["triplets"] > 0:
        for metric, attr, label in METRICS:
            files[f"{metric}.svg"] = box_plot_svg(metric_samples(manifest, attr), label)
        files["means.svg"] = means_plot_svg(manifest)
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, data in files.items():
            path = out_dir / name
            path.write_bytes(data)
            written.append(path)
    except OSError as exc:
        raise ReportError(f"cannot write reports to {out_dir}: {exc}") from exc
    return written
