"""Output files for experiment sweeps: JSONL round logs, CSV tables, PNG figures.

Every delimited file carries the resolved configuration so a result can be
traced back to the run that made it. Files are written to a temporary name
and renamed into place, so an interrupted sweep never leaves half a file.
Wall-clock timings are kept out of these files so identical runs produce
identical bytes.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

from lfshield.federation import ExperimentResult

SUMMARY_FIELDS = (
    "defense", "ratio", "rounds", "te", "all_acc", "src_acc", "asr",
    "cv", "cv_after_burn_in", "precision", "recall",
)
FIGURE_FIELDS = ("defense", "ratio", "round", "te_x10", "all_acc", "src_acc", "asr")
FEATURE_FIELDS = (
    "round", "peer", "attacker", "cluster", "flagged", "mode",
    "neuron1", "neuron2", "pc1", "pc2", "features",
)


def atomic_write(path, data: str | bytes) -> Path:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
    return path


def _clean(value):
    """JSON has no NaN; map it to null."""
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def cell_name(defense: str, ratio: float) -> str:
    return f"{defense}_r{ratio:.2f}"


def config_echo(cfg) -> dict:
    return cfg.to_dict()


def rounds_jsonl(result: ExperimentResult) -> str:
    """First line is the config, then one record per round."""
    lines = [json.dumps({"config": config_echo(result.config)}, sort_keys=True)]
    for report in result.reports:
        rec = {k: _clean(v) for k, v in report.to_record().items()}
        lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_text(header_comment: dict | None, fields, rows) -> str:
    buf = io.StringIO()
    if header_comment is not None:
        buf.write("# config=" + json.dumps(header_comment, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([_fmt(row.get(f)) for f in fields])
    return buf.getvalue()


def sweep_echo(results: list[ExperimentResult]) -> dict:
    """Shared configuration of a sweep; the swept keys are listed, not echoed per cell."""
    base = config_echo(results[0].config)
    base["defense"] = sorted({r.config.defense for r in results})
    base["ratio"] = sorted({r.config.ratio for r in results})
    return base


def summary_rows(results: list[ExperimentResult]) -> list[dict]:
    rows = []
    for r in results:
        s = r.summary()
        s.pop("defense_seconds")
        rows.append({"defense": r.config.defense, "ratio": r.config.ratio, **s})
    return rows


def summary_csv(results: list[ExperimentResult]) -> str:
    return _csv_text(sweep_echo(results), SUMMARY_FIELDS, summary_rows(results))


def figure_rows(results: list[ExperimentResult]) -> list[dict]:
    rows = []
    for r in results:
        for rep in r.reports:
            rows.append({
                "defense": r.config.defense,
                "ratio": r.config.ratio,
                "round": rep.round,
                "te_x10": rep.te * 10.0,
                "all_acc": rep.all_acc,
                "src_acc": rep.src_acc,
                "asr": rep.asr,
            })
    return rows


def figure_csv(results: list[ExperimentResult]) -> str:
    return _csv_text(sweep_echo(results), FIGURE_FIELDS, figure_rows(results))


def features_csv(result: ExperimentResult) -> str:
    rows = []
    for row in result.feature_rows:
        row = dict(row)
        row["features"] = " ".join(repr(float(v)) for v in row["features"])
        rows.append(row)
    return _csv_text(config_echo(result.config), FEATURE_FIELDS, rows)


def read_csv(path) -> tuple[dict | None, list[dict]]:
    """Inverse of the CSV writers: (config echo or None, rows as strings)."""
    text = Path(path).read_text(encoding="utf-8")
    echo = None
    if text.startswith("# config="):
        first, _, text = text.partition("\n")
        echo = json.loads(first[len("# config="):])
    return echo, list(csv.DictReader(io.StringIO(text)))


def write_sweep(results: list[ExperimentResult], out_dir, figures: bool = True) -> list[Path]:
    """Write every output of a sweep into ``out_dir``; returns the paths written."""
    out = Path(out_dir)
    written = []
    for r in results:
        name = cell_name(r.config.defense, r.config.ratio)
        written.append(atomic_write(out / "rounds" / f"{name}.jsonl", rounds_jsonl(r)))
        if r.config.dump_features:
            written.append(atomic_write(out / "features" / f"{name}.csv", features_csv(r)))
    written.append(atomic_write(out / "summary.csv", summary_csv(results)))
    written.append(atomic_write(out / "figure_data.csv", figure_csv(results)))
    if figures:
        written.extend(render_figures(out))
    return written


# -- figures ---------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path) -> Path:
    buf = io.BytesIO()
    # no timestamp or version in the metadata, so reruns give the same bytes
    fig.savefig(buf, format="png", dpi=120, bbox_inches="tight", metadata={"Software": None})
    return atomic_write(path, buf.getvalue())


def _num(s: str) -> float:
    return float(s) if s != "" else math.nan


def render_figures(out_dir) -> list[Path]:
    """Plots from summary.csv, figure_data.csv and any feature dumps in ``out_dir``."""
    plt = _pyplot()
    out = Path(out_dir)
    written = []
    _, summary = read_csv(out / "summary.csv")
    _, per_round = read_csv(out / "figure_data.csv")
    defenses = sorted({row["defense"] for row in summary})

    for metric, label in (("src_acc", "Src-Acc"), ("asr", "ASR"), ("all_acc", "All-Acc")):
        fig, ax = plt.subplots(figsize=(5.0, 3.5))
        for d in defenses:
            pts = sorted((float(r["ratio"]), _num(r[metric])) for r in summary if r["defense"] == d)
            ax.plot([p[0] * 100 for p in pts], [p[1] for p in pts], marker="o", label=d)
        ax.set_xlabel("attackers (%)")
        ax.set_ylabel(label + " (last 10 rounds)")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=7, ncol=2)
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
        written.append(_save(fig, out / "figures" / f"{metric}_vs_ratio.png"))
        plt.close(fig)

    cells = sorted({(r["defense"], float(r["ratio"])) for r in per_round})
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.5))
    for d, ratio in cells:
        rows = [r for r in per_round if r["defense"] == d and float(r["ratio"]) == ratio]
        t = [int(r["round"]) for r in rows]
        axes[0].plot(t, [_num(r["src_acc"]) for r in rows], label=cell_name(d, ratio))
        axes[1].plot(t, [_num(r["te_x10"]) for r in rows], label=cell_name(d, ratio))
    axes[0].set_ylabel("Src-Acc")
    axes[1].set_ylabel("TE x 10")
    for ax in axes:
        ax.set_xlabel("round")
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    if len(cells) <= 12:
        axes[0].legend(fontsize=6)
    written.append(_save(fig, out / "figures" / "rounds.png"))
    plt.close(fig)

    for path in sorted((out / "features").glob("*.csv")):
        written.append(_plot_pca(plt, path, out / "figures" / f"pca_{path.stem}.png"))
    return written


def _plot_pca(plt, csv_path: Path, png_path: Path) -> Path:
    """2-D projection of the last dumped round: circles honest, crosses attackers."""
    _, rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    if rows:
        last = max(int(r["round"]) for r in rows)
        rows = [r for r in rows if int(r["round"]) == last]
        for attacker, marker in (("0", "o"), ("1", "x")):
            sel = [r for r in rows if r["attacker"] == attacker]
            colors = ["tab:red" if r["flagged"] == "1" else "tab:blue" for r in sel]
            ax.scatter([float(r["pc1"]) for r in sel], [float(r["pc2"]) for r in sel],
                       c=colors, marker=marker, s=24)
        ax.set_title(f"{csv_path.stem}, round {last} (red = excluded)", fontsize=8)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    path = _save(fig, png_path)
    plt.close(fig)
    return path
