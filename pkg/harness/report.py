# harness/report.py
"""
Evaluation reports and their csv / markdown / json renderings.

Markdown renders the comparison report as a method-block table with a
Par. Red.(%) column, plus a gains table whose cells read like "0.827 (+4.2%)".
"""

from __future__ import annotations

import csv
import io
import json
import os
import statistics
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from utils.logger import get_logger  # noqa: E402

log = get_logger(__name__)

METRICS = ("precision", "recall", "iou", "f1")
METRIC_LABELS = {"precision": "P", "recall": "R", "iou": "IoU", "f1": "F1"}
FORMATS = ("csv", "md", "markdown", "json")


@dataclass
class ReportRow:
    network: str
    setting: str
    method: str
    seed: Optional[int] = None
    params_M: Optional[float] = None
    loss: Optional[float] = None
    precision: float = 0.0
    recall: float = 0.0
    iou: float = 0.0
    f1: float = 0.0
    macro_precision: Optional[float] = None
    macro_recall: Optional[float] = None
    macro_iou: Optional[float] = None
    macro_f1: Optional[float] = None
    ms_per_iter: Optional[float] = None
    best_epoch: Optional[int] = None
    par_red_pct: Optional[float] = None
    use_attention: Optional[bool] = None
    optimizer: Optional[str] = None
    loss_name: Optional[str] = None
    stratum: Optional[str] = None
    gsd_cm: Optional[int] = None
    tiles: Optional[int] = None
    counts: Optional[Dict[str, int]] = None
    strata_f1: Optional[Dict[str, float]] = None     # pooled F1 per height stratum of the eval split
    ranks: Dict[str, int] = field(default_factory=dict)
    record_hash: Optional[str] = None


@dataclass
class GainRow:
    network: str
    setting: str
    metric: str
    baseline: float
    sda: float
    gain_pct: Optional[float]


@dataclass
class EvalReport:
    title: str
    kind: str                                   # "hparam", "bench", "compare", "stratified", "eval"
    rows: List[ReportRow] = field(default_factory=list)
    gains: List[GainRow] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            title=data["title"],
            kind=data["kind"],
            rows=[ReportRow(**r) for r in data.get("rows", [])],
            gains=[GainRow(**g) for g in data.get("gains", [])],
            provenance=data.get("provenance", {}),
        )

    @classmethod
    def load(cls, path) -> "EvalReport":
        with Path(path).open("r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def select(self, **match) -> List[ReportRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]


# ---- Aggregation ------------------------------------------------------------


def median_rows(rows: Sequence[ReportRow], keys=("method", "network", "setting")) -> List[ReportRow]:
    """Collapse seeds: one row per key with the median of every numeric column."""
    groups: "OrderedDict[Tuple, List[ReportRow]]" = OrderedDict()
    for r in rows:
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r)

    def med(values, low=False):
        values = [v for v in values if v is not None]
        if not values:
            return None
        return statistics.median_low(values) if low else float(statistics.median(values))

    def med_strata(maps):
        maps = [m for m in maps if m]
        if not maps:
            return None
        keys = list(OrderedDict.fromkeys(k for m in maps for k in m))
        return {k: med([m.get(k) for m in maps]) for k in keys}

    out = []
    for group in groups.values():
        first = group[0]
        out.append(
            ReportRow(
                network=first.network,
                setting=first.setting,
                method=first.method,
                seed=None if len(group) > 1 else first.seed,
                params_M=first.params_M,
                loss=med([r.loss for r in group]),
                precision=med([r.precision for r in group]),
                recall=med([r.recall for r in group]),
                iou=med([r.iou for r in group]),
                f1=med([r.f1 for r in group]),
                macro_precision=med([r.macro_precision for r in group]),
                macro_recall=med([r.macro_recall for r in group]),
                macro_iou=med([r.macro_iou for r in group]),
                macro_f1=med([r.macro_f1 for r in group]),
                ms_per_iter=med([r.ms_per_iter for r in group]),
                best_epoch=med([r.best_epoch for r in group], low=True),
                par_red_pct=first.par_red_pct,
                use_attention=first.use_attention,
                optimizer=first.optimizer,
                loss_name=first.loss_name,
                stratum=first.stratum,
                gsd_cm=first.gsd_cm,
                tiles=first.tiles,
                strata_f1=med_strata([r.strata_f1 for r in group]),
                record_hash=first.record_hash if len(group) == 1 else None,
            )
        )
    return out


def gain_pct(baseline: float, value: float) -> Optional[float]:
    if not baseline:
        return None
    return (value - baseline) / baseline * 100.0


def fmt_gain(value: float, gain: Optional[float]) -> str:
    if gain is None:
        return f"{value:.3f} (n/a)"
    return f"{value:.3f} ({gain:+.1f}%)"


# ---- Cell formatting --------------------------------------------------------


def _f3(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def _f1(v) -> str:
    return "-" if v is None else f"{v:.1f}"


def _int(v) -> str:
    return "-" if v is None else str(int(v))


def _text(v) -> str:
    return "-" if v is None else str(v)


Column = Tuple[str, str, Callable]

COLUMNS: Dict[str, List[Column]] = {
    "hparam": [
        ("Network", "network", _text),
        ("Optimizer", "optimizer", _text),
        ("Loss fn", "loss_name", _text),
        ("Loss", "loss", _f3),
        ("P", "precision", _f3),
        ("R", "recall", _f3),
        ("IoU", "iou", _f3),
        ("F1", "f1", _f3),
        ("ms/it", "ms_per_iter", _f1),
        ("Ep", "best_epoch", _int),
    ],
    "bench": [
        ("Network", "network", _text),
        ("Par.(M)", "params_M", _f3),
        ("Loss", "loss", _f3),
        ("P", "precision", _f3),
        ("R", "recall", _f3),
        ("IoU", "iou", _f3),
        ("F1", "f1", _f3),
        ("ms/it", "ms_per_iter", _f1),
        ("Ep", "best_epoch", _int),
    ],
    "compare": [
        ("Method", "method", _text),
        ("Network", "network", _text),
        ("Setting", "setting", _text),
        ("Par.(M)", "params_M", _f3),
        ("Loss", "loss", _f3),
        ("P", "precision", _f3),
        ("R", "recall", _f3),
        ("IoU", "iou", _f3),
        ("F1", "f1", _f3),
        ("ms/it", "ms_per_iter", _f1),
        ("Ep", "best_epoch", _int),
        ("Par. Red.(%)", "par_red_pct", _f1),
    ],
    "stratified": [
        ("Network", "network", _text),
        ("Stratum", "stratum", _text),
        ("GSD (cm)", "gsd_cm", _int),
        ("Tiles", "tiles", _int),
        ("P", "precision", _f3),
        ("R", "recall", _f3),
        ("IoU", "iou", _f3),
        ("F1", "f1", _f3),
        ("macro F1", "macro_f1", _f3),
    ],
    "eval": [
        ("Network", "network", _text),
        ("Setting", "setting", _text),
        ("Loss", "loss", _f3),
        ("P", "precision", _f3),
        ("R", "recall", _f3),
        ("IoU", "iou", _f3),
        ("F1", "f1", _f3),
        ("macro P", "macro_precision", _f3),
        ("macro R", "macro_recall", _f3),
        ("macro IoU", "macro_iou", _f3),
        ("macro F1", "macro_f1", _f3),
    ],
}


def _md_table(rows: Sequence[ReportRow], columns: List[Column], bold_max: bool, group_by: Optional[str] = None) -> str:
    """Bold marks the per-column metric maxima, taken within each `group_by` value when given."""
    best: Dict[Tuple, float] = {}
    if bold_max:
        for r in rows:
            group = getattr(r, group_by) if group_by else None
            for _, attr, _fmt in columns:
                value = getattr(r, attr)
                if attr in METRICS and value is not None:
                    key = (group, attr)
                    best[key] = max(best.get(key, value), value)
    lines = [
        "| " + " | ".join(h for h, _, _ in columns) + " |",
        "|" + "|".join("---" for _ in columns) + "|",
    ]
    for r in rows:
        cells = []
        for _, attr, fmt in columns:
            value = getattr(r, attr)
            text = fmt(value)
            group = getattr(r, group_by) if group_by else None
            if (group, attr) in best and value == best[(group, attr)]:
                text = f"**{text}**"
            if attr in r.ranks:
                text = f"{text}<sup>{r.ranks[attr]}</sup>"
            cells.append(text)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


METHOD_ORDER = ("pretrain", "baseline", "sda", "kd", "dml")


def comparison_markdown(report: EvalReport) -> str:
    """
    Method blocks x settings, seed medians, '-' where Par. Red. is undefined.
    Metric maxima are bolded within each setting.
    """
    rows = median_rows(report.rows)
    rows.sort(key=lambda r: METHOD_ORDER.index(r.method) if r.method in METHOD_ORDER else len(METHOD_ORDER))
    return _md_table(rows, COLUMNS["compare"], bold_max=True, group_by="setting")


def gains_markdown(report: EvalReport) -> str:
    """SDA against the same network trained without SDA, per setting."""
    cells: "OrderedDict[Tuple[str, str], Dict[str, str]]" = OrderedDict()
    for g in report.gains:
        cells.setdefault((g.network, g.setting), {})[g.metric] = fmt_gain(g.sda, g.gain_pct)
    header = "| Network | Setting | " + " | ".join(METRIC_LABELS[m] for m in METRICS) + " |"
    lines = [header, "|" + "|".join("---" for _ in range(2 + len(METRICS))) + "|"]
    for (network, setting), by_metric in cells.items():
        values = [by_metric.get(m, "-") for m in METRICS]
        lines.append(f"| {network} | {setting} | " + " | ".join(values) + " |")
    return "\n".join(lines) + "\n"


def to_markdown(report: EvalReport) -> str:
    parts = [f"# {report.title}\n"]
    if report.kind == "compare":
        parts.append("\n## Knowledge transfer comparison\n\n" + comparison_markdown(report))
        if report.gains:
            parts.append("\n## SDA gains over the baseline\n\n" + gains_markdown(report))
    else:
        columns = COLUMNS.get(report.kind, COLUMNS["eval"])
        parts.append("\n" + _md_table(report.rows, columns, bold_max=True))
    return "".join(parts)


CSV_SKIP = ("counts", "strata_f1", "ranks")


def to_csv(report: EvalReport) -> str:
    columns = [f.name for f in fields(ReportRow) if f.name not in CSV_SKIP]
    names = columns + ["tp", "fp", "fn", "tn", "ranks"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(names)
    for r in report.rows:
        d = asdict(r)
        counts = d.pop("counts") or {}
        ranks = d.pop("ranks") or {}
        values = ["" if d[n] is None else d[n] for n in columns]
        values += [counts.get(k, "") for k in ("tp", "fp", "fn", "tn")]
        values.append(";".join(f"{k}={v}" for k, v in sorted(ranks.items())))
        writer.writerow(values)
    return buf.getvalue()


def to_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


# ---- Plots ------------------------------------------------------------------


def _plot_groups(report: EvalReport) -> "OrderedDict[str, List[float]]":
    groups: "OrderedDict[str, List[float]]" = OrderedDict()
    for r in median_rows(report.rows, keys=("method", "network", "setting", "stratum", "gsd_cm")):
        label = "/".join(str(x) for x in (r.method, r.network, r.setting, r.stratum, r.gsd_cm) if x is not None)
        groups[label] = [getattr(r, m) for m in METRICS]
    return groups


def plot_summary(report: EvalReport, out_dir) -> List[Path]:
    """Grouped bar chart and spider chart of P / R / IoU / F1 per row group."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = _plot_groups(report)
    if not groups:
        log.warning("Report %s has no rows to plot", report.title)
        return []
    labels = [METRIC_LABELS[m] for m in METRICS]

    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(groups)), 4))
    width = 0.8 / len(groups)
    x = np.arange(len(METRICS))
    for k, (name, values) in enumerate(groups.items()):
        ax.bar(x + k * width - 0.4 + width / 2, values, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1)
    ax.set_title(report.title)
    ax.legend(fontsize="small", loc="lower right")
    bar_path = out_dir / "summary_bar.png"
    fig.tight_layout()
    fig.savefig(bar_path, dpi=120)
    plt.close(fig)

    angles = np.linspace(0, 2 * np.pi, len(METRICS), endpoint=False).tolist()
    fig = plt.figure(figsize=(5, 5))
    ax = fig.add_subplot(111, polar=True)
    for name, values in groups.items():
        ax.plot(angles + angles[:1], values + values[:1], label=name)
        ax.fill(angles + angles[:1], values + values[:1], alpha=0.1)
    ax.set_xticks(angles)
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1)
    ax.set_title(report.title)
    ax.legend(fontsize="small", loc="upper right", bbox_to_anchor=(1.3, 1.1))
    spider_path = out_dir / "summary_spider.png"
    fig.tight_layout()
    fig.savefig(spider_path, dpi=120)
    plt.close(fig)
    return [bar_path, spider_path]


# ---- Emit -------------------------------------------------------------------


def emit_report(report: EvalReport, path, fmt: str = "md", plot: bool = False) -> Path:
    """Write the report in one format; the same report always gives the same bytes."""
    fmt = fmt.lower()
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got '{fmt}'")
    if fmt == "csv":
        text = to_csv(report)
    elif fmt == "json":
        text = to_json(report)
    else:
        text = to_markdown(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)
    if plot:
        plot_summary(report, path.parent)
    return path
