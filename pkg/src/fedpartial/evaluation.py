"""Prediction, per-organ scoring and report rows."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import segnet
from .losses import marginalize, softmax
from .metrics import dice, hd95

REPORT_FIELDS = ("experiment", "site", "organ", "dc", "hd95", "wall_time_s")
UNDEF = "undef"


@dataclass(frozen=True)
class ReportRow:
    experiment: str
    site: str
    organ: str
    dc: float
    hd95: float | None  # None: undefined
    wall_time_s: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.dc <= 1.0:
            raise ValueError(f"DC out of range: {self.dc}")
        # stored at table precision so CSV round-trips exactly
        object.__setattr__(self, "dc", round(float(self.dc), 3))
        if self.hd95 is not None:
            object.__setattr__(self, "hd95", round(float(self.hd95), 2))
        if self.wall_time_s is not None:
            object.__setattr__(self, "wall_time_s", round(float(self.wall_time_s), 2))


def predict(params, dataset, scheme=None, chunk: int = 8) -> np.ndarray:
    """Full-class label maps predicted in the site's label space.

    Probabilities are marginalised onto ``scheme`` (default: the dataset's)
    and the arg-max merged class is mapped back to its full class.
    """
    scheme = scheme or dataset.scheme
    lut = scheme.merged_to_full()
    out = []
    for start in range(0, len(dataset), chunk):
        x = dataset.inputs(slice(start, start + chunk))
        q = marginalize(softmax(segnet.forward(params, x)), scheme)
        out.append(lut[q.argmax(-1)])
    return np.concatenate(out).astype(np.uint8)


def score_organ(pred_maps, gt_maps, organ: int):
    dcs, hds = [], []
    for p, g in zip(pred_maps, gt_maps):
        dcs.append(dice(p == organ, g == organ))
        h = hd95(p == organ, g == organ)
        if h is not None:
            hds.append(h)
    return float(np.mean(dcs)), (float(np.mean(hds)) if hds else None)


def evaluate_site(params, site, split: str = "test", experiment: str = "", wall_time_s=None,
                  pred_maps=None) -> list[ReportRow]:
    """One row per organ the site annotates."""
    ds = site.split(split)
    if pred_maps is None:
        pred_maps = predict(params, ds)
    names = ds.scheme.space.class_names
    rows = []
    for organ in sorted(ds.scheme.labeled_foreground):
        dc, h = score_organ(pred_maps, ds.full_masks, organ)
        rows.append(ReportRow(experiment, site.site_id, names[organ], dc, h, wall_time_s))
    return rows


def mean_dc(rows) -> float:
    return float(np.mean([r.dc for r in rows]))


def mean_hd95(rows):
    vals = [r.hd95 for r in rows if r.hd95 is not None]
    return float(np.mean(vals)) if vals else None


def _fmt(value, digits):
    return UNDEF if value is None else f"{value:.{digits}f}"


def write_report_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in rows:
        wall = "" if r.wall_time_s is None else f"{r.wall_time_s:.2f}"
        w.writerow([r.experiment, r.site, r.organ, f"{r.dc:.3f}", _fmt(r.hd95, 2), wall])
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def read_report_csv(path_or_text) -> list[ReportRow]:
    text = path_or_text
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text()
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(ReportRow(
            rec["experiment"], rec["site"], rec["organ"], float(rec["dc"]),
            None if rec["hd95"] == UNDEF else float(rec["hd95"]),
            None if rec["wall_time_s"] == "" else float(rec["wall_time_s"]),
        ))
    return rows


def format_table(rows, title: str | None = None) -> str:
    """Aligned text table: DC to 3 decimals, HD95 to 2."""
    header = ("experiment", "site", "organ", "DC", "HD95", "time(s)")
    body = [
        (r.experiment, r.site, r.organ, f"{r.dc:.3f}", _fmt(r.hd95, 2),
         "" if r.wall_time_s is None else f"{r.wall_time_s:.1f}")
        for r in rows
    ]
    if rows:
        h = mean_hd95(rows)
        body.append(("mean", "", "", f"{mean_dc(rows):.3f}", _fmt(h, 2), ""))
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = [title] if title else []
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip())
    return "\n".join(lines)
