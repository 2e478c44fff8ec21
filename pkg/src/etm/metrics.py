"""Segmentation metrics and continual-adaptation bookkeeping (forgetting, gain, tables)."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

CSV_COLUMNS = ("method", "eval_domain", "miou", "fgt", "mean_miou", "gain")


def confusion_matrix(pred, label, num_classes: int, ignore: int = 255) -> np.ndarray:
    """``M[a, b]`` counts pixels with label ``a`` predicted as ``b``."""
    pred = np.asarray(pred).astype(np.int64).reshape(-1)
    label = np.asarray(label).astype(np.int64).reshape(-1)
    if pred.shape != label.shape:
        raise ValueError("prediction and label maps differ in size")
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise ValueError(f"prediction values must lie in [0, {num_classes})")
    keep = label != ignore
    pred, label = pred[keep], label[keep]
    if label.size and (label.min() < 0 or label.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes}) or equal {ignore}")
    counts = np.bincount(label * num_classes + pred, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def miou(matrix, present_only: bool = True) -> Tuple[List[float], float]:
    """Per-class IoU and their mean.

    With ``present_only`` classes whose union is empty are reported as NaN and
    left out of the mean; otherwise they count as IoU 0.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if (m < 0).any():
        raise ValueError("confusion matrix has negative counts")
    inter = np.diag(m)
    union = m.sum(axis=0) + m.sum(axis=1) - inter
    present = union > 0
    if present_only and not present.any():
        raise ValueError("no class is present in either prediction or label")
    iou = np.where(present, inter / np.where(present, union, 1.0), np.nan if present_only else 0.0)
    per_class = [float(v) for v in iou]
    values = iou[present] if present_only else iou
    return per_class, float(values.mean())


@dataclass
class RunHistory:
    """mIoU per (checkpoint after target ``j``, evaluated target ``d``); indices start at 1."""

    domain_names: List[str]
    entries: Dict[Tuple[int, int], float] = field(default_factory=dict)
    source_only_mean: Optional[float] = None
    method: Optional[str] = None
    config_hash: Optional[str] = None

    def record(self, checkpoint: int, domain: int, value: float) -> None:
        if not 1 <= domain <= checkpoint <= len(self.domain_names):
            raise ValueError(f"invalid cell (checkpoint {checkpoint}, domain {domain})")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"mIoU {value} outside [0, 1]")
        self.entries[(checkpoint, domain)] = float(value)

    @property
    def final(self) -> int:
        return len(self.domain_names)

    def index(self, name: str) -> int:
        return self.domain_names.index(name) + 1

    def missing(self) -> List[Tuple[int, int]]:
        t = self.final
        cells = {(t, d) for d in range(1, t + 1)} | {(d, d) for d in range(1, t + 1)}
        return sorted(c for c in cells if c not in self.entries)

    def to_json(self) -> dict:
        return {
            "domain_names": list(self.domain_names),
            "entries": [[j, d, v] for (j, d), v in sorted(self.entries.items())],
            "source_only_mean": self.source_only_mean,
            "method": self.method,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunHistory":
        h = cls(list(obj["domain_names"]), source_only_mean=obj.get("source_only_mean"),
                method=obj.get("method"), config_hash=obj.get("config_hash"))
        for j, d, v in obj["entries"]:
            h.entries[(int(j), int(d))] = float(v)
        return h


def _cell(h: RunHistory, checkpoint: int, domain: int) -> float:
    try:
        return h.entries[(checkpoint, domain)]
    except KeyError:
        raise KeyError(f"history has no mIoU for checkpoint {checkpoint}, domain {domain}") from None


def _domain(h: RunHistory, d) -> int:
    return h.index(d) if isinstance(d, str) else int(d)


def forgetting(h: RunHistory, d, final=None) -> float:
    """mIoU on ``d`` at the final checkpoint minus mIoU right after adapting to ``d``."""
    d = _domain(h, d)
    final = h.final if final is None else _domain(h, final)
    return _cell(h, final, d) - _cell(h, d, d)


def mean_miou(h: RunHistory) -> float:
    t = h.final
    return float(np.mean([_cell(h, t, d) for d in range(1, t + 1)]))


def gain(h: RunHistory) -> float:
    if h.source_only_mean is None:
        raise ValueError("history has no source-only baseline")
    return mean_miou(h) - h.source_only_mean


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _signed_pct(x: float) -> str:
    return f"{100.0 * x:+.2f}"


def format_row(h: RunHistory) -> str:
    missing = h.missing()
    if missing:
        raise ValueError("incomplete history, missing cells: "
                         + ", ".join(f"(checkpoint {j}, domain {d})" for j, d in missing))
    t = h.final
    cells = []
    for d, name in enumerate(h.domain_names, start=1):
        text = f"{name}: {_pct(_cell(h, t, d))}"
        if d < t:
            text += f" ({_signed_pct(forgetting(h, d))})"
        cells.append(text)
    cells.append(f"Mean {_pct(mean_miou(h))}")
    cells.append(f"Gain {_signed_pct(gain(h))}" if h.source_only_mean is not None else "Gain -")
    return " | ".join(cells)


def emit_table(h: RunHistory, format: str = "text") -> str:
    """Render one method's results: a text row or CSV with ``CSV_COLUMNS``."""
    if format == "text":
        row = format_row(h)
        return f"{h.method}: {row}" if h.method else row
    if format != "csv":
        raise ValueError(f"unknown table format {format!r}")
    format_row(h)  # completeness check
    buf = io.StringIO()
    if h.config_hash:
        buf.write(f"# config_hash={h.config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    t = h.final
    mean = mean_miou(h)
    g = gain(h) if h.source_only_mean is not None else None
    for d, name in enumerate(h.domain_names, start=1):
        fgt = forgetting(h, d) if d < t else None
        writer.writerow([h.method or "", name, repr(_cell(h, t, d)),
                         "" if fgt is None else repr(fgt), repr(mean),
                         "" if g is None else repr(g)])
    return buf.getvalue()


class HistoryCsvError(ValueError):
    pass


def parse_history_csv(text: str) -> RunHistory:
    """Rebuild the table-level content of a history from its CSV rendering."""
    config_hash = None
    lines = []
    for raw in text.splitlines():
        if raw.startswith("#"):
            if raw.startswith("# config_hash="):
                config_hash = raw.split("=", 1)[1].strip()
            lines.append(None)
        else:
            lines.append(raw)
    rows = [(n, r) for n, r in enumerate(lines, start=1) if r is not None and r.strip()]
    if not rows:
        raise HistoryCsvError("empty history file")
    header_no, header = rows[0]
    if tuple(next(csv.reader([header]))) != CSV_COLUMNS:
        raise HistoryCsvError(f"row {header_no}: expected header {','.join(CSV_COLUMNS)}")
    parsed = []
    for n, r in rows[1:]:
        fields = next(csv.reader([r]))
        if len(fields) != len(CSV_COLUMNS):
            raise HistoryCsvError(f"row {n}: expected {len(CSV_COLUMNS)} fields, got {len(fields)}")
        try:
            method, name = fields[0], fields[1]
            value = float(fields[2])
            fgt = float(fields[3]) if fields[3] else None
            mean = float(fields[4])
            g = float(fields[5]) if fields[5] else None
        except ValueError as exc:
            raise HistoryCsvError(f"row {n}: {exc}") from None
        if not all(math.isfinite(v) for v in (value, mean) + tuple(x for x in (fgt, g) if x is not None)):
            raise HistoryCsvError(f"row {n}: non-finite value")
        parsed.append((n, method, name, value, fgt, mean, g))
    if not parsed:
        raise HistoryCsvError("history file has a header but no rows")
    names = [p[2] for p in parsed]
    h = RunHistory(names, method=parsed[0][1] or None, config_hash=config_hash)
    t = len(names)
    for d, (n, method, name, value, fgt, mean, g) in enumerate(parsed, start=1):
        h.entries[(t, d)] = value
        if d < t:
            if fgt is None:
                raise HistoryCsvError(f"row {n}: missing forgetting value for non-final domain")
            h.entries[(d, d)] = value - fgt
    h.source_only_mean = None if parsed[0][6] is None else parsed[0][5] - parsed[0][6]
    return h


def csv_values(text: str) -> List[Tuple[str, str, float, Optional[float], float, Optional[float]]]:
    """Raw numeric rows of a history CSV, as written."""
    out = []
    for row in csv.DictReader(line for line in text.splitlines() if not line.startswith("#")):
        out.append((row["method"], row["eval_domain"], float(row["miou"]),
                    float(row["fgt"]) if row["fgt"] else None, float(row["mean_miou"]),
                    float(row["gain"]) if row["gain"] else None))
    return out


def comparison_table(histories: Sequence[RunHistory]) -> str:
    """Side-by-side table of several methods over a shared domain list."""
    if not histories:
        raise ValueError("nothing to compare")
    names = histories[0].domain_names
    for h in histories[1:]:
        if h.domain_names != names:
            raise ValueError(f"conflicting domain lists: {names} vs {h.domain_names}")
    t = len(names)
    header = ["method"] + names + [f"Fgt[{n}]" for n in names[:-1]] + ["Mean", "Gain"]
    rows = [header]
    for h in histories:
        row = [h.method or "-"]
        row += [_pct(_cell(h, t, d)) for d in range(1, t + 1)]
        row += [_signed_pct(forgetting(h, d)) for d in range(1, t)]
        row += [_pct(mean_miou(h)), _signed_pct(gain(h)) if h.source_only_mean is not None else "-"]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"
