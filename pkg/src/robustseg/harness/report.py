"""Results table and ASR-vs-epsilon series, recomputed from outcome files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import metrics
from ..numerics.bundle import write_bytes_atomic
from .config import StageError, eps_label

TABLE_FIELDS = ("attack", "epsilon", "defense", "prompt", "asr", "mean_q", "mean_miou_gt", "n", "seed")
EMPTY = "NA"


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_FIELDS)
        for r in self.rows:
            w.writerow([_cell(r.get(k)) for k in TABLE_FIELDS])
        return buf.getvalue()

    def curve(self, attack: str, defense: str) -> list[tuple[float, float | None]]:
        pts = {}
        for r in self.rows:
            if r["attack"] == attack and r["defense"] == defense and r["prompt"] == "point":
                pts[r["epsilon"]] = r.get("asr")
        return sorted(pts.items())


def _cell(v):
    if v is None:
        return EMPTY
    if isinstance(v, float):
        return repr(v)
    return str(v)


def find_outcome_files(root) -> list[Path]:
    return sorted(Path(root).rglob("outcomes.csv"))


def build_table(root, split: str = "val") -> ResultsTable:
    cells = {}
    for path in find_outcome_files(root):
        text = path.read_text()
        prov = metrics.csv_provenance(text)
        if prov.get("split", split) != split:
            continue
        try:
            key = (prov["kind"], float(prov["epsilon"]), "on" if prov["defended"] == "1" else "off")
        except KeyError:
            raise StageError("bad_artifact", f"{path}: outcome file lacks provenance lines", path) from None
        if key in cells:
            raise StageError("duplicate_cell", f"{path} and {cells[key][0]} both cover {key}", path)
        cells[key] = (path, metrics.outcomes_from_csv(text), prov)
    table = ResultsTable()
    if not cells:
        raise StageError("missing_artifact", f"no {split} outcomes.csv under {root}", root)
    kinds = sorted({k[0] for k in cells})
    eps = sorted({k[1] for k in cells})
    defenses = sorted({k[2] for k in cells})
    for kind in kinds:
        for e in eps:
            for d in defenses:
                hit = cells.get((kind, e, d))
                if hit is None:
                    table.missing.append((kind, e, d))
                for prompt in ("point", "box"):
                    row = {"attack": kind, "epsilon": e, "defense": d, "prompt": prompt}
                    if hit is not None:
                        _, outs, prov = hit
                        row.update(asr=metrics.asr(outs),
                                   mean_q=float(np.mean([getattr(o, f"q_{prompt}") for o in outs])),
                                   mean_miou_gt=float(np.mean([getattr(o, f"miou_gt_{prompt}") for o in outs])),
                                   n=len(outs), seed=prov.get("seed"))
                    table.rows.append(row)
    for kind in kinds:
        for d in defenses:
            curve = [(e, a) for e, a in table.curve(kind, d) if a is not None]
            for (e0, a0), (e1, a1) in zip(curve, curve[1:]):
                if a1 < a0:
                    table.warnings.append(f"ASR of {kind} (defense {d}) drops from {a0:.3f} at "
                                          f"eps {eps_label(e0)} to {a1:.3f} at eps {eps_label(e1)}")
    return table


def series_csv(points) -> str:
    lines = ["epsilon,asr"]
    lines += [f"{e!r},{_cell(a)}" for e, a in points]
    return "\n".join(lines) + "\n"


def plot_curves(table: ResultsTable, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=100)
    attacks = sorted({r["attack"] for r in table.rows})
    defenses = sorted({r["defense"] for r in table.rows})
    for kind in attacks:
        for d in defenses:
            pts = [(e * 255, a) for e, a in table.curve(kind, d) if a is not None]
            if not pts:
                continue
            x, y = zip(*pts)
            ax.plot(x, y, marker="o", linestyle="-" if d == "off" else "--", label=f"{kind} ({'defended' if d == 'on' else 'undefended'})")
    ax.set_xlabel("epsilon (x/255)")
    ax.set_ylabel("ASR")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    buf = io.BytesIO()
    # no Software/date metadata so repeated runs give identical bytes
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    write_bytes_atomic(path, buf.getvalue())


def emit_report(in_dir, out_file, plot: bool = True, split: str = "val") -> ResultsTable:
    """Write the results table at ``out_file`` plus ``<stem>.<attack>.<defense>.csv`` series and a PNG.

    Only outcome files of ``split`` are tabulated (the defense's training
    attacks live on the train split).
    """
    table = build_table(in_dir, split)
    out_file = Path(out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    write_bytes_atomic(out_file, table.to_csv().encode())
    for kind in sorted({r["attack"] for r in table.rows}):
        for d in sorted({r["defense"] for r in table.rows}):
            write_bytes_atomic(out_file.with_name(f"{out_file.stem}.{kind}.{d}.csv"),
                               series_csv(table.curve(kind, d)).encode())
    if plot:
        plot_curves(table, out_file.with_name(f"{out_file.stem}.asr.png"))
    return table
