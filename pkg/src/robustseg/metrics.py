"""Mask overlap, cross-prompt attack outcomes and success rate."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

SUCCESS_THRESHOLD = 0.5
OUTCOME_FIELDS = ("id", "q_point", "q_box", "success", "miou_gt_point", "miou_gt_box")


def miou(a, b) -> float:
    """|A & B| / |A | B| of two binary masks; two empty masks score 1."""
    a, b = np.asarray(a) > 0, np.asarray(b) > 0
    if a.shape != b.shape:
        raise ValueError(f"miou: shape mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def is_success(q_point: float, q_box: float) -> int:
    """The attack counts only if both prompt types drop below the threshold at once."""
    return int(q_point < SUCCESS_THRESHOLD and q_box < SUCCESS_THRESHOLD)


@dataclass(frozen=True)
class AttackOutcome:
    id: str
    q_point: float
    q_box: float
    success: int
    miou_gt_point: float
    miou_gt_box: float

    def __post_init__(self):
        if self.success != is_success(self.q_point, self.q_box):
            raise ValueError(f"{self.id}: success flag inconsistent with q values")


def attack_q(model, clean_image, adv_image, prompt) -> float:
    """mIoU between the model's masks on the adversarial and clean images (not ground truth)."""
    from .model import predict_mask

    if np.shape(clean_image) != np.shape(adv_image):
        raise ValueError(f"attack_q: image shapes differ {np.shape(clean_image)} vs {np.shape(adv_image)}")
    return miou(predict_mask(model, adv_image, prompt), predict_mask(model, clean_image, prompt))


def outcome_from_masks(sample_id, clean_point, clean_box, adv_point, adv_box, gt_mask) -> AttackOutcome:
    q_point, q_box = miou(adv_point, clean_point), miou(adv_box, clean_box)
    return AttackOutcome(sample_id, q_point, q_box, is_success(q_point, q_box),
                         miou(adv_point, gt_mask), miou(adv_box, gt_mask))


def evaluate_outcome(model, sample, adv_image) -> AttackOutcome:
    from .model import predict_mask

    masks = {}
    for kind in ("point", "box"):
        prompt = sample.prompt(kind)
        masks[kind] = (predict_mask(model, sample.image, prompt), predict_mask(model, adv_image, prompt))
    return outcome_from_masks(sample.id, masks["point"][0], masks["box"][0],
                              masks["point"][1], masks["box"][1], sample.gt_mask)


def asr(outcomes) -> float:
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("asr: no outcomes")
    return sum(o.success for o in outcomes) / len(outcomes)


def _fmt(x: float) -> str:
    return repr(float(x))


def outcomes_to_csv(outcomes, provenance=None) -> str:
    """CSV text; ``provenance`` items become leading ``# key=value`` lines."""
    buf = io.StringIO()
    for key, val in sorted((provenance or {}).items()):
        buf.write(f"# {key}={val}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(OUTCOME_FIELDS)
    for o in outcomes:
        writer.writerow([o.id, _fmt(o.q_point), _fmt(o.q_box), o.success, _fmt(o.miou_gt_point), _fmt(o.miou_gt_box)])
    return buf.getvalue()


def csv_provenance(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.startswith("# "):
            break
        key, _, val = line[2:].partition("=")
        out[key] = val
    return out


def outcomes_from_csv(text: str) -> list[AttackOutcome]:
    body = [line for line in text.splitlines(keepends=True) if not line.startswith("#")]
    reader = csv.reader(io.StringIO("".join(body)))
    header = next(reader, None)
    if header is None or tuple(header) != OUTCOME_FIELDS:
        raise ValueError(f"outcome table header {header} != {list(OUTCOME_FIELDS)}")
    rows = []
    for row in reader:
        if len(row) != len(OUTCOME_FIELDS):
            raise ValueError(f"outcome row has {len(row)} fields: {row}")
        rows.append(AttackOutcome(row[0], float(row[1]), float(row[2]), int(row[3]), float(row[4]), float(row[5])))
    return rows
