"""Key-channel selection, the cross-prompt feature attack (CPA) and single-prompt PGD baselines.

All attacks share one projected sign-gradient loop. The loop runs on a batch
of images, but every loss is a sum of independent per-sample terms, so the
sign of each sample's gradient is exactly what a one-image run would see.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .model import PromptSegModel, binarize, decode, encode, logits
from .numerics import autodiff as ad

log = logging.getLogger(__name__)

ATTACK_KINDS = ("cpa", "ppa", "bpa")
SIGN_CONVENTION = "descend-on-feature-mse"
BUDGET_SLACK = 1e-12


class BudgetViolation(AssertionError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16 / 255
    alpha: float = 2 / 255
    steps: int = 20
    k: int = 5
    importance: str = "miou_drop"  # or "logit_norm"

    def validate(self, num_channels: int | None = None) -> None:
        if not 0 < self.alpha <= self.epsilon:
            raise ValueError(f"need 0 < alpha <= epsilon, got alpha={self.alpha}, epsilon={self.epsilon}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.k < 1 or (num_channels is not None and self.k > num_channels):
            raise ValueError(f"K={self.k} outside [1, {num_channels}]")
        if self.importance not in ("miou_drop", "logit_norm"):
            raise ValueError(f"unknown importance reduction {self.importance!r}")


@dataclass
class AttackPlan:
    c_point: tuple
    c_box: tuple
    c_common: tuple
    attack_features: dict
    effective_k: int

    def to_dict(self) -> dict:
        return {"c_point": list(self.c_point), "c_box": list(self.c_box),
                "c_common": list(self.c_common), "effective_k": self.effective_k}


@dataclass
class AttackResult:
    adv_image: np.ndarray
    outcome: metrics.AttackOutcome
    plan: AttackPlan | None = None
    steps_completed: int = 0
    diagnostic: str | None = None
    history: list = field(default_factory=list)


# ---------------------------------------------------------------- key features

def importance_profiles(model: PromptSegModel, images: np.ndarray, prompts, mode: str = "miou_drop",
                        features: np.ndarray | None = None) -> np.ndarray:
    """(B, N) effect on the decoded output of zeroing each feature channel.

    ``miou_drop`` scores ``1 - mIoU(mask, ablated mask)``; ``logit_norm``
    scores the L2 norm of the logit difference.
    """
    images = np.asarray(images, dtype=np.float64)
    feats = encode(model, images) if features is None else features
    b, n, h, w = feats.shape
    variants = np.repeat(feats[:, None], n + 1, axis=1)
    idx = np.arange(n)
    variants[:, idx + 1, idx] = 0.0
    flat_prompts = [p for p in prompts for _ in range(n + 1)]
    out = decode(model, variants.reshape(b * (n + 1), n, h, w), flat_prompts).reshape(b, n + 1, -1)
    ref, ablated = out[:, :1], out[:, 1:]
    if mode == "logit_norm":
        return np.sqrt(((ref - ablated) ** 2).sum(axis=-1))
    ref_mask, abl_mask = ref > 0, ablated > 0
    inter = np.count_nonzero(ref_mask & abl_mask, axis=-1)
    union = np.count_nonzero(ref_mask | abl_mask, axis=-1)
    iou = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return 1.0 - iou


def channel_importance(model, image, prompt, channel: int, mode: str = "miou_drop") -> float:
    n = model.config.num_features
    if not 0 <= channel < n:
        raise ValueError(f"channel {channel} outside [0, {n})")
    return float(importance_profiles(model, np.asarray(image)[None], [prompt], mode)[0, channel])


def topk(scores, k: int) -> tuple:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    return tuple(int(i) for i in order[:k])


def build_attack_feature(features, c_common) -> dict:
    """Frozen negated clean features for each selected channel."""
    feats = ad.value(features)
    out = {}
    for i in c_common:
        a = -feats[i].copy()
        a.flags.writeable = False
        out[int(i)] = a
    return out


def plan_from_scores(point_scores, box_scores, k: int) -> tuple[tuple, tuple, tuple, int]:
    n = len(point_scores)
    eff = k
    while True:
        c_point, c_box = topk(point_scores, eff), topk(box_scores, eff)
        common = tuple(sorted(set(c_point) & set(c_box)))
        if common or eff >= n:
            break
        eff += 1
    assert common, "top-N sets of both prompts cover every channel"
    return c_point, c_box, common, eff


def select_key_channels(model, image, point, box, k: int, mode: str = "miou_drop",
                        features: np.ndarray | None = None) -> AttackPlan:
    return select_key_channels_batch(model, np.asarray(image)[None], [point], [box], k, mode,
                                     None if features is None else np.asarray(features)[None])[0]


def select_key_channels_batch(model, images, points, boxes, k, mode="miou_drop", features=None) -> list[AttackPlan]:
    images = np.asarray(images, dtype=np.float64)
    feats = encode(model, images) if features is None else features
    n = feats.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"K={k} outside [1, {n}]")
    sp = importance_profiles(model, images, points, mode, feats)
    sb = importance_profiles(model, images, boxes, mode, feats)
    plans = []
    for b in range(len(images)):
        c_point, c_box, common, eff = plan_from_scores(sp[b], sb[b], k)
        plans.append(AttackPlan(c_point, c_box, common, build_attack_feature(feats[b], common), eff))
    return plans


# ---------------------------------------------------------------- PGD

def project(clean: np.ndarray, candidate: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip to the L-inf ball around ``clean`` and to the valid pixel range."""
    return np.clip(np.clip(candidate, clean - epsilon, clean + epsilon), 0.0, 1.0)


def check_budget(clean, adv, epsilon) -> None:
    dev = np.abs(adv - clean).max() if adv.size else 0.0
    if dev > epsilon + BUDGET_SLACK or adv.min() < 0.0 or adv.max() > 1.0:
        raise BudgetViolation(f"perturbation budget violated: max|delta|={dev:.3g} eps={epsilon:.3g} "
                              f"range=[{adv.min():.3g}, {adv.max():.3g}]")


def random_start(samples, epsilon: float, seed: int) -> np.ndarray:
    """Uniform noise in [-eps, eps], drawn per sample from a stream keyed by (seed, id)."""
    draws = []
    for s in samples:
        key = int.from_bytes(hashlib.sha256(f"{seed}:{s.id}".encode()).digest()[:8], "little")
        rng = np.random.Generator(np.random.Philox(key))
        draws.append(rng.uniform(-epsilon, epsilon, size=s.image.shape))
    return np.stack(draws)


def pgd(clean: np.ndarray, loss_fn, config: AttackConfig, ascend: bool, on_step=None, init=None):
    """Projected sign-gradient iterations from ``init`` noise (zero by default).

    Returns the adversarial batch, the number of completed steps and a
    diagnostic string if the loop stopped on a non-finite gradient.
    """
    adv = clean.copy() if init is None else project(clean, clean + init, config.epsilon)
    direction = 1.0 if ascend else -1.0
    for t in range(config.steps):
        graph = ad.Graph()
        x = graph.leaf(adv, name="x_adv")
        loss = loss_fn(x)
        grad = graph.backward(loss)[x]
        if not np.all(np.isfinite(grad)):
            msg = f"non-finite gradient at step {t}; returning partial perturbation"
            log.warning(msg)
            return adv, t, msg
        adv = project(clean, adv + direction * config.alpha * np.sign(grad), config.epsilon)
        check_budget(clean, adv, config.epsilon)
        if on_step is not None:
            on_step(t, adv, float(ad.value(loss)))
    return adv, config.steps, None


def cpa_loss_fn(model, plans, n_features, feature_hw):
    """Sum over samples of the mean feature MSE to the attack features on common channels."""
    b = len(plans)
    h, w = feature_hw
    target = np.zeros((b, n_features, h, w))
    weights = np.zeros((b, n_features, 1, 1))
    for i, plan in enumerate(plans):
        for c, a in plan.attack_features.items():
            target[i, c] = a
            weights[i, c] = 1.0 / (len(plan.c_common) * h * w)

    def loss(x):
        return ad.wsse(encode(model, x), target, weights)

    return loss


def prompt_loss_fn(model, clean_logits, prompts):
    weight = 1.0 / clean_logits[0].size

    def loss(x):
        return ad.wsse(logits(model, x, prompts), clean_logits, weight)

    return loss


def _predict_pairs(model, clean, adv, samples):
    """Binary masks for clean and adversarial images under both prompts."""
    both = np.concatenate([clean, adv])
    out = {}
    for kind in ("point", "box"):
        prompts = [s.prompt(kind) for s in samples] * 2
        m = binarize(logits(model, both, prompts))
        out[kind] = (m[: len(samples)], m[len(samples):])
    return out


def outcomes_for(model, samples, clean, adv) -> list[metrics.AttackOutcome]:
    masks = _predict_pairs(model, clean, adv, samples)
    return [metrics.outcome_from_masks(s.id, masks["point"][0][i], masks["box"][0][i],
                                       masks["point"][1][i], masks["box"][1][i], s.gt_mask)
            for i, s in enumerate(samples)]


def run_attack_batch(model, samples, config: AttackConfig, kind: str, on_step=None, seed: int = 0) -> list[AttackResult]:
    """Attack a list of samples with one of ``cpa``, ``ppa`` (point) or ``bpa`` (box).

    CPA starts from zero noise. The single-prompt attacks start from seeded
    uniform noise: their loss has a zero gradient at the clean image.
    """
    if kind not in ATTACK_KINDS:
        raise ValueError(f"unknown attack kind {kind!r}")
    cfg = model.config
    config.validate(cfg.num_features)
    clean = np.stack([s.image for s in samples])
    plans = None
    init = None
    if kind == "cpa":
        feats = encode(model, clean)
        plans = select_key_channels_batch(model, clean, [s.point_prompt for s in samples],
                                          [s.box_prompt for s in samples], config.k, config.importance, feats)
        loss_fn = cpa_loss_fn(model, plans, cfg.num_features, feats.shape[-2:])
        ascend = False
    else:
        prompts = [s.prompt("point" if kind == "ppa" else "box") for s in samples]
        loss_fn = prompt_loss_fn(model, logits(model, clean, prompts), prompts)
        ascend = True
        if config.steps:
            init = random_start(samples, config.epsilon, seed)
    adv, done, diag = pgd(clean, loss_fn, config, ascend, on_step, init)
    outcomes = outcomes_for(model, samples, clean, adv)
    return [AttackResult(adv[i], outcomes[i], plans[i] if plans else None, done, diag)
            for i in range(len(samples))]


def cpa_attack(model, sample, config: AttackConfig = AttackConfig(), on_step=None) -> AttackResult:
    return run_attack_batch(model, [sample], config, "cpa", on_step)[0]


def single_prompt_attack(model, sample, config: AttackConfig = AttackConfig(), prompt_type: str = "point",
                         on_step=None, seed: int = 0) -> AttackResult:
    kind = {"point": "ppa", "box": "bpa"}[prompt_type]
    return run_attack_batch(model, [sample], config, kind, on_step, seed)[0]


def provenance(kind: str, config: AttackConfig, plan: AttackPlan | None, seed: int) -> dict:
    rec = {"attack": kind, "config": asdict(config), "seed": seed,
           "sign_convention": SIGN_CONVENTION if kind == "cpa" else "ascend-on-logit-mse",
           "start": "zero" if kind == "cpa" else "uniform-random"}
    if plan is not None:
        rec["plan"] = plan.to_dict()
    return rec
