"""Singular-value-only adaptation of the neck convolutions.

Each neck kernel (out, in, kh, kw) is viewed as an ``out x in*kh*kw`` matrix
and factorized as ``U diag(p) V^T``. The bases stay frozen; only the
singular values ``p`` are trained against a signed per-pixel target.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import NECK_LAYERS, PromptSegModel, logits
from .numerics import autodiff as ad
from .numerics.svd import svd
from .optim import Adam

RECONSTRUCTION_TOL = 1e-8


@dataclass
class NeckFactor:
    U: np.ndarray
    p: np.ndarray
    V: np.ndarray
    kernel_shape: tuple

    def weight(self, p=None):
        p = self.p if p is None else p
        mat = ad.matmul(ad.scale_columns(self.U, p), self.V.T)
        return ad.reshape(mat, self.kernel_shape)


@dataclass
class SvdReparam:
    layers: dict = field(default_factory=dict)  # name -> NeckFactor

    def copy(self) -> "SvdReparam":
        return SvdReparam({k: NeckFactor(f.U, f.p.copy(), f.V, f.kernel_shape) for k, f in self.layers.items()})

    def weights(self, p_values=None) -> dict:
        """Effective kernels keyed ``<layer>.weight``; ``p_values`` may hold graph nodes."""
        p_values = p_values or {}
        return {f"{name}.weight": f.weight(p_values.get(name)) for name, f in self.layers.items()}

    @property
    def trainable_count(self) -> int:
        return sum(f.p.size for f in self.layers.values())

    def describe(self) -> dict:
        return {name: {"kernel_shape": list(f.kernel_shape)} for name, f in self.layers.items()}

    def tensors(self) -> dict:
        out = {}
        for name, f in self.layers.items():
            out[f"{name}.U"], out[f"{name}.p"], out[f"{name}.V"] = f.U, f.p, f.V
        return out

    @classmethod
    def from_tensors(cls, desc: dict, tensors: dict) -> "SvdReparam":
        layers = {}
        for name, info in desc.items():
            layers[name] = NeckFactor(_frozen(tensors.pop(f"{name}.U")), tensors.pop(f"{name}.p"),
                                      _frozen(tensors.pop(f"{name}.V")), tuple(info["kernel_shape"]))
        return cls(layers)


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


def reparameterize_neck(model: PromptSegModel) -> tuple[PromptSegModel, SvdReparam]:
    """Replace each neck kernel by its SVD expression with ``p`` as the free parameter."""
    if model.reparam is not None:
        raise ValueError("model neck is already reparameterized")
    layers = {}
    params = {k: v.copy() for k, v in model.params.items()}
    for name in NECK_LAYERS:
        kernel = params.pop(f"{name}.weight")
        mat = kernel.reshape(kernel.shape[0], -1)
        f = svd(mat)
        err = np.abs(f.reconstruct() - mat).max()
        if err > RECONSTRUCTION_TOL:
            raise ArithmeticError(f"{name}: SVD reconstruction error {err:.3g} > {RECONSTRUCTION_TOL}")
        layers[name] = NeckFactor(_frozen(f.U), f.p.copy(), _frozen(f.V), kernel.shape)
    reparam = SvdReparam(layers)
    out = PromptSegModel(model.config, params, model.seed, dict(model.lineage), reparam)
    return out, reparam


def trainable_count(reparam: SvdReparam) -> int:
    return reparam.trainable_count


def build_defense_matrix(gt_mask, c: float = 1.0) -> np.ndarray:
    return np.where(np.asarray(gt_mask) > 0, float(c), -float(c))


def defense_loss(model: PromptSegModel, adv_image, prompt, target, p_values=None):
    """MSE between the raw logit map and the defense matrix."""
    params = None
    if p_values is not None:
        params = {**model.params, **model.reparam.weights(p_values)}
    return ad.mse(target, logits(model, adv_image, prompt, params))


@dataclass(frozen=True)
class DefenseConfig:
    lr: float = 5e-5
    weight_decay: float = 5e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch: int = 1
    epochs: int = 50
    magnitude: float | str = "auto"  # "auto": median |logit| of the base model on clean training images
    seed: int = 0

    def validate(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch != 1:
            raise ValueError(f"invalid defense config {self}")
        if self.magnitude != "auto" and not float(self.magnitude) > 0:
            raise ValueError(f"defense magnitude must be positive or 'auto', got {self.magnitude!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class DefenseDiverged(FloatingPointError):
    def __init__(self, msg, last_good: dict):
        super().__init__(msg)
        self.last_good = last_good


def logit_scale(model: PromptSegModel, examples) -> float:
    """Median |logit| over ``examples``, alternating prompt type as in training."""
    vals = []
    for i, s in enumerate(examples):
        vals.append(np.abs(ad.value(logits(model, s.image, s.prompt("point" if i % 2 == 0 else "box")))).ravel())
    return float(np.median(np.concatenate(vals))) if vals else 1.0


def resolve_magnitude(model, examples, config: DefenseConfig, reference=None) -> float:
    """Target magnitude ``c``. With "auto", ``reference`` is either a known
    clean logit scale or a list of clean samples to measure it on; the
    adversarial ``examples`` themselves are a poor reference because the
    attack has already shrunk their logits."""
    if config.magnitude != "auto":
        return float(config.magnitude)
    if reference is None:
        reference = examples
    if isinstance(reference, (int, float)):
        return float(reference)
    return logit_scale(model, reference)


def train_defense(model: PromptSegModel, examples, config: DefenseConfig = DefenseConfig(), on_epoch=None,
                  reference=None):
    """Fit the singular values on adversarial ``examples``, one image per step.

    ``examples`` are :class:`~robustseg.data.Sample` objects whose ``image``
    holds the adversarial input. Prompt type alternates point/box per step.
    Returns the defended model (a copy), the per-epoch loss log and the
    optimizer state. ``on_epoch(epoch, record, model)`` sees the model in
    training; it must not modify it. ``reference`` resolves an "auto"
    magnitude (see :func:`resolve_magnitude`).
    """
    config.validate()
    if model.reparam is None:
        raise ValueError("train_defense needs a reparameterized model")
    robust = model.copy()
    p = {name: f.p for name, f in robust.reparam.layers.items()}
    opt = Adam(p, lr=config.lr, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay)
    c = resolve_magnitude(robust, examples, config, reference)
    targets = [build_defense_matrix(s.gt_mask, c) for s in examples]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 0xDEF])))
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        total = 0.0
        for i in order:
            s = examples[i]
            kind = "point" if step % 2 == 0 else "box"
            graph = ad.Graph()
            leaves = {name: graph.leaf(v, name) for name, v in p.items()}
            loss = defense_loss(robust, s.image, s.prompt(kind), targets[i], leaves)
            if not np.isfinite(loss.value):
                raise DefenseDiverged(f"non-finite defense loss at epoch {epoch}",
                                      {k: v.copy() for k, v in p.items()})
            grads = graph.backward(loss)
            opt.step({name: grads[leaf] for name, leaf in leaves.items()})
            total += float(loss.value)
            step += 1
        history.append({"epoch": epoch, "loss": total / max(len(examples), 1), "magnitude": c})
        if on_epoch is not None:
            on_epoch(epoch, history[-1], robust)
    return robust, history, opt.state()


def params_digest(model: PromptSegModel) -> str:
    """Digest of every frozen tensor (all raw params plus U/V bases)."""
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k]).tobytes())
    if model.reparam is not None:
        for name, f in sorted(model.reparam.layers.items()):
            h.update(name.encode())
            h.update(f.U.tobytes())
            h.update(f.V.tobytes())
    return h.hexdigest()
