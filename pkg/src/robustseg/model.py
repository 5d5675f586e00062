"""Toy promptable segmenter: strided conv encoder, two-conv neck, two decoder heads.

Forward functions take an optional ``params`` mapping so that callers can
substitute graph nodes (gradients) or reparameterized weights (defense)
without mutating the model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .numerics import autodiff as ad
from .numerics.bundle import load_bundle, save_bundle
from .numerics.tensor import FormatError
from .prompts import Box, Point

CHECKPOINT_FORMAT = 1
HEADS = ("point", "box")
NECK_LAYERS = ("neck.a", "neck.b")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    image_channels: int = 1
    backbone_channels: tuple = (8, 16, 32)
    neck_channels: int = 16
    decoder_hidden: int = 32
    prompt_sigma: float = 1.5
    paper_mirror_neck: bool = False

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(self.backbone_channels))
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")

    @property
    def feature_size(self) -> int:
        return self.image_size // 8

    @property
    def encoder_width(self) -> int:
        return 768 if self.paper_mirror_neck else self.backbone_channels[-1]

    @property
    def num_features(self) -> int:
        return 256 if self.paper_mirror_neck else self.neck_channels

    def to_dict(self) -> dict:
        out = asdict(self)
        out["backbone_channels"] = list(self.backbone_channels)
        return out


def layer_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Kernel shape (out, in, kh, kw) of every conv layer, in forward order."""
    shapes = {}
    chans = [cfg.image_channels, *cfg.backbone_channels[:-1], cfg.encoder_width]
    for i in range(3):
        shapes[f"backbone.{i}"] = (chans[i + 1], chans[i], 3, 3)
    n = cfg.num_features
    shapes["neck.a"] = (n, cfg.encoder_width, 1, 1)
    shapes["neck.b"] = (n, n, 3, 3)
    for head in HEADS:
        shapes[f"{head}.0"] = (cfg.decoder_hidden, n + 1, 3, 3)
        shapes[f"{head}.1"] = (64, cfg.decoder_hidden, 3, 3)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform kernels, zero biases, drawn from one Philox stream."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5EED])))
    params = {}
    for name, (o, i, kh, kw) in layer_shapes(cfg).items():
        bound = np.sqrt(6.0 / ((i + o) * kh * kw))
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(o, i, kh, kw))
        params[f"{name}.bias"] = np.zeros(o)
    return params


@dataclass
class PromptSegModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int = 0
    lineage: dict = field(default_factory=dict)
    reparam: object = None  # defense.SvdReparam when the neck is factorized

    @classmethod
    def create(cls, config: ModelConfig = ModelConfig(), seed: int = 0) -> "PromptSegModel":
        return cls(config, init_params(config, seed), seed)

    def copy(self) -> "PromptSegModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()}, lineage=dict(self.lineage),
                       reparam=None if self.reparam is None else self.reparam.copy())

    def weights(self) -> Mapping:
        """Parameters as used by the forward pass (neck weights rebuilt when factorized)."""
        if self.reparam is None:
            return self.params
        return {**self.params, **self.reparam.weights()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.weights().values())


# ---------------------------------------------------------------- forward

def _batched(image) -> tuple[object, bool]:
    v = ad.value(image)
    if v.ndim == 3:
        return ad.reshape(image, (1, *v.shape)), True
    if v.ndim == 4:
        return image, False
    raise ad.ShapeError(f"encode: expected (1, H, W) or (B, 1, H, W) image, got {v.shape}")


def _conv(x, params, name, stride=1, pad=0):
    return ad.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, pad=pad)


def encode(model: PromptSegModel, image, params: Mapping | None = None):
    """Neck features (N, h, w) for one image, or (B, N, h, w) for a batch."""
    p = model.weights() if params is None else params
    cfg = model.config
    x, single = _batched(image)
    shape = ad.value(x).shape
    if shape[1:] != (cfg.image_channels, cfg.image_size, cfg.image_size):
        raise ad.ShapeError(f"encode: image shape {shape[1:]} does not match config "
                            f"{(cfg.image_channels, cfg.image_size, cfg.image_size)}")
    for i in range(3):
        x = ad.relu(_conv(x, p, f"backbone.{i}", stride=2, pad=1))
    x = ad.relu(_conv(x, p, "neck.a"))
    x = _conv(x, p, "neck.b", pad=1)
    if single:
        x = ad.reshape(x, ad.value(x).shape[1:])
    return x


def encode_prompt(prompt, h: int, w: int, image_size: int, sigma: float = 1.5) -> np.ndarray:
    """Prompt as a (1, h, w) channel at feature resolution.

    A point becomes an unnormalized Gaussian centered on the feature cell
    containing it; a box becomes the indicator of cells it overlaps.
    """
    cell = image_size / h
    if isinstance(prompt, Point):
        prompt.check(image_size, image_size)
        cy, cx = int(prompt.y // cell), int(prompt.x // cell)
        ys, xs = np.mgrid[0:h, 0:w]
        out = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma * sigma))
    elif isinstance(prompt, Box):
        prompt.check(image_size, image_size)
        out = np.zeros((h, w))
        r0, r1 = int(prompt.y0 // cell), int(np.ceil(prompt.y1 / cell))
        c0, c1 = int(prompt.x0 // cell), int(np.ceil(prompt.x1 / cell))
        out[r0:r1, c0:c1] = 1.0
    else:
        raise TypeError(f"unsupported prompt {prompt!r}")
    return out[None]


def _prompt_batch(model, prompts, n, h, w):
    if isinstance(prompts, (Point, Box)):
        prompts = [prompts] * n
    prompts = list(prompts)
    if len(prompts) != n:
        raise ValueError(f"decode: {len(prompts)} prompts for batch of {n}")
    kinds = {p.kind for p in prompts}
    if len(kinds) != 1:
        raise ValueError("decode: a batch must use a single prompt type")
    chan = np.stack([encode_prompt(p, h, w, model.config.image_size, model.config.prompt_sigma) for p in prompts])
    return kinds.pop(), chan


def decode(model: PromptSegModel, features, prompt, params: Mapping | None = None):
    """Per-pixel logits (H, W), or (B, H, W) for batched features and a prompt list."""
    p = model.weights() if params is None else params
    cfg = model.config
    fv = ad.value(features)
    single = fv.ndim == 3
    expect = (cfg.num_features, cfg.feature_size, cfg.feature_size)
    if fv.shape[-3:] != expect or fv.ndim not in (3, 4):
        raise ad.ShapeError(f"decode: features {fv.shape} do not match config {expect}")
    if single:
        features = ad.reshape(features, (1, *fv.shape))
    n = 1 if single else fv.shape[0]
    kind, chan = _prompt_batch(model, prompt, n, cfg.feature_size, cfg.feature_size)
    x = ad.concat_channels([features, chan])
    x = ad.relu(_conv(x, p, f"{kind}.0", pad=1))
    x = _conv(x, p, f"{kind}.1", pad=1)
    x = ad.depth_to_space(x, 8)
    out_shape = (cfg.image_size, cfg.image_size) if single else (n, cfg.image_size, cfg.image_size)
    return ad.reshape(x, out_shape)


def logits(model: PromptSegModel, image, prompt, params: Mapping | None = None):
    return decode(model, encode(model, image, params), prompt, params)


def binarize(logit_map) -> np.ndarray:
    return (ad.value(logit_map) > 0).astype(np.float64)


def predict_mask(model: PromptSegModel, image, prompt, params: Mapping | None = None) -> np.ndarray:
    return binarize(logits(model, image, prompt, params))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: PromptSegModel, extra_meta: Mapping | None = None,
                    extra_tensors: Mapping | None = None) -> None:
    tensors = dict(sorted(model.params.items()))
    reparam_meta = None
    if model.reparam is not None:
        reparam_meta = model.reparam.describe()
        tensors.update(model.reparam.tensors())
    meta = {
        "kind": "model",
        "checkpoint_format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "lineage": model.lineage,
        "manifest": [[k, list(v.shape)] for k, v in tensors.items()],
        "reparam": reparam_meta,
    }
    if extra_meta:
        meta.update(extra_meta)
    if extra_tensors:
        tensors.update(extra_tensors)
    save_bundle(path, meta, tensors)


def load_checkpoint(path) -> tuple[PromptSegModel, dict, dict]:
    """Return the model, the full metadata and any tensors beyond the parameter manifest."""
    meta, tensors = load_bundle(path)
    if meta.get("checkpoint_format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: checkpoint format {meta.get('checkpoint_format')} unsupported")
    cfg = ModelConfig(**meta["config"])
    params = {}
    for name, shape in meta["manifest"]:
        if name not in tensors:
            raise FormatError(f"{path}: manifest lists missing tensor {name!r}")
        if list(tensors[name].shape) != list(shape):
            raise FormatError(f"{path}: tensor {name!r} field 'shape' {tensors[name].shape} != {shape}")
        params[name] = tensors.pop(name)
    reparam = None
    if meta.get("reparam"):
        from .defense import SvdReparam

        reparam = SvdReparam.from_tensors(meta["reparam"], params)
    return PromptSegModel(cfg, params, meta.get("seed", 0), meta.get("lineage", {}), reparam), meta, tensors


# ---------------------------------------------------------------- pretraining

@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 300
    lr: float = 3e-3
    batch_size: int = 16
    augment: bool = True
    seed: int = 0
    label_smoothing: float = 0.0  # BCE targets become ls/2 and 1 - ls/2


def dihedral(sample, k: int):
    """Image, mask and prompts of ``sample`` under rotation ``k % 4`` (and a flip when ``k >= 4``)."""
    from .data import tight_box

    def tf(a):
        a = np.rot90(a, k % 4, axes=(-2, -1))
        return a[..., ::-1] if k >= 4 else a

    image, mask = np.ascontiguousarray(tf(sample.image)), np.ascontiguousarray(tf(sample.gt_mask))
    marker = np.zeros_like(sample.gt_mask)
    marker[sample.point_prompt.y, sample.point_prompt.x] = 1.0
    y, x = np.argwhere(tf(marker))[0]
    return image, mask, Point(int(x), int(y)), tight_box(mask > 0)


def _batch(samples, idx, kind, rng, augment):
    images, masks, prompts = [], [], []
    for i in idx:
        s = samples[i]
        if augment:
            image, mask, point, box = dihedral(s, int(rng.integers(8)))
        else:
            image, mask, point, box = s.image, s.gt_mask, s.point_prompt, s.box_prompt
        images.append(image)
        masks.append(mask)
        prompts.append(point if kind == "point" else box)
    return np.stack(images), np.stack(masks), prompts


def mean_bce(model, samples, batch_size=64) -> float:
    """Per-pixel BCE averaged over both heads and all ``samples``."""
    total = 0.0
    for kind in HEADS:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            z = logits(model, np.stack([s.image for s in chunk]), [s.prompt(kind) for s in chunk])
            total += float(ad.bce_logits(z, np.stack([s.gt_mask for s in chunk]))) * len(chunk)
    return total / (2 * len(samples))


def pretrain(model: PromptSegModel, samples, config: PretrainConfig = PretrainConfig(), on_epoch=None):
    """Fit both heads with per-pixel BCE, alternating prompt type every step.

    Works on a private copy; returns it with a per-epoch log. The learning
    rate follows a cosine decay to zero over the run.
    """
    if not samples:
        raise ValueError("pretrain needs a nonempty training split")
    from .optim import Adam

    trained = model.copy()
    opt = Adam(trained.params, lr=config.lr)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 0xBCE])))
    n = len(samples)
    steps_per_epoch = -(-n // config.batch_size)
    total = config.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            kind = HEADS[step % 2]
            images, masks, prompts = _batch(samples, idx, kind, rng, config.augment)
            graph = ad.Graph()
            leaves = {k: graph.leaf(v, k) for k, v in trained.params.items()}
            if config.label_smoothing:
                masks = masks * (1.0 - config.label_smoothing) + 0.5 * config.label_smoothing
            loss = ad.bce_logits(logits(trained, images, prompts, leaves), masks)
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"pretrain diverged at epoch {epoch} step {step}: loss={loss.value}")
            grads = graph.backward(loss)
            opt.lr = 0.5 * config.lr * (1.0 + np.cos(np.pi * step / total))
            opt.step({k: grads[leaf] for k, leaf in leaves.items()})
            running += float(loss.value) * len(idx)
            step += 1
        history.append({"epoch": epoch, "loss": running / n})
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return trained, history
