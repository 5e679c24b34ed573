"""Stroke-embedding autoencoder.

One shared convolutional encoder maps a binary stroke (or stroke-group) image
to a fixed-size embedding; two mirrored decoders reconstruct the input image
and regress its narrow-band distance field.  The field head is an auxiliary
task only: after training both decoders are discarded and the frozen encoder
serves as the embedding function for the segmentation stage.

Input images can carry two extra coordinate channels (x and y ramps in
[-1, 1]) so the embedding keeps absolute position, which strokes of similar
shape need to stay distinguishable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import DataError
from .autodiff import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    conv2d,
    dense,
    flatten,
    glorot_uniform,
    mse_loss,
    mul,
    relu,
    reshape,
    sigmoid,
    upsample2x_nearest,
    zero_grad,
)
from .data import LabeledSketch, Sketch
from .raster import compose_group_image, coord_channels, distance_field, rasterize

DESK_WIDTHS = (16, 32, 64, 128)
PAPER_WIDTHS = (64, 128, 256, 512)


@dataclass(frozen=True)
class EmbedConfig:
    resolution: int = 64
    widths: tuple = DESK_WIDTHS
    embed_dim: int = 64
    gamma_balance: float = 0.5
    coordconv: bool = True
    distance_field: bool = True
    k_band: float = 0.001
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        w = tuple(self.widths)
        object.__setattr__(self, "widths", w)
        if not w or any(b < a for a, b in zip(w, w[1:])):
            raise DataError(f"widths must be ascending, got {w}")
        if self.embed_dim <= 0:
            raise DataError("embed_dim must be positive")
        if self.gamma_balance < 0:
            raise DataError("gamma_balance must be >= 0")
        if self.resolution % (1 << len(w)) != 0:
            raise DataError(
                f"resolution {self.resolution} not divisible by 2^{len(w)} segments"
            )

    @property
    def in_channels(self) -> int:
        return 3 if self.coordconv else 1

    @property
    def bottom_side(self) -> int:
        return self.resolution >> len(self.widths)


@dataclass
class EmbedParams:
    """Parameter sets for the encoder and the two decoders."""

    encoder: dict
    recon: dict
    dist: dict

    def all(self) -> dict:
        out = {}
        for prefix, group in (("enc", self.encoder), ("rec", self.recon), ("dis", self.dist)):
            for name, t in group.items():
                out[f"{prefix}.{name}"] = t
        return out


def _conv_set(rng, names_shapes: dict, dtype) -> dict:
    params = {}
    for name, shape in names_shapes.items():
        if name.endswith(".w"):
            params[name] = Tensor(glorot_uniform(rng, shape, dtype), requires_grad=True)
        else:
            params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
    return params


def _decoder_shapes(cfg: EmbedConfig) -> dict:
    w = cfg.widths
    flat = w[-1] * cfg.bottom_side ** 2
    shapes = {"fc.w": (cfg.embed_dim, flat), "fc.b": (flat,)}
    for i in reversed(range(len(w))):
        upper = w[i + 1] if i + 1 < len(w) else w[-1]
        shapes[f"s{i}b.w"] = (w[i], upper, 3, 3)
        shapes[f"s{i}b.b"] = (w[i],)
        shapes[f"s{i}a.w"] = (w[i], w[i], 3, 3)
        shapes[f"s{i}a.b"] = (w[i],)
    shapes["head.w"] = (1, w[0], 3, 3)
    shapes["head.b"] = (1,)
    return shapes


def init_params(cfg: EmbedConfig, rng: np.random.Generator | None = None,
                dtype=np.float32) -> EmbedParams:
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    w = cfg.widths
    enc_shapes = {"stem.w": (w[0], cfg.in_channels, 3, 3), "stem.b": (w[0],)}
    for i in range(len(w)):
        upper = w[i + 1] if i + 1 < len(w) else w[-1]
        enc_shapes[f"s{i}a.w"] = (w[i], w[i], 3, 3)
        enc_shapes[f"s{i}a.b"] = (w[i],)
        enc_shapes[f"s{i}b.w"] = (upper, w[i], 3, 3)
        enc_shapes[f"s{i}b.b"] = (upper,)
    enc_shapes["fc.w"] = (w[-1] * cfg.bottom_side ** 2, cfg.embed_dim)
    enc_shapes["fc.b"] = (cfg.embed_dim,)
    dec_shapes = _decoder_shapes(cfg)
    encoder = _conv_set(rng, enc_shapes, dtype)
    recon = _conv_set(rng, dec_shapes, dtype)
    dist = _conv_set(rng, dec_shapes, dtype)
    # Stroke images are overwhelmingly background; a head that starts at the
    # sigmoid's midpoint gets flooded by background gradient until every
    # pixel saturates at zero, where MSE gradients vanish for good.  A thin
    # polyline covers on the order of 1/resolution of the canvas, so the head
    # starts at that rate, floored well under the midpoint so small canvases
    # stay quiet too.  Starting below the on-rate costs nothing: positive
    # pixels carry near-unit error and pull their logits up immediately.
    # The field head keeps a zero start: its narrow-band target is high-mean.
    recon["head.b"].data[:] = dtype(min(-4.0, -np.log(cfg.resolution - 1.0)))
    return EmbedParams(encoder=encoder, recon=recon, dist=dist)


# ---------------------------------------------------------------------------
# forward passes

_COORD_CACHE: dict = {}


def build_input(images: np.ndarray, cfg: EmbedConfig) -> np.ndarray:
    """Stack stroke image(s) with coordinate channels into (N, C, res, res).

    Accepts one (res, res) image or a batch (N, res, res); channel 0 is
    always the image itself.
    """
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (cfg.resolution, cfg.resolution):
        raise DataError(
            f"expected images of shape ({cfg.resolution}, {cfg.resolution}), got {arr.shape}"
        )
    n = arr.shape[0]
    if not cfg.coordconv:
        return arr[:, None, :, :]
    key = cfg.resolution
    if key not in _COORD_CACHE:
        xc, yc = coord_channels(key)
        _COORD_CACHE[key] = np.stack([xc, yc]).astype(np.float32)
    coords = np.broadcast_to(_COORD_CACHE[key], (n, 2, key, key))
    return np.concatenate([arr[:, None, :, :], coords], axis=1)


def _conv(x, group: dict, name: str, stride: int):
    w = group[f"{name}.w"]
    b = group[f"{name}.b"]
    y = conv2d(x, w, stride=stride, padding=1)
    return add(y, reshape(b, (1, -1, 1, 1)))


def encode(inputs, params: EmbedParams, cfg: EmbedConfig) -> Tensor:
    """Multi-channel image batch -> (N, embed_dim) embeddings."""
    x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=np.float32))
    if x.data.ndim != 4 or x.data.shape[1] != cfg.in_channels:
        raise DataError(
            f"encoder expects (N, {cfg.in_channels}, {cfg.resolution}, {cfg.resolution}),"
            f" got {x.data.shape}"
        )
    pe = params.encoder
    x = relu(_conv(x, pe, "stem", 1))
    for i in range(len(cfg.widths)):
        x = relu(_conv(x, pe, f"s{i}a", 1))
        x = relu(_conv(x, pe, f"s{i}b", 2))
    return dense(flatten(x), pe["fc.w"], pe["fc.b"])


def _decode(e, group: dict, cfg: EmbedConfig) -> Tensor:
    x = relu(dense(e, group["fc.w"], group["fc.b"]))
    side = cfg.bottom_side
    x = reshape(x, (-1, cfg.widths[-1], side, side))
    for i in reversed(range(len(cfg.widths))):
        x = upsample2x_nearest(x)
        x = relu(_conv(x, group, f"s{i}b", 1))
        x = relu(_conv(x, group, f"s{i}a", 1))
    return sigmoid(_conv(x, group, "head", 1))


def decode_reconstruction(e, params: EmbedParams, cfg: EmbedConfig) -> Tensor:
    return _decode(e, params.recon, cfg)


def decode_distance(e, params: EmbedParams, cfg: EmbedConfig) -> Tensor:
    return _decode(e, params.dist, cfg)


def embed_loss(inputs, recon: Tensor, df_target, df_pred, gamma: float):
    """Combined loss: reconstruction MSE plus gamma-weighted field MSE.

    Returns (total, recon_term, field_term); the field term is a zero scalar
    when the field head is disabled (df_target/df_pred None).
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=np.float32))
    stroke_channel = x.data[:, :1]
    l_recon = mse_loss(recon, stroke_channel)
    if df_pred is None or df_target is None:
        l_dis = Tensor(np.zeros((), dtype=l_recon.dtype))
        return l_recon, l_recon, l_dis
    tgt = np.asarray(df_target)
    if tgt.ndim == 3:
        tgt = tgt[:, None]
    l_dis = mse_loss(df_pred, tgt)
    l_em = add(l_recon, mul(l_dis, float(gamma)))
    return l_em, l_recon, l_dis


# ---------------------------------------------------------------------------
# training

def training_images(corpus: Sequence[LabeledSketch], cfg: EmbedConfig):
    """Rasterize every stroke, plus every labeled group, as training items.

    Returns (images float32 (M,res,res), field targets or None).  Group
    composites are extra data for the same encoder, so group embeddings live
    in the stroke embedding space.
    """
    stroke_sets = []
    for ls in corpus:
        sk = ls.sketch
        if sk.resolution != cfg.resolution:
            raise DataError(
                f"sketch resolution {sk.resolution} != config resolution {cfg.resolution}"
            )
        for s in sk.strokes:
            stroke_sets.append([s])
        if ls.labels is not None:
            for part in sorted(set(ls.labels)):
                members = [s for s, lab in zip(sk.strokes, ls.labels) if lab == part]
                stroke_sets.append(members)
    if not stroke_sets:
        raise DataError("empty corpus")
    imgs = np.stack([
        rasterize(group, cfg.resolution).astype(np.float32) for group in stroke_sets
    ])
    if not cfg.distance_field:
        return imgs, None
    fields = np.stack([
        distance_field(group, cfg.resolution, cfg.k_band).grid.astype(np.float32)
        for group in stroke_sets
    ])
    return imgs, fields


def train_embedding(
    corpus: Sequence[LabeledSketch],
    cfg: EmbedConfig,
    params: EmbedParams | None = None,
    state: AdamState | None = None,
    start_epoch: int = 0,
):
    """Train encoder and decoders; returns (params, state, log rows).

    Log rows are (epoch, total, recon, field) means.  Epoch shuffles draw
    from per-epoch seeded streams, so resuming at epoch k reproduces the
    uninterrupted run exactly.
    """
    imgs, fields = training_images(corpus, cfg)
    m = imgs.shape[0]
    if params is None:
        params = init_params(cfg)
    if state is None:
        state = AdamState(lr=cfg.learning_rate)
    trainable = dict(params.all())
    if not cfg.distance_field:
        # field head sees no gradient; keep it out of the optimizer entirely
        trainable = {k: v for k, v in trainable.items() if not k.startswith("dis.")}
    log = []
    bs = max(1, cfg.batch_size)
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1, epoch)))
        perm = rng.permutation(m)
        sums = np.zeros(3)
        for lo in range(0, m, bs):
            idx = perm[lo:lo + bs]
            x = build_input(imgs[idx], cfg)
            tgt = fields[idx] if fields is not None else None
            with Tape() as tape:
                e = encode(x, params, cfg)
                recon = decode_reconstruction(e, params, cfg)
                dfp = decode_distance(e, params, cfg) if cfg.distance_field else None
                l_em, l_recon, l_dis = embed_loss(x, recon, tgt, dfp, cfg.gamma_balance)
                zero_grad(trainable)
                backward(tape, l_em)
            adam_step(trainable, None, state)
            sums += np.array([l_em.item(), l_recon.item(), l_dis.item()]) * len(idx)
        log.append((epoch, *(sums / m)))
    return params, state, log


def evaluate_reconstruction(corpus: Sequence[LabeledSketch], params: EmbedParams,
                            cfg: EmbedConfig, batch_size: int = 64) -> float:
    """Mean squared reconstruction error over all individual stroke images."""
    imgs = []
    for ls in corpus:
        for s in ls.sketch.strokes:
            imgs.append(rasterize([s], cfg.resolution).astype(np.float32))
    if not imgs:
        raise DataError("empty corpus")
    imgs = np.stack(imgs)
    total = 0.0
    for lo in range(0, imgs.shape[0], batch_size):
        chunk = imgs[lo:lo + batch_size]
        x = build_input(chunk, cfg)
        e = encode(x, params, cfg)
        recon = decode_reconstruction(e, params, cfg)
        total += float(((recon.data[:, 0] - chunk) ** 2).mean()) * chunk.shape[0]
    return total / imgs.shape[0]


# ---------------------------------------------------------------------------
# frozen embedding extraction

def embed_group(sketch: Sketch, member_ids: Iterable[int], params: EmbedParams,
                cfg: EmbedConfig) -> np.ndarray:
    """Embedding of the composite image of the given strokes; the empty group
    embeds the all-zero image (the decoder start context)."""
    img = compose_group_image(sketch, member_ids, cfg.resolution)
    e = encode(build_input(img.astype(np.float32), cfg), params, cfg)
    return e.data[0].copy()


class FrozenEmbedder:
    """Encoder wrapper used after embedding training: no decoders, no grads."""

    def __init__(self, params: EmbedParams, cfg: EmbedConfig):
        self.params = params
        self.cfg = cfg
        self._empty: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.cfg.embed_dim

    def embed_images(self, images: np.ndarray) -> np.ndarray:
        e = encode(build_input(images, self.cfg), self.params, self.cfg)
        return e.data

    def embed_strokes(self, sketch: Sketch) -> np.ndarray:
        imgs = np.stack([
            rasterize([s], self.cfg.resolution).astype(np.float32)
            for s in sketch.strokes
        ])
        return self.embed_images(imgs)

    def embed_group(self, sketch: Sketch, member_ids: Iterable[int]) -> np.ndarray:
        return embed_group(sketch, member_ids, self.params, self.cfg)

    def embed_empty(self) -> np.ndarray:
        if self._empty is None:
            zero = np.zeros((self.cfg.resolution, self.cfg.resolution), dtype=np.float32)
            self._empty = self.embed_images(zero[None])[0].copy()
        return self._empty


# ---------------------------------------------------------------------------
# persistence

def params_arrays(params: EmbedParams) -> dict:
    return params.all()


def params_from_arrays(arrays: dict, cfg: EmbedConfig) -> EmbedParams:
    ref = init_params(cfg, rng=np.random.default_rng(0))
    out = EmbedParams(encoder={}, recon={}, dist={})
    groups = {"enc": out.encoder, "rec": out.recon, "dis": out.dist}
    ref_all = ref.all()
    for full, reft in ref_all.items():
        if full not in arrays:
            raise DataError(f"checkpoint missing parameter {full}")
        arr = np.asarray(arrays[full], dtype=np.float32)
        if arr.shape != reft.data.shape:
            raise DataError(
                f"checkpoint parameter {full} has shape {arr.shape}, expected {reft.data.shape}"
            )
        prefix, name = full.split(".", 1)
        groups[prefix][name] = Tensor(arr.copy(), requires_grad=True)
    extra = set(arrays) - set(ref_all)
    if extra:
        raise DataError(f"checkpoint has unexpected parameters: {sorted(extra)[:3]}")
    return out
