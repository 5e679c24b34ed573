"""Auto-regressive stroke-grouping transformer.

A self-attention encoder turns position-tagged stroke embeddings into stroke
codes.  A decoder then emits one group code per step, conditioned on the
groups already produced (their composite images re-embedded by the frozen
stroke encoder) and on which strokes remain unassigned.  Group membership is
read out pointer-style: stroke i joins step j's group when
sigmoid(code_i . group_code_j) clears the selection threshold, and strokes
are frozen once assigned.

Each decode step is bound to a fixed part of the vocabulary (the vocabulary's
decode order), so group j carries a semantic label by position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import DataError
from .autodiff import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    causal_mask,
    clamp,
    concat,
    dense,
    dropout,
    getitem,
    glorot_uniform,
    layer_norm,
    log,
    matmul,
    mul,
    multi_head_attention,
    neg,
    pow_const,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    sub,
    zero_grad,
)
from .data import PartVocabulary, Sketch, part_decode_order


@dataclass(frozen=True)
class SegConfig:
    layers: int = 4
    heads: int = 4
    dropout: float = 0.4
    model_dim: int = 64
    gamma_focus: float = 2.0
    threshold: float = 0.5
    group_order: str = "freq-desc"
    schedule: tuple = (1.0, 0.2)
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    ffn_mult: int = 4
    context_mode: str = "flag"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(self.schedule))
        if not 0.0 <= self.dropout < 1.0:
            raise DataError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.gamma_focus < 0:
            raise DataError("gamma_focus must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise DataError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.model_dim % self.heads:
            raise DataError(f"model_dim {self.model_dim} not divisible by {self.heads} heads")
        if self.context_mode not in ("flag", "mask"):
            raise DataError(f"context_mode must be 'flag' or 'mask', got {self.context_mode!r}")


@dataclass
class DecodeState:
    """Rolling decoder state: which step we are at, which strokes are taken,
    and the embeddings of the start token plus all groups emitted so far."""

    step: int
    assigned: np.ndarray
    context: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.context) != self.step + 1:
            raise DataError(
                f"decode step {self.step} needs {self.step + 1} context entries,"
                f" got {len(self.context)}"
            )


@dataclass
class SelectionMatrix:
    """Pointer probabilities and the finalized one-label-per-stroke matrix.

    Columns follow the vocabulary's name order; probability cells of decode
    steps that never ran (early stop) stay 0.  ``fallback`` marks strokes
    that no step selected and that were assigned to their argmax column."""

    probs: np.ndarray
    membership: np.ndarray
    fallback: np.ndarray
    steps_run: int

    def __post_init__(self):
        if self.membership.shape != self.probs.shape:
            raise DataError("probability and membership shapes differ")
        rows = self.membership.sum(axis=1)
        if not np.all(rows == 1):
            raise DataError("finalized membership must have exactly one part per stroke")


# ---------------------------------------------------------------------------
# parameters

def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal position codes, shape (n, d), float32."""
    if d % 2:
        raise ValueError(f"positional encoding dim must be even, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.empty((n, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(np.float32)


def _block_shapes(prefix: str, cfg: SegConfig, cross: bool) -> dict:
    d = cfg.model_dim
    h = cfg.ffn_mult * d
    shapes = {}
    attns = ["self", "cross"] if cross else ["attn"]
    for a in attns:
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{a}.{w}"] = (d, d)
    n_ln = 3 if cross else 2
    for k in range(1, n_ln + 1):
        shapes[f"{prefix}.ln{k}.g"] = (d,)
        shapes[f"{prefix}.ln{k}.b"] = (d,)
    shapes[f"{prefix}.ffn.w1"] = (d, h)
    shapes[f"{prefix}.ffn.b1"] = (h,)
    shapes[f"{prefix}.ffn.w2"] = (h, d)
    shapes[f"{prefix}.ffn.b2"] = (d,)
    return shapes


def param_shapes(cfg: SegConfig) -> dict:
    shapes = {"flag.emb": (2, cfg.model_dim)}
    for i in range(cfg.layers):
        shapes.update(_block_shapes(f"enc{i}", cfg, cross=False))
        shapes.update(_block_shapes(f"dec{i}", cfg, cross=True))
    return shapes


def init_params(cfg: SegConfig, rng: np.random.Generator | None = None,
                dtype=np.float32) -> dict:
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 10)))
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            params[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
        elif name.endswith((".b", ".b1", ".b2")):
            params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        else:
            params[name] = Tensor(glorot_uniform(rng, shape, dtype), requires_grad=True)
    # Both pointer operands come out of a layer norm, so their raw dot
    # product starts with standard deviation ~sqrt(model_dim) and the
    # selection sigmoid saturates for wide models, which stalls training at
    # the constant-prediction plateau.  Starting the group-code gain at
    # 1/sqrt(d) puts the initial logits near unit scale; the gain is
    # learnable and free to grow back.
    pointer_gain = params[f"dec{cfg.layers - 1}.ln3.g"]
    pointer_gain.data[:] = dtype(1.0 / np.sqrt(cfg.model_dim))
    return params


def params_from_arrays(arrays: dict, cfg: SegConfig) -> dict:
    shapes = param_shapes(cfg)
    missing = set(shapes) - set(arrays)
    if missing:
        raise DataError(f"checkpoint missing parameters: {sorted(missing)[:3]}")
    extra = set(arrays) - set(shapes)
    if extra:
        raise DataError(f"checkpoint has unexpected parameters: {sorted(extra)[:3]}")
    params = {}
    for name, shape in shapes.items():
        arr = np.asarray(arrays[name], dtype=np.float32)
        if arr.shape != shape:
            raise DataError(f"checkpoint parameter {name} has shape {arr.shape}, expected {shape}")
        params[name] = Tensor(arr.copy(), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# network blocks

def _attend(xq, xkv, params, prefix, cfg, mask):
    return multi_head_attention(
        xq, xkv, xkv, cfg.heads,
        params[f"{prefix}.wq"], params[f"{prefix}.wk"],
        params[f"{prefix}.wv"], params[f"{prefix}.wo"],
        mask=mask,
    )


def _ffn(x, params, prefix):
    h = relu(dense(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return dense(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _residual(x, sub_out, params, ln, cfg, training, rng):
    y = dropout(sub_out, cfg.dropout, rng, training)
    return layer_norm(add(x, y), params[f"{ln}.g"], params[f"{ln}.b"])


def encode_strokes(embeddings, params: dict, cfg: SegConfig,
                   training: bool = False, rng=None,
                   positional: bool = True) -> Tensor:
    """Stroke embeddings (S, model_dim) -> stroke codes (S, model_dim)."""
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    if emb.ndim != 2 or emb.shape[1] != cfg.model_dim:
        raise DataError(f"expected (S, {cfg.model_dim}) embeddings, got {emb.shape}")
    if emb.shape[0] == 0:
        raise DataError("no strokes to encode")
    x_np = emb.astype(np.float32)
    if positional:
        x_np = x_np + positional_encoding(emb.shape[0], cfg.model_dim)
    x = Tensor(x_np)
    for i in range(cfg.layers):
        p = f"enc{i}"
        x = _residual(x, _attend(x, x, params, f"{p}.attn", cfg, None),
                      params, f"{p}.ln1", cfg, training, rng)
        x = _residual(x, _ffn(x, params, f"{p}.ffn"),
                      params, f"{p}.ln2", cfg, training, rng)
    return x


def decode_group(state: DecodeState, stroke_codes, params: dict, cfg: SegConfig,
                 training: bool = False, rng=None,
                 n_parts: int | None = None) -> Tensor:
    """One decoder step: group code (model_dim,) for step ``state.step``.

    The decoder input is the start token followed by the embeddings of the
    groups emitted so far (causal self-attention).  Cross-attention sees the
    stroke codes, with per-stroke assigned/remaining status injected either
    as a learned flag embedding added to the codes ("flag" mode) or by
    masking assigned strokes out ("mask" mode).
    """
    if n_parts is not None and state.step >= n_parts:
        raise ValueError(f"decode step {state.step} out of range for {n_parts} parts")
    codes = stroke_codes if isinstance(stroke_codes, Tensor) \
        else Tensor(np.asarray(stroke_codes, dtype=np.float32))
    s = codes.data.shape[0]
    if state.assigned.shape != (s,):
        raise DataError(f"assigned mask shape {state.assigned.shape} != stroke count {s}")
    seq = np.stack(state.context).astype(np.float32)
    seq = seq + positional_encoding(seq.shape[0], cfg.model_dim)
    x = Tensor(seq)
    self_mask = causal_mask(seq.shape[0])
    if cfg.context_mode == "flag":
        flags = getitem(params["flag.emb"], state.assigned.astype(np.intp))
        kv = add(codes, flags)
        cross_mask = None
    else:
        kv = codes
        remaining = ~state.assigned
        # never let every key be masked out; attention would degrade to noise
        cross_mask = np.broadcast_to(remaining if remaining.any() else np.ones(s, bool),
                                     (seq.shape[0], s))
    for i in range(cfg.layers):
        p = f"dec{i}"
        x = _residual(x, _attend(x, x, params, f"{p}.self", cfg, self_mask),
                      params, f"{p}.ln1", cfg, training, rng)
        x = _residual(x, _attend(x, kv, params, f"{p}.cross", cfg, cross_mask),
                      params, f"{p}.ln2", cfg, training, rng)
        x = _residual(x, _ffn(x, params, f"{p}.ffn"),
                      params, f"{p}.ln3", cfg, training, rng)
    return getitem(x, state.step)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def select_strokes(stroke_codes, group_code, threshold: float = 0.5,
                   assigned: np.ndarray | None = None):
    """Pointer readout: p_i = sigmoid(code_i . group_code).

    A stroke joins the group iff p_i > threshold strictly (a dot product of 0
    gives exactly 0.5 and is NOT selected) and the stroke is not already
    assigned to an earlier group.
    Returns (probabilities, member index list).
    """
    codes = stroke_codes.data if isinstance(stroke_codes, Tensor) else np.asarray(stroke_codes)
    g = group_code.data if isinstance(group_code, Tensor) else np.asarray(group_code)
    probs = _stable_sigmoid(codes.astype(np.float64) @ g.astype(np.float64))
    take = probs > threshold
    if assigned is not None:
        take = take & ~assigned
    return probs, [int(i) for i in np.nonzero(take)[0]]


def focal_group_loss(probs: Tensor, membership: np.ndarray, gamma: float) -> Tensor:
    """Focal binary loss summed over every (stroke, step) cell.

    membership is the binary ground-truth matrix aligned with probs;
    probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    m = np.asarray(membership, dtype=probs.dtype if isinstance(probs, Tensor) else np.float64)
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    if m.shape != probs.data.shape:
        raise ValueError(f"membership shape {m.shape} != probs shape {probs.data.shape}")
    p = clamp(probs, 1e-7, 1.0 - 1e-7)
    inv = sub(1.0, p)
    pos = mul(mul(Tensor(m), pow_const(inv, gamma)), log(p))
    neg_term = mul(mul(Tensor(1.0 - m), pow_const(p, gamma)), log(inv))
    return neg(reduce_sum(add(pos, neg_term)))


def schedule_ratio(progress: float, endpoints: tuple = (1.0, 0.2)) -> float:
    """Linear ground-truth-context ratio: endpoints[0] at 0, endpoints[1] at 1."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {progress}")
    start, end = endpoints
    # two-coefficient form so the endpoints come out exact in floating point
    return (1.0 - progress) * start + progress * end


# ---------------------------------------------------------------------------
# training

def _corpus_vocab(corpus) -> PartVocabulary:
    if not corpus:
        raise DataError("empty corpus")
    vocab = corpus[0].vocab
    for ls in corpus:
        if not ls.is_labeled:
            raise DataError("segmentation training needs labeled sketches")
        if ls.vocab.names != vocab.names:
            raise DataError(
                f"vocabulary mismatch: {ls.vocab.names} vs {vocab.names}"
            )
    return vocab


def _prepare(corpus, embedder, order_idx):
    """Cache everything the frozen encoder provides: stroke embeddings,
    per-step ground-truth membership columns and group embeddings."""
    entries = []
    for ls in corpus:
        sk = ls.sketch
        s = len(sk.strokes)
        emb = embedder.embed_strokes(sk)
        m_step = np.zeros((s, len(order_idx)), dtype=np.float64)
        gt_groups = []
        gt_embs = []
        for j, part in enumerate(order_idx):
            ids = [i for i, lab in enumerate(ls.labels) if lab == part]
            m_step[ids, j] = 1.0
            gt_groups.append(ids)
            gt_embs.append(embedder.embed_group(sk, ids))
        entries.append({
            "sketch": sk,
            "emb": emb,
            "m_step": m_step,
            "gt_groups": gt_groups,
            "gt_embs": gt_embs,
        })
    return entries


def _pass1_groups(entry, params, cfg, start):
    """Teacher-forced evaluation pass: predicted member ids per step."""
    codes = encode_strokes(entry["emb"], params, cfg, training=False)
    s = codes.data.shape[0]
    c = len(entry["gt_groups"])
    assigned = np.zeros(s, dtype=bool)
    context = [start]
    pred = []
    for j in range(c):
        state = DecodeState(step=j, assigned=assigned.copy(), context=list(context))
        g = decode_group(state, codes, params, cfg, training=False, n_parts=c)
        _, members = select_strokes(codes, g, cfg.threshold, assigned)
        pred.append(members)
        assigned[members] = True
        context.append(entry["gt_embs"][j])  # ground-truth context in pass 1
    return pred


def _sketch_loss(entry, params, cfg, ratio, rng, embedder, start):
    """Scheduled-sampling pass: mixed contexts, focal loss over all steps."""
    sk = entry["sketch"]
    c = len(entry["gt_groups"])
    pred_groups = _pass1_groups(entry, params, cfg, start)
    use_gt = rng.random(max(c - 1, 0)) < ratio
    context = [start]
    member_sets = []
    for m in range(c - 1):
        if use_gt[m]:
            context.append(entry["gt_embs"][m])
            member_sets.append(entry["gt_groups"][m])
        else:
            context.append(embedder.embed_group(sk, pred_groups[m]))
            member_sets.append(pred_groups[m])
    codes = encode_strokes(entry["emb"], params, cfg, training=True, rng=rng)
    s = codes.data.shape[0]
    assigned = np.zeros(s, dtype=bool)
    cols = []
    for j in range(c):
        state = DecodeState(step=j, assigned=assigned.copy(), context=context[:j + 1])
        g = decode_group(state, codes, params, cfg, training=True, rng=rng, n_parts=c)
        logits = matmul(codes, reshape(g, (cfg.model_dim, 1)))
        cols.append(sigmoid(logits))
        if j < c - 1:
            assigned[member_sets[j]] = True
    probs = concat(cols, axis=1)
    return focal_group_loss(probs, entry["m_step"], cfg.gamma_focus)


def train_segmenter(
    corpus,
    embedder,
    cfg: SegConfig,
    params: dict | None = None,
    state: AdamState | None = None,
    start_epoch: int = 0,
    vocab: PartVocabulary | None = None,
):
    """Train the grouping transformer against a frozen embedder.

    Returns (params, state, vocab-with-decode-order, log rows); log rows are
    (epoch, mean focal loss, ground-truth-context ratio).
    """
    base_vocab = _corpus_vocab(corpus)
    if vocab is None:
        vocab = part_decode_order(corpus, base_vocab, cfg.group_order, cfg.seed)
    elif vocab.names != base_vocab.names:
        raise DataError(f"vocabulary mismatch: {vocab.names} vs {base_vocab.names}")
    order_idx = [vocab.index(name) for name in vocab.order]
    entries = _prepare(corpus, embedder, order_idx)
    start = embedder.embed_empty()
    if params is None:
        params = init_params(cfg)
    if state is None:
        state = AdamState(lr=cfg.learning_rate)
    n = len(entries)
    bs = max(1, cfg.batch_size)
    log_rows = []
    for epoch in range(start_epoch, cfg.epochs):
        progress = epoch / max(cfg.epochs - 1, 1)
        ratio = schedule_ratio(progress, cfg.schedule)
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2, epoch)))
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            with Tape() as tape:
                total = None
                for i in idx:
                    loss = _sketch_loss(entries[i], params, cfg, ratio, rng, embedder, start)
                    total = loss if total is None else add(total, loss)
                total = mul(total, 1.0 / len(idx))
                zero_grad(params)
                backward(tape, total)
            adam_step(params, None, state)
            epoch_loss += total.item() * len(idx)
        log_rows.append((epoch, epoch_loss / n, ratio))
    return params, state, vocab, log_rows


# ---------------------------------------------------------------------------
# inference

def infer(sketch: Sketch, embedder, params: dict, cfg: SegConfig,
          vocab: PartVocabulary):
    """Label every stroke of a sketch.

    Decode steps follow vocab.order; assignments freeze as they happen; the
    loop stops early once no stroke remains; any stroke never selected falls
    back to its argmax step (recorded in the fallback mask).  Matrix columns
    are vocabulary name order.
    Returns (SelectionMatrix, label tuple).
    """
    order_idx = [vocab.index(name) for name in vocab.order]
    c = len(order_idx)
    emb = embedder.embed_strokes(sketch)
    codes = encode_strokes(emb, params, cfg, training=False)
    s = codes.data.shape[0]
    probs_mat = np.zeros((s, c), dtype=np.float64)
    membership = np.zeros((s, c), dtype=np.uint8)
    assigned = np.zeros(s, dtype=bool)
    context = [embedder.embed_empty()]
    steps_run = 0
    ran_parts = []
    for j in range(c):
        if assigned.all():
            break
        state = DecodeState(step=j, assigned=assigned.copy(), context=list(context))
        g = decode_group(state, codes, params, cfg, training=False, n_parts=c)
        probs, members = select_strokes(codes, g, cfg.threshold, assigned)
        part = order_idx[j]
        probs_mat[:, part] = probs
        ran_parts.append(part)
        membership[members, part] = 1
        assigned[members] = True
        steps_run += 1
        context.append(embedder.embed_group(sketch, members))
    fallback = ~assigned
    if fallback.any():
        ran = np.array(ran_parts)
        for i in np.nonzero(fallback)[0]:
            best = ran[int(np.argmax(probs_mat[i, ran]))]
            membership[i, best] = 1
    sel = SelectionMatrix(probs=probs_mat, membership=membership,
                          fallback=fallback, steps_run=steps_run)
    labels = tuple(int(np.argmax(membership[i])) for i in range(s))
    return sel, labels
