"""Command-line surface for the sketch segmentation pipeline.

Single executable with subcommands: synth, convert, rasterize, train-embed,
train-seg, eval, augment, invariance, render.  Every command accepts a JSON
config file plus flag overrides (flags win); unknown config keys are rejected
before any work starts.  Exit codes: 0 ok, 1 usage or config error, 2 data
error, 3 runtime failure.
"""

import os
import sys

# BLAS thread caps must be in the environment before numpy loads, so this
# runs at import time; CSEG_THREADS mirrors the --threads flag.
_threads = os.environ.get("CSEG_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import json
from dataclasses import asdict, replace

import numpy as np

from . import ConfigError, DataError, SketchsegError
from .augment import (
    AugmentConfig,
    SemanticPasteRule,
    augment_sketch_level,
    augment_stroke_level,
    occurrence_report,
    semantic_copy_paste,
)
from .autodiff import (
    adam_state_arrays,
    adam_state_from_arrays,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    NATIVE_FORMAT,
    QUICKDRAW_FORMAT,
    PartVocabulary,
    SynthConfig,
    normalize_corpus,
    parse_corpus,
    serialize_corpus,
    synth_corpus,
)
from .embednet import (
    EmbedConfig,
    FrozenEmbedder,
    evaluate_reconstruction,
    params_arrays,
    train_embedding,
)
from .embednet import params_from_arrays as embed_params_from_arrays
from .metrics import (
    OFFSET_SIGMAS,
    ROTATION_ANGLES,
    evaluate_corpus,
    offset_invariance_test,
    rotation_invariance_test,
    write_eval_report,
    write_invariance_report,
)
from .raster import distance_field, field_to_u8, rasterize, write_pgm
from .segmenter import SegConfig, infer, train_segmenter
from .segmenter import params_from_arrays as seg_params_from_arrays

PALETTE = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
)


class _Parser(argparse.ArgumentParser):
    # usage problems must exit 1, not argparse's default 2
    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# small IO helpers

def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as e:
        raise DataError(f"{path}: {e.strerror or e}") from None


def _read_corpus(path, fmt: str = NATIVE_FORMAT):
    return parse_corpus(_read_bytes(path), fmt)


def _write_corpus(path, corpus) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_corpus(corpus))


def _read_json(path) -> dict:
    try:
        return json.loads(_read_bytes(path).decode("utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from None


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config_file(path, allowed) -> dict:
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return data


def _effective(ns, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags."""
    vals = dict(defaults)
    if getattr(ns, "config", None):
        vals.update(_load_config_file(ns.config, defaults))
    for key in defaults:
        flag = getattr(ns, key, None)
        if flag is not None:
            vals[key] = flag
    return vals


def _parse_widths(value):
    if isinstance(value, str):
        value = [int(v) for v in value.split(",") if v.strip()]
    return tuple(int(v) for v in value)


def _write_log(path, header, rows, append: bool) -> None:
    mode = "a" if append else "w"
    with open(path, mode) as fh:
        if not append:
            fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.8f}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")


# ---------------------------------------------------------------------------
# corpus commands

def cmd_synth(ns) -> None:
    defaults = {"template": "face", "count": 100, "resolution": 64, "seed": 0,
                "presence": {}}
    vals = _effective(ns, defaults)
    cfg = SynthConfig(template=vals["template"], count=int(vals["count"]),
                      resolution=int(vals["resolution"]),
                      presence=vals["presence"], seed=int(vals["seed"]))
    corpus = synth_corpus(cfg)
    _write_corpus(ns.out, corpus)
    print(f"wrote {len(corpus)} sketches to {ns.out}")


def cmd_convert(ns) -> None:
    corpus = _read_corpus(getattr(ns, "in"), ns.format)
    if ns.normalize is not None:
        corpus = normalize_corpus(corpus, int(ns.normalize))
    _write_corpus(ns.out, corpus)
    print(f"wrote {len(corpus)} sketches to {ns.out}")


def cmd_rasterize(ns) -> None:
    corpus = _read_corpus(getattr(ns, "in"))
    if not 0 <= ns.index < len(corpus):
        raise DataError(f"sketch index {ns.index} out of range (corpus has {len(corpus)})")
    sk = corpus[ns.index].sketch
    img = rasterize(sk.strokes, sk.resolution, thickness=ns.thickness)
    write_pgm(f"{ns.out_prefix}_strokes.pgm", img)
    written = [f"{ns.out_prefix}_strokes.pgm"]
    if ns.df:
        fld = distance_field(sk.strokes, sk.resolution, k=ns.k)
        write_pgm(f"{ns.out_prefix}_field.pgm", field_to_u8(fld))
        written.append(f"{ns.out_prefix}_field.pgm")
    print("wrote " + ", ".join(written))


# ---------------------------------------------------------------------------
# training commands

def _embed_defaults() -> dict:
    return {k: v for k, v in asdict(EmbedConfig()).items()}


def cmd_train_embed(ns) -> None:
    out = ns.out
    sidecar = out + ".json"
    if ns.resume:
        side = _read_json(sidecar)
        cfg = EmbedConfig(**{**side["config"],
                             "widths": _parse_widths(side["config"]["widths"])})
        start = int(side["epochs_done"])
        if ns.epochs is not None:
            cfg = replace(cfg, epochs=int(ns.epochs))
        if cfg.epochs <= start:
            print(f"checkpoint already trained for {start} epochs; nothing to do")
            return
        params = embed_params_from_arrays(load_checkpoint(out), cfg)
        state = adam_state_from_arrays(load_checkpoint(out + ".opt"),
                                       lr=cfg.learning_rate)
    else:
        vals = _effective(ns, _embed_defaults())
        vals["widths"] = _parse_widths(vals["widths"])
        cfg = EmbedConfig(**vals)
        params = None
        state = None
        start = 0
    corpus = _read_corpus(ns.corpus)
    params, state, log = train_embedding(corpus, cfg, params, state, start)
    save_checkpoint(out, params_arrays(params))
    save_checkpoint(out + ".opt", adam_state_arrays(state))
    _write_json(sidecar, {"config": asdict(cfg), "epochs_done": cfg.epochs})
    if ns.log:
        _write_log(ns.log, ["epoch", "total", "recon", "field"], log, append=ns.resume)
    final = log[-1] if log else ("-",) * 4
    print(f"trained {cfg.epochs - start} epochs; final loss {final[1]}")
    if ns.eval_mse:
        print(f"reconstruction mse: {evaluate_reconstruction(corpus, params, cfg):.6f}")


def _seg_defaults() -> dict:
    return {k: v for k, v in asdict(SegConfig()).items()}


def load_embedder(path) -> FrozenEmbedder:
    side = _read_json(path + ".json")
    cfg = EmbedConfig(**{**side["config"],
                         "widths": _parse_widths(side["config"]["widths"])})
    params = embed_params_from_arrays(load_checkpoint(path), cfg)
    return FrozenEmbedder(params, cfg)


def cmd_train_seg(ns) -> None:
    if not os.path.exists(ns.embed_checkpoint):
        raise DataError(f"embedding checkpoint required: {ns.embed_checkpoint} not found")
    embedder = load_embedder(ns.embed_checkpoint)
    out = ns.out
    sidecar = out + ".json"
    vocab = None
    if ns.resume:
        side = _read_json(sidecar)
        cfg = SegConfig(**side["config"])
        start = int(side["epochs_done"])
        if ns.epochs is not None:
            cfg = replace(cfg, epochs=int(ns.epochs))
        if cfg.epochs <= start:
            print(f"checkpoint already trained for {start} epochs; nothing to do")
            return
        params = seg_params_from_arrays(load_checkpoint(out), cfg)
        state = adam_state_from_arrays(load_checkpoint(out + ".opt"),
                                       lr=cfg.learning_rate)
        vocab = PartVocabulary(tuple(side["vocab"]), tuple(side["order"]))
    else:
        vals = _effective(ns, _seg_defaults())
        vals["schedule"] = tuple(vals["schedule"])
        cfg = SegConfig(**vals)
        params = None
        state = None
        start = 0
    corpus = _read_corpus(ns.corpus)
    params, state, vocab, log = train_segmenter(
        corpus, embedder, cfg, params, state, start, vocab)
    save_checkpoint(out, params)
    save_checkpoint(out + ".opt", adam_state_arrays(state))
    _write_json(sidecar, {
        "config": asdict(cfg),
        "vocab": list(vocab.names),
        "order": list(vocab.order),
        "embed_checkpoint": os.path.abspath(ns.embed_checkpoint),
        "epochs_done": cfg.epochs,
    })
    if ns.log:
        _write_log(ns.log, ["epoch", "loss", "gt_context_ratio"], log, append=ns.resume)
    print(f"trained {cfg.epochs - start} epochs; final loss {log[-1][1]:.6f}"
          if log else "no epochs run")


# ---------------------------------------------------------------------------
# evaluation commands

def load_bundle(path):
    """Segmentation checkpoint + sidecar -> (embedder, params, cfg, vocab)."""
    side = _read_json(path + ".json")
    cfg = SegConfig(**side["config"])
    vocab = PartVocabulary(tuple(side["vocab"]), tuple(side["order"]))
    embedder = load_embedder(side["embed_checkpoint"])
    params = seg_params_from_arrays(load_checkpoint(path), cfg)
    return embedder, params, cfg, vocab


def _check_vocab(corpus, vocab) -> None:
    names = corpus[0].vocab.names
    if names != vocab.names:
        raise DataError(
            f"vocabulary mismatch between bundle {vocab.names} and corpus {names}")


def _predictor(embedder, params, cfg, vocab):
    def predict(sketch):
        return infer(sketch, embedder, params, cfg, vocab)[1]
    return predict


def cmd_eval(ns) -> None:
    corpus = _read_corpus(ns.corpus)
    embedder, params, cfg, vocab = load_bundle(ns.checkpoint)
    _check_vocab(corpus, vocab)
    report = evaluate_corpus(_predictor(embedder, params, cfg, vocab), corpus)
    write_eval_report(report, ns.out_prefix + ".csv", ns.out_prefix + ".json")
    print(f"sacc={report.sacc:.4f} gacc={report.gacc:.4f} cacc={report.cacc:.4f}")


def cmd_invariance(ns) -> None:
    corpus = _read_corpus(ns.corpus)
    embedder, params, cfg, vocab = load_bundle(ns.checkpoint)
    _check_vocab(corpus, vocab)
    predict = _predictor(embedder, params, cfg, vocab)
    if ns.mode == "rotation":
        report = rotation_invariance_test(predict, corpus, ROTATION_ANGLES)
    else:
        report = offset_invariance_test(predict, corpus, OFFSET_SIGMAS,
                                        seed=ns.seed, distribution=ns.distribution)
    write_invariance_report(report, ns.out_prefix + ".csv", ns.out_prefix + ".json")
    print(f"{ns.mode}: mean sacc {report.average['sacc']:.4f} "
          f"(std {report.std['sacc']:.4f})")


# ---------------------------------------------------------------------------
# augmentation

def cmd_augment(ns) -> None:
    corpus = _read_corpus(ns.corpus)
    if ns.op in ("stroke", "sketch"):
        defaults = {k: v for k, v in asdict(AugmentConfig()).items()}
        vals = _effective(ns, defaults)
        vals["stroke_scale"] = tuple(vals["stroke_scale"])
        vals["sketch_scale"] = tuple(vals["sketch_scale"])
        cfg = AugmentConfig(**vals)
        rng = np.random.default_rng(cfg.seed)
        fn = augment_stroke_level if ns.op == "stroke" else augment_sketch_level
        out = [fn(ls, cfg, rng) for ls in corpus]
        report = {"op": ns.op, "sketches": len(out)}
    else:
        defaults = {"rare": None, "anchor": None, "target_occurrence": 0.5,
                    "scale_range": (0.25, 0.40), "rotation_jitter": 10.0,
                    "offset_jitter": 3.0, "inner_fraction": 0.6, "seed": 0}
        vals = _effective(ns, defaults)
        if not vals["rare"] or not vals["anchor"]:
            raise ConfigError("copy-paste needs --rare and --anchor part names")
        seed = int(vals.pop("seed"))
        rule = SemanticPasteRule(**{**vals,
                                    "scale_range": tuple(vals["scale_range"])})
        vocab = corpus[0].vocab
        out, report = semantic_copy_paste(corpus, rule, vocab, seed=seed)
        report["occurrence"] = occurrence_report(out, vocab)["sketch_occurrence"]
    _write_corpus(ns.out, out)
    if ns.report:
        _write_json(ns.report, report)
    print(json.dumps(report))


# ---------------------------------------------------------------------------
# rendering

def _render_array(sketch, labels, thickness: int) -> np.ndarray:
    res = sketch.resolution
    img = np.full((res, res, 3), 255, dtype=np.uint8)
    for s in sketch.strokes:
        mask = rasterize([s], res, thickness=thickness).astype(bool)
        color = PALETTE[labels[s.id] % len(PALETTE)]
        img[mask] = color
    return img


def _write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def cmd_render(ns) -> None:
    corpus = _read_corpus(ns.corpus)
    if not 0 <= ns.index < len(corpus):
        raise DataError(f"sketch index {ns.index} out of range (corpus has {len(corpus)})")
    ls = corpus[ns.index]
    if ns.checkpoint:
        embedder, params, cfg, vocab = load_bundle(ns.checkpoint)
        if ls.vocab.names and ls.vocab.names != vocab.names:
            raise DataError("vocabulary mismatch between bundle and corpus")
        _, labels = infer(ls.sketch, embedder, params, cfg, vocab)
    elif ls.is_labeled:
        labels = ls.labels
    else:
        labels = (0,) * len(ls.sketch.strokes)
    img = _render_array(ls.sketch, labels, ns.thickness)
    out = ns.out
    if out.endswith(".png"):
        try:
            from PIL import Image
        except ImportError:
            out = out[:-4] + ".ppm"
            print(f"Pillow not installed; falling back to {out}")
            _write_ppm(out, img)
        else:
            Image.fromarray(img, "RGB").save(out)
    else:
        _write_ppm(out, img)
    print(f"wrote {out}")


# ---------------------------------------------------------------------------
# parser

def _build_parser() -> _Parser:
    p = _Parser(prog="sketchseg",
                description="stroke-level sketch segmentation pipeline")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread cap (CSEG_THREADS mirrors this; both must be "
                        "set before numpy loads to take effect)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    s.add_argument("--config")
    s.add_argument("--template", choices=("face", "rocket"))
    s.add_argument("--count", type=int)
    s.add_argument("--resolution", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("convert", help="parse a corpus and rewrite it natively")
    s.add_argument("--in", required=True)
    s.add_argument("--format", default=NATIVE_FORMAT,
                   choices=(NATIVE_FORMAT, QUICKDRAW_FORMAT))
    s.add_argument("--normalize", type=int, default=None,
                   help="fit sketches to this resolution with a margin")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("rasterize", help="write PGM images for one sketch")
    s.add_argument("--in", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--thickness", type=int, default=1)
    s.add_argument("--df", action="store_true", help="also write the distance field")
    s.add_argument("--k", type=float, default=0.001)
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_rasterize)

    s = sub.add_parser("train-embed", help="train the stroke embedding autoencoder")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--config")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--eval-mse", action="store_true",
                   help="print reconstruction MSE on the training corpus afterwards")
    s.add_argument("--resolution", type=int)
    s.add_argument("--widths")
    s.add_argument("--embed-dim", dest="embed_dim", type=int)
    s.add_argument("--gamma", dest="gamma_balance", type=float)
    s.add_argument("--no-coordconv", dest="coordconv", action="store_false", default=None)
    s.add_argument("--no-distance-field", dest="distance_field",
                   action="store_false", default=None)
    s.add_argument("--k-band", dest="k_band", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", dest="learning_rate", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_embed)

    s = sub.add_parser("train-seg", help="train the grouping transformer")
    s.add_argument("--corpus", required=True)
    s.add_argument("--embed-checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--config")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--layers", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--dropout", type=float)
    s.add_argument("--model-dim", dest="model_dim", type=int)
    s.add_argument("--gamma", dest="gamma_focus", type=float)
    s.add_argument("--threshold", type=float)
    s.add_argument("--group-order", dest="group_order",
                   choices=("freq-desc", "freq-asc", "random"))
    s.add_argument("--context-mode", dest="context_mode", choices=("flag", "mask"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", dest="learning_rate", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_seg)

    s = sub.add_parser("eval", help="evaluate a trained model on a labeled corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("invariance", help="rotation/offset robustness tables")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mode", required=True, choices=("rotation", "offset"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--distribution", default="gaussian",
                   choices=("gaussian", "uniform"))
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_invariance)

    s = sub.add_parser("augment", help="augment a labeled corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--op", required=True, choices=("stroke", "sketch", "copy-paste"))
    s.add_argument("--config")
    s.add_argument("--report")
    s.add_argument("--seed", type=int)
    s.add_argument("--rare")
    s.add_argument("--anchor")
    s.add_argument("--target", dest="target_occurrence", type=float)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("render", help="write a colored segmentation image")
    s.add_argument("--corpus", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--checkpoint", help="predict labels instead of using ground truth")
    s.add_argument("--thickness", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    try:
        ns = _build_parser().parse_args(argv)
        if ns.threads is not None:
            os.environ["CSEG_THREADS"] = str(ns.threads)
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = str(ns.threads)
        ns.func(ns)
        return 0
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except SketchsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (OSError, FloatingPointError, ValueError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
