"""Command line driver: every subcommand end to end on tiny inputs."""

import json
import os
import re
import sys

import pytest

from sketchseg.cli import main
from sketchseg.data import parse_corpus

RES = 16

EMBED_BASE = (
    "--resolution", 16, "--widths", "4,8", "--embed-dim", 8,
    "--batch-size", 4, "--lr", 1e-3, "--seed", 0,
)
EMBED_FLAGS = EMBED_BASE + ("--epochs", 2)
# the transformer consumes the autoencoder's embeddings directly, so
# model-dim must match embed-dim above
SEG_FLAGS = (
    "--layers", 1, "--heads", 2, "--model-dim", 8, "--dropout", 0.0,
    "--epochs", 2, "--batch-size", 2, "--lr", 1e-2, "--seed", 0,
)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def shop(tmp_path_factory):
    """One synthetic corpus with both checkpoints trained on it."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.ndjson"
    embed = root / "embed.ckpt"
    seg = root / "seg.ckpt"
    assert run("synth", "--template", "face", "--count", 6,
               "--resolution", RES, "--seed", 3, "--out", corpus) == 0
    assert run("train-embed", "--corpus", corpus, "--out", embed, *EMBED_FLAGS) == 0
    assert run("train-seg", "--corpus", corpus, "--embed-checkpoint", embed,
               "--out", seg, *SEG_FLAGS) == 0
    return {"root": root, "corpus": corpus, "embed": embed, "seg": seg}


# ---------------------------------------------------------------------------
# parsing and exit codes

def test_missing_subcommand_exits_one(capsys):
    assert main([]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_flag_exits_one(tmp_path, capsys):
    assert run("synth", "--frobnicate", "--out", tmp_path / "c") == 1


def test_bad_template_choice_exits_one(tmp_path):
    assert run("synth", "--template", "dog", "--out", tmp_path / "c") == 1


# ---------------------------------------------------------------------------
# synth

def test_synth_writes_requested_count(tmp_path, capsys):
    out = tmp_path / "c.ndjson"
    assert run("synth", "--template", "face", "--count", 4, "--resolution", RES,
               "--seed", 1, "--out", out) == 0
    assert "wrote 4 sketches" in capsys.readouterr().out
    corpus = parse_corpus(out.read_bytes())
    assert len(corpus) == 4
    assert corpus[0].vocab.names == ("head", "eye", "mouth")
    assert all(ls.is_labeled for ls in corpus)


def test_synth_same_seed_same_bytes(tmp_path):
    a, b, c = (tmp_path / n for n in ("a", "b", "c"))
    for out, seed in ((a, 1), (b, 1), (c, 2)):
        assert run("synth", "--count", 3, "--resolution", RES,
                   "--seed", seed, "--out", out) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_synth_flags_override_config_file(tmp_path):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"count": 3, "resolution": RES, "seed": 1}))
    out = tmp_path / "c.ndjson"
    assert run("synth", "--config", cfg, "--out", out) == 0
    assert len(parse_corpus(out.read_bytes())) == 3
    assert run("synth", "--config", cfg, "--count", 5, "--out", out) == 0
    assert len(parse_corpus(out.read_bytes())) == 5


def test_synth_rejects_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"cnt": 3}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "c") == 1
    assert "cnt" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# convert

def test_convert_is_idempotent_and_pure(shop, tmp_path):
    before = shop["corpus"].read_bytes()
    once = tmp_path / "once.ndjson"
    twice = tmp_path / "twice.ndjson"
    assert run("convert", "--in", shop["corpus"], "--out", once) == 0
    assert run("convert", "--in", once, "--out", twice) == 0
    assert once.read_bytes() == twice.read_bytes()
    assert shop["corpus"].read_bytes() == before


def test_convert_malformed_line_is_named(tmp_path, capsys):
    src = tmp_path / "bad.ndjson"
    good = json.dumps({"strokes": [[[1, 1], [2, 2]]], "resolution": RES})
    src.write_text(good + "\n{oops\n")
    assert run("convert", "--in", src, "--out", tmp_path / "out") == 2
    assert "line 2" in capsys.readouterr().err


def test_convert_quickdraw_with_normalize(tmp_path):
    src = tmp_path / "qd.ndjson"
    rec = {"word": "cat", "drawing": [[[0, 30, 60], [0, 15, 8]], [[5, 20], [40, 40]]]}
    src.write_text(json.dumps(rec) + "\n")
    out = tmp_path / "native.ndjson"
    assert run("convert", "--in", src, "--format", "ndjson-quickdraw",
               "--normalize", RES, "--out", out) == 0
    (ls,) = parse_corpus(out.read_bytes())
    assert ls.sketch.resolution == RES
    assert ls.labels is None
    assert ls.sketch.category == "cat"
    assert len(ls.sketch.strokes) == 2
    for s in ls.sketch.strokes:
        for p in s.points:
            assert 0.0 <= p.x < RES and 0.0 <= p.y < RES


def test_convert_rejects_unknown_format(tmp_path):
    src = tmp_path / "c.ndjson"
    src.write_text("")
    assert run("convert", "--in", src, "--format", "csv", "--out", tmp_path / "o") == 1


# ---------------------------------------------------------------------------
# rasterize

def test_rasterize_writes_stroke_and_field_images(shop, tmp_path, capsys):
    prefix = tmp_path / "img"
    assert run("rasterize", "--in", shop["corpus"], "--index", 0, "--df",
               "--out-prefix", prefix) == 0
    strokes = tmp_path / "img_strokes.pgm"
    field = tmp_path / "img_field.pgm"
    for path in (strokes, field):
        head = path.read_bytes()[:32].split(b"\n")
        assert head[0] == b"P5"
        assert head[1] == b"16 16"
    out = capsys.readouterr().out
    assert str(strokes) in out and str(field) in out


def test_rasterize_without_df_writes_one_file(shop, tmp_path):
    prefix = tmp_path / "img"
    assert run("rasterize", "--in", shop["corpus"], "--out-prefix", prefix) == 0
    assert (tmp_path / "img_strokes.pgm").exists()
    assert not (tmp_path / "img_field.pgm").exists()


def test_rasterize_index_out_of_range(shop, tmp_path, capsys):
    assert run("rasterize", "--in", shop["corpus"], "--index", 99,
               "--out-prefix", tmp_path / "img") == 2
    assert "out of range" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train-embed

def test_train_embed_writes_checkpoint_sidecar_and_opt(shop):
    embed = shop["embed"]
    assert embed.exists()
    assert (shop["root"] / "embed.ckpt.opt").exists()
    side = json.loads((shop["root"] / "embed.ckpt.json").read_text())
    assert side["epochs_done"] == 2
    assert side["config"]["resolution"] == RES
    assert side["config"]["widths"] == [4, 8]
    assert side["config"]["embed_dim"] == 8


def test_train_embed_same_seed_byte_identical(shop, tmp_path):
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    flags = EMBED_BASE + ("--epochs", 1)
    for out in (a, b):
        assert run("train-embed", "--corpus", shop["corpus"], "--out", out, *flags) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_embed_writes_log_csv(shop, tmp_path):
    out = tmp_path / "e.ckpt"
    log = tmp_path / "e.csv"
    flags = EMBED_BASE + ("--epochs", 1)
    assert run("train-embed", "--corpus", shop["corpus"], "--out", out,
               "--log", log, *flags) == 0
    lines = log.read_text().splitlines()
    assert lines[0] == "epoch,total,recon,field"
    assert len(lines) == 2
    assert lines[1].startswith("0,")


def test_train_embed_resume_matches_straight_run(shop, tmp_path):
    split = tmp_path / "split.ckpt"
    assert run("train-embed", "--corpus", shop["corpus"], "--out", split,
               *EMBED_BASE, "--epochs", 1) == 0
    assert run("train-embed", "--corpus", shop["corpus"], "--out", split,
               "--resume", "--epochs", 2) == 0
    assert split.read_bytes() == shop["embed"].read_bytes()
    side = json.loads((tmp_path / "split.ckpt.json").read_text())
    assert side["epochs_done"] == 2


def test_train_embed_resume_already_done(shop, tmp_path, capsys):
    out = tmp_path / "e.ckpt"
    flags = EMBED_BASE + ("--epochs", 1)
    assert run("train-embed", "--corpus", shop["corpus"], "--out", out, *flags) == 0
    before = out.read_bytes()
    capsys.readouterr()
    assert run("train-embed", "--corpus", shop["corpus"], "--out", out,
               "--resume", "--epochs", 1) == 0
    assert "nothing to do" in capsys.readouterr().out
    assert out.read_bytes() == before


# ---------------------------------------------------------------------------
# train-seg

def test_train_seg_requires_embed_checkpoint(shop, tmp_path, capsys):
    assert run("train-seg", "--corpus", shop["corpus"],
               "--embed-checkpoint", tmp_path / "missing.ckpt",
               "--out", tmp_path / "s.ckpt") == 2
    assert "embedding checkpoint required" in capsys.readouterr().err


def test_train_seg_sidecar_records_bundle(shop):
    side = json.loads((shop["root"] / "seg.ckpt.json").read_text())
    assert side["vocab"] == ["head", "eye", "mouth"]
    assert sorted(side["order"]) == sorted(side["vocab"])
    assert side["embed_checkpoint"] == str(shop["embed"])
    assert os.path.isabs(side["embed_checkpoint"])
    assert side["epochs_done"] == 2
    assert side["config"]["model_dim"] == 8
    assert side["config"]["layers"] == 1


def test_train_seg_log_has_schedule_column(shop, tmp_path):
    out = tmp_path / "s.ckpt"
    log = tmp_path / "s.csv"
    assert run("train-seg", "--corpus", shop["corpus"], "--embed-checkpoint",
               shop["embed"], "--out", out, "--log", log, *SEG_FLAGS) == 0
    lines = log.read_text().splitlines()
    assert lines[0] == "epoch,loss,gt_context_ratio"
    assert len(lines) == 3
    assert lines[1].split(",")[2] == "1.00000000"
    assert lines[2].split(",")[2] == "0.20000000"


def test_train_seg_rejects_unlabeled_corpus(shop, tmp_path, capsys):
    src = tmp_path / "qd.ndjson"
    pts = [[0, 10, 5], [0, 3, 9]]
    src.write_text(json.dumps({"word": "x", "drawing": [pts]}) + "\n")
    plain = tmp_path / "plain.ndjson"
    assert run("convert", "--in", src, "--format", "ndjson-quickdraw",
               "--normalize", RES, "--out", plain) == 0
    assert run("train-seg", "--corpus", plain, "--embed-checkpoint", shop["embed"],
               "--out", tmp_path / "s.ckpt", *SEG_FLAGS) == 2


# ---------------------------------------------------------------------------
# eval and invariance

def test_eval_writes_reports_and_summary(shop, tmp_path, capsys):
    prefix = tmp_path / "ev"
    assert run("eval", "--corpus", shop["corpus"], "--checkpoint", shop["seg"],
               "--out-prefix", prefix) == 0
    out = capsys.readouterr().out
    m = re.search(r"sacc=(\d\.\d{4}) gacc=(\d\.\d{4}) cacc=(\d\.\d{4})", out)
    assert m is not None
    report = json.loads((tmp_path / "ev.json").read_text())
    for key in ("sacc", "gacc", "cacc"):
        assert 0.0 <= report[key] <= 1.0
    assert float(m.group(1)) == pytest.approx(report["sacc"], abs=5e-5)
    assert (tmp_path / "ev.csv").exists()


def test_eval_vocab_mismatch(shop, tmp_path, capsys):
    rocket = tmp_path / "rocket.ndjson"
    assert run("synth", "--template", "rocket", "--count", 2,
               "--resolution", RES, "--seed", 0, "--out", rocket) == 0
    assert run("eval", "--corpus", rocket, "--checkpoint", shop["seg"],
               "--out-prefix", tmp_path / "ev") == 2
    assert "vocabulary mismatch" in capsys.readouterr().err


def test_invariance_rotation_tables(shop, tmp_path, capsys):
    prefix = tmp_path / "rot"
    assert run("invariance", "--corpus", shop["corpus"], "--checkpoint",
               shop["seg"], "--mode", "rotation", "--out-prefix", prefix) == 0
    lines = (tmp_path / "rot.csv").read_text().splitlines()
    # header + 7 angles + average + standard deviation
    assert len(lines) == 10
    assert lines[-2].startswith("Average,")
    assert lines[-1].startswith("Standard Deviation,")
    assert capsys.readouterr().out.startswith("rotation: mean sacc")


def test_invariance_offset_tables(shop, tmp_path):
    prefix = tmp_path / "off"
    assert run("invariance", "--corpus", shop["corpus"], "--checkpoint",
               shop["seg"], "--mode", "offset", "--seed", 4,
               "--distribution", "uniform", "--out-prefix", prefix) == 0
    lines = (tmp_path / "off.csv").read_text().splitlines()
    assert len(lines) == 8


def test_invariance_rejects_unknown_mode(shop, tmp_path):
    assert run("invariance", "--corpus", shop["corpus"], "--checkpoint",
               shop["seg"], "--mode", "shear", "--out-prefix", tmp_path / "x") == 1


# ---------------------------------------------------------------------------
# augment

def test_augment_stroke_is_deterministic_and_pure(shop, tmp_path):
    before = shop["corpus"].read_bytes()
    a = tmp_path / "a.ndjson"
    b = tmp_path / "b.ndjson"
    for out in (a, b):
        assert run("augment", "--corpus", shop["corpus"], "--op", "stroke",
                   "--seed", 7, "--out", out) == 0
    assert a.read_bytes() == b.read_bytes()
    assert shop["corpus"].read_bytes() == before
    corpus = parse_corpus(a.read_bytes())
    assert len(corpus) == 6
    assert all(ls.is_labeled for ls in corpus)


def test_augment_sketch_keeps_sketch_count(shop, tmp_path):
    out = tmp_path / "s.ndjson"
    assert run("augment", "--corpus", shop["corpus"], "--op", "sketch",
               "--seed", 2, "--out", out) == 0
    assert len(parse_corpus(out.read_bytes())) == 6


def test_augment_copy_paste_needs_part_names(shop, tmp_path, capsys):
    assert run("augment", "--corpus", shop["corpus"], "--op", "copy-paste",
               "--out", tmp_path / "o.ndjson") == 1
    assert "--rare and --anchor" in capsys.readouterr().err


def test_augment_copy_paste_raises_occurrence(tmp_path, capsys):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"presence": {"mouth": 0.3}}))
    corpus = tmp_path / "c.ndjson"
    assert run("synth", "--config", cfg, "--count", 8, "--resolution", RES,
               "--seed", 5, "--out", corpus) == 0
    out = tmp_path / "aug.ndjson"
    report_path = tmp_path / "report.json"
    assert run("augment", "--corpus", corpus, "--op", "copy-paste",
               "--rare", "mouth", "--anchor", "head", "--target", 0.9,
               "--seed", 1, "--out", out, "--report", report_path) == 0
    report = json.loads(report_path.read_text())
    assert report["part"] == "mouth"
    assert report["occurrence_after"] >= report["occurrence_before"]
    assert report["pastes"] >= 1
    assert report["occurrence"]["head"] == 1.0
    printed = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert printed == report
    assert len(parse_corpus(out.read_bytes())) == 8


# ---------------------------------------------------------------------------
# render

def test_render_ppm_is_deterministic(shop, tmp_path):
    a = tmp_path / "a.ppm"
    b = tmp_path / "b.ppm"
    for out in (a, b):
        assert run("render", "--corpus", shop["corpus"], "--index", 1,
                   "--out", out) == 0
    data = a.read_bytes()
    assert data.startswith(b"P6\n16 16\n255\n")
    assert len(data) == len(b"P6\n16 16\n255\n") + RES * RES * 3
    assert data == b.read_bytes()


def test_render_png_when_pillow_present(shop, tmp_path):
    out = tmp_path / "r.png"
    assert run("render", "--corpus", shop["corpus"], "--out", out) == 0
    assert out.read_bytes()[:4] == b"\x89PNG"


def test_render_png_falls_back_to_ppm(shop, tmp_path, monkeypatch, capsys):
    monkeypatch.setitem(sys.modules, "PIL", None)
    out = tmp_path / "r.png"
    assert run("render", "--corpus", shop["corpus"], "--out", out) == 0
    assert not out.exists()
    assert (tmp_path / "r.ppm").read_bytes().startswith(b"P6\n")
    assert "falling back" in capsys.readouterr().out


def test_render_with_checkpoint_predicts_labels(shop, tmp_path):
    out = tmp_path / "pred.ppm"
    assert run("render", "--corpus", shop["corpus"], "--checkpoint", shop["seg"],
               "--out", out) == 0
    assert out.exists()


# ---------------------------------------------------------------------------
# global flags

def test_threads_flag_exports_env(shop, tmp_path, monkeypatch):
    for var in ("CSEG_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    assert run("--threads", 1, "synth", "--count", 1, "--resolution", RES,
               "--seed", 0, "--out", tmp_path / "c.ndjson") == 0
    assert os.environ["CSEG_THREADS"] == "1"
    assert os.environ["OPENBLAS_NUM_THREADS"] == "1"
