"""Training loop, checkpoint format, evaluation, export and CLI plumbing."""

import json
import math
import os

import numpy as np
import pytest

from multiabn import cli
from multiabn.dataset import GenConfig, generate_dataset, load_dataset, save_dataset
from multiabn.engine import (
    CheckpointError,
    TrainConfig,
    TrainingAborted,
    build_model_config,
    caption_sample,
    dump_checkpoint_text,
    evaluate_split,
    export_attention,
    load_checkpoint,
    prepare_split,
    restore_model,
    restore_optimizer,
    run_ablation,
    save_checkpoint,
    train,
    training_samples,
)
from multiabn.engine import EngineError
from multiabn.model import Model
from multiabn.optim import Adam

TINY = dict(hidden_dim=8, lstm_layers=1, feature_size=4, feature_channels=6,
            image_size=8, crop_dim=6, att_channels=5, ctx_channels=3,
            mlp_hidden=(6,), max_len=12)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("engine") / "ds"
    save_dataset(generate_dataset(5, 6, GenConfig(refs_per_target=1)), root)
    return str(root)


def tiny_config(dataset_dir, out_dir, **overrides):
    base = dict(dataset=dataset_dir, out_dir=str(out_dir), preset="toy",
                batch_size=2, max_steps=4, seed=1, checkpoint_interval=2,
                log_interval=1, model_overrides=dict(TINY))
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_train_config_defaults():
    cfg = TrainConfig(dataset="x")
    assert cfg.batch_size == 32
    assert cfg.lr == 5e-4
    assert cfg.lr_decay == 1.0
    assert (cfg.beta1, cfg.beta2) == (0.99, 0.9)
    assert cfg.mode == "full"


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(dataset="x", batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(dataset="x", mode="both")
    with pytest.raises(ValueError):
        TrainConfig(dataset="x", preset="huge")
    with pytest.raises(ValueError):
        TrainConfig(dataset="x", max_steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(dataset="x", lr_decay=0.0)
    with pytest.raises(ValueError):
        TrainConfig(dataset="x", lr_decay=1.5)


def test_train_config_round_trip():
    cfg = TrainConfig(dataset="d", mode="visual_only", batch_size=3,
                      model_overrides={"hidden_dim": 8})
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"dataset": "d", "bogus": 1})


def test_build_model_config_applies_mode_and_overrides():
    cfg = TrainConfig(dataset="d", mode="linguistic_only",
                      model_overrides={"hidden_dim": 16, "mlp_hidden": [4]})
    mcfg = build_model_config(cfg, vocab_size=30)
    assert mcfg.mode == "linguistic_only"
    assert mcfg.hidden_dim == 16
    assert mcfg.mlp_hidden == (4,)
    assert mcfg.vocab_size == 30


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    return train(tiny_config(dataset_dir, out)), out


def test_train_produces_report(trained):
    result, out = trained
    report = result.report
    assert report.completed_steps == 4
    assert len(report.losses) == 4
    for l, per, att in report.losses:
        assert np.isfinite([l, per, att]).all()
        assert per >= 0 and att >= 0
        assert l == pytest.approx(per + att, rel=1e-12)
    assert "val" in report.scores
    assert all(np.isfinite(v) for v in report.scores["val"].values())
    assert os.path.exists(os.path.join(out, "run_report.json"))
    parsed = json.loads(report.to_json())
    assert parsed["completed_steps"] == 4


def test_initial_loss_matches_uniform_heads(trained, dataset_dir):
    result, _ = trained
    vocab_size = len(result.vocab)
    first_per = result.report.losses[0][1]
    assert abs(first_per - math.log(vocab_size)) / math.log(vocab_size) < 0.1


def test_train_deterministic(dataset_dir, tmp_path):
    a = train(tiny_config(dataset_dir, tmp_path / "a", max_steps=3))
    b = train(tiny_config(dataset_dir, tmp_path / "b", max_steps=3))
    assert a.report.losses == b.report.losses
    c = train(tiny_config(dataset_dir, tmp_path / "c", max_steps=3, seed=2))
    assert c.report.losses != a.report.losses


def test_lr_decay_changes_trajectory_after_first_step(dataset_dir, tmp_path):
    flat = train(tiny_config(dataset_dir, tmp_path / "flat", max_steps=4))
    decayed = train(tiny_config(dataset_dir, tmp_path / "dk", max_steps=4,
                                lr_decay=0.5))
    assert decayed.report.losses[0] == flat.report.losses[0]
    assert decayed.report.losses[2:] != flat.report.losses[2:]
    assert decayed.report.config["lr_decay"] == 0.5


def test_full_batch_covers_every_sample(dataset_dir, tmp_path):
    # batch_size >= dataset size must average over each sample exactly once
    result = train(tiny_config(dataset_dir, tmp_path / "fb", max_steps=1,
                               batch_size=64))
    cfg = tiny_config(dataset_dir, tmp_path / "ref", max_steps=1, batch_size=64)
    bundle = load_dataset(dataset_dir)
    model_config = build_model_config(cfg, len(bundle.vocab))
    model = Model(model_config, seed=cfg.seed)
    samples = training_samples(prepare_split(bundle, "train", model_config))
    direct = np.mean([float(model.forward_loss(s)[0].data) for s in samples])
    assert result.report.losses[0][0] == pytest.approx(direct, rel=1e-12)


def test_early_stop_on_loss_threshold(dataset_dir, tmp_path):
    result = train(tiny_config(dataset_dir, tmp_path / "run", max_steps=6,
                               stop_loss=100.0))
    assert result.report.completed_steps == 1


def test_zero_steps_saves_initial_state(dataset_dir, tmp_path):
    result = train(tiny_config(dataset_dir, tmp_path / "run", max_steps=0))
    assert result.report.completed_steps == 0
    ckpt = load_checkpoint(result.checkpoint_path)
    assert ckpt.step == 0


def test_nan_loss_aborts_keeping_checkpoint(dataset_dir, tmp_path, monkeypatch):
    calls = {"n": 0}
    original = Model.forward_loss

    def poisoned(self, sample):
        out = original(self, sample)
        calls["n"] += 1
        if calls["n"] >= 3:   # second batch of two samples
            out[0].data[()] = np.nan
        return out

    monkeypatch.setattr(Model, "forward_loss", poisoned)
    with pytest.raises(TrainingAborted) as info:
        train(tiny_config(dataset_dir, tmp_path / "run", max_steps=10))
    assert info.value.step == 2
    ckpt = load_checkpoint(tmp_path / "run" / "checkpoint.ckpt")
    assert ckpt.step == 0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def fixed_inputs(dataset_dir, model_config):
    bundle = load_dataset(dataset_dir)
    return prepare_split(bundle, "train", model_config)[0].inputs


def test_checkpoint_round_trip_bit_exact(trained, dataset_dir, tmp_path):
    result, _ = trained
    inputs = fixed_inputs(dataset_dir, result.model.config)
    want = result.model.decode_greedy(inputs)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, result.model, result.vocab, step=4)
    ckpt = load_checkpoint(path)
    clone = restore_model(ckpt)
    for name, p in result.model.parameters().items():
        assert clone.parameters()[name].data.tobytes() == p.data.tobytes()
    got = clone.decode_greedy(inputs)
    assert got[0] == want[0]
    assert ckpt.vocab == result.vocab
    assert ckpt.step == 4


def test_checkpoint_restores_optimizer(dataset_dir, trained):
    result, out = trained
    ckpt = load_checkpoint(result.checkpoint_path)
    assert ckpt.adam is not None and ckpt.adam["t"] == 4
    clone = restore_model(ckpt)
    opt = restore_optimizer(ckpt, clone)
    assert isinstance(opt, Adam)
    assert opt.state.t == 4
    name = "word_head.w"
    assert np.all(np.isfinite(opt.state.m[name]))
    assert np.any(opt.state.v[name] != 0.0)
    assert ckpt.rng_state is not None


def test_checkpoint_rejects_corruption(trained, tmp_path):
    result, _ = trained
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, result.model, result.vocab)
    raw = path.read_bytes()

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad_magic)

    bad_version = tmp_path / "version.ckpt"
    bad_version.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad_version)

    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)

    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_restore_rejects_name_mismatch(trained, tmp_path):
    result, _ = trained
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, result.model, result.vocab)
    ckpt = load_checkpoint(path)
    del ckpt.tensors["word_head.w"]
    with pytest.raises(CheckpointError):
        restore_model(ckpt)


def test_dump_checkpoint_text(trained):
    result, _ = trained
    text = dump_checkpoint_text(result.checkpoint_path)
    assert "version: 1" in text
    assert "word_head.w" in text
    assert "adam.m.word_head.w" in text
    assert "shape=" in text


# ---------------------------------------------------------------------------
# evaluation and captioning
# ---------------------------------------------------------------------------

def test_evaluate_split_scores_every_scene(trained, dataset_dir):
    result, _ = trained
    bundle = load_dataset(dataset_dir)
    report, pairs = evaluate_split(result.model, result.vocab, bundle, "train")
    assert len(pairs) == len(bundle.splits["train"])
    for value in (report.bleu1, report.rouge_l, report.meteor):
        assert 0.0 <= value <= 1.0
    assert 0.0 <= report.cider <= 10.0
    beam_report, _ = evaluate_split(result.model, result.vocab, bundle, "train", beam=2)
    assert np.isfinite(list(beam_report.as_dict().values())).all()


def test_evaluate_rejects_vocab_mismatch(trained, tmp_path):
    result, _ = trained
    other_dir = tmp_path / "other"
    save_dataset(generate_dataset(9, 6, GenConfig(refs_per_target=1)), other_dir)
    other = load_dataset(other_dir)
    assert other.vocab != result.vocab
    with pytest.raises(EngineError):
        evaluate_split(result.model, result.vocab, other, "train")


def test_caption_deterministic_and_in_vocab(trained, dataset_dir):
    result, _ = trained
    inputs = fixed_inputs(dataset_dir, result.model.config)
    first = caption_sample(result.model, result.vocab, inputs)
    second = caption_sample(result.model, result.vocab, inputs)
    assert first.words == second.words
    assert len(first.logps) == len(first.words) == len(first.token_ids)
    vocabulary = set(result.vocab.words)
    for word in first.words:
        assert word in vocabulary
        assert not word.startswith("<")
    assert all(lp <= 0.0 for lp in first.logps)
    beamed = caption_sample(result.model, result.vocab, inputs, beam=2)
    assert len(beamed.logps) == len(beamed.words)


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------

def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    assert magic == b"P5" and maxval == b"255"
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def test_export_one_heatmap_set_per_word(trained, dataset_dir, tmp_path):
    result, _ = trained
    inputs = fixed_inputs(dataset_dir, result.model.config)
    summary = export_attention(result.model, result.vocab, inputs, tmp_path / "att")
    words = summary["words"]
    assert words  # untrained-ish net still emits something
    views = result.model.config.views
    pgms = [f for f in summary["files"] if f.endswith(".pgm")]
    overlays = [f for f in summary["files"] if f.endswith("_overlay.ppm")]
    assert len(pgms) == len(words) * views
    assert len(overlays) == len(words) * views
    grid = read_pgm(tmp_path / "att" / pgms[0])
    assert grid.shape == (8, 8)
    lines = (tmp_path / "att" / "linguistic_attention.txt").read_text().splitlines()
    assert len(lines) == len(words)
    sentence = (tmp_path / "att" / "sentence.txt").read_text().strip()
    assert sentence == " ".join(words)


def test_zero_attention_exports_mid_gray(trained, dataset_dir, tmp_path):
    result, _ = trained
    ckpt = load_checkpoint(result.checkpoint_path)
    model = restore_model(ckpt)
    for name, p in model.parameters().items():
        if ".att." in name:
            p.data[...] = 0.0
    inputs = fixed_inputs(dataset_dir, model.config)
    summary = export_attention(model, result.vocab, inputs, tmp_path / "att")
    pgms = [f for f in summary["files"] if f.endswith(".pgm")]
    for name in pgms[:3]:
        grid = read_pgm(tmp_path / "att" / name)
        assert np.all(grid == 128)   # sigmoid(0) scaled, rounding half up


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

def test_ablation_harness_table_and_param_audit(dataset_dir, tmp_path):
    table, scores = run_ablation(dataset_dir, str(tmp_path / "abl"), steps=2,
                                 seed=3, batch_size=2, model_overrides=TINY)
    for label in ("Ours (Multi-ABN)", "Ours (VAB only)", "Ours (LAB only)"):
        assert label in table
    for column in ("BLEU-1", "BLEU-4", "ROUGE", "METEOR", "CIDEr"):
        assert column in table
    assert set(scores) == {"full", "visual_only", "linguistic_only"}

    vab = load_checkpoint(tmp_path / "abl" / "visual_only" / "checkpoint.ckpt")
    assert not any(n.startswith("linguistic_branch.") for n in vab.tensors)
    lab = load_checkpoint(tmp_path / "abl" / "linguistic_only" / "checkpoint.ckpt")
    assert not any(n.startswith("visual_branch.") for n in lab.tensors)
    assert any(n.startswith("visual_branch.") for n in vab.tensors)
    assert any(n.startswith("linguistic_branch.") for n in lab.tensors)


# ---------------------------------------------------------------------------
# command line interface
# ---------------------------------------------------------------------------

def override_flags():
    flags = []
    for key, value in TINY.items():
        rendered = json.dumps(list(value)) if isinstance(value, tuple) else str(value)
        flags += ["--model-override", f"{key}={rendered}"]
    return flags


@pytest.fixture(scope="module")
def cli_run(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    code = cli.main(["train", "--dataset", dataset_dir, "--out-dir", str(out),
                     "--batch-size", "2", "--max-steps", "2", "--seed", "4",
                     "--checkpoint-interval", "2"] + override_flags())
    assert code == 0
    return str(out / "checkpoint.ckpt")


def test_cli_generate_dataset_deterministic(tmp_path, capsys):
    for sub in ("one", "two"):
        code = cli.main(["generate-dataset", "--out", str(tmp_path / sub),
                         "--scenes", "4", "--seed", "11", "--refs-per-target", "1"])
        assert code == 0
    lines = capsys.readouterr().out.splitlines()
    digests = [l for l in lines if l.startswith("manifest digest:")]
    assert len(digests) == 2 and digests[0] == digests[1]
    stats = "\n".join(lines)
    assert "mean targets/image" in stats
    assert "mean words/instruction" in stats
    assert "views per scene: 3" in stats


def test_cli_train_config_file_with_flag_override(dataset_dir, tmp_path, capsys):
    config_path = tmp_path / "cfg.json"
    config_path.write_text(json.dumps({
        "dataset": dataset_dir,
        "out_dir": str(tmp_path / "run"),
        "batch_size": 2,
        "max_steps": 3,
        "checkpoint_interval": 5,
        "model_overrides": TINY,
    }, default=list))
    code = cli.main(["train", "--config", str(config_path), "--max-steps", "2"])
    assert code == 0
    capsys.readouterr()
    report = json.loads((tmp_path / "run" / "run_report.json").read_text())
    assert report["completed_steps"] == 2
    assert report["config"]["max_steps"] == 2


def test_cli_evaluate_and_json_out(cli_run, dataset_dir, tmp_path, capsys):
    json_out = tmp_path / "scores.json"
    code = cli.main(["evaluate", "--checkpoint", cli_run, "--dataset", dataset_dir,
                     "--split", "train", "--json-out", str(json_out)])
    assert code == 0
    out = capsys.readouterr().out
    assert "BLEU-1" in out and "CIDEr" in out
    payload = json.loads(json_out.read_text())
    assert payload["split"] == "train"
    assert set(payload["scores"]) == {"BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4",
                                      "ROUGE", "METEOR", "CIDEr"}


def test_cli_caption_idempotent_json(cli_run, dataset_dir, capsys):
    scene_id = load_dataset(dataset_dir).splits["train"][0]
    argv = ["caption", "--checkpoint", cli_run, "--dataset", dataset_dir,
            "--scene-id", str(scene_id), "--json"]
    assert cli.main(argv) == 0
    first = capsys.readouterr().out
    assert cli.main(argv) == 0
    second = capsys.readouterr().out
    assert first == second
    payload = json.loads(first)
    assert payload["sentence"] == " ".join(payload["words"])
    assert len(payload["logps"]) == len(payload["token_ids"])
    assert "<" not in payload["sentence"]


def test_cli_caption_from_image_files(cli_run, dataset_dir, capsys):
    bundle = load_dataset(dataset_dir)
    with open(os.path.join(dataset_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    sample = manifest["samples"][0]
    images = [os.path.join(dataset_dir, rel) for rel in sample["images"]]
    target = sample["objects"][sample["target"]]["boxes"][0]
    source = sample["sources"][sample["source"]]["boxes"][0]
    code = cli.main(["caption", "--checkpoint", cli_run, "--images"] + images + [
        "--target-box", ",".join(str(v) for v in target),
        "--source-box", ",".join(str(v) for v in source)])
    assert code == 0
    sentence = capsys.readouterr().out.strip()
    for word in sentence.split():
        assert word in set(bundle.vocab.words)


def test_cli_export_attention_and_dump(cli_run, dataset_dir, tmp_path, capsys):
    scene_id = load_dataset(dataset_dir).splits["train"][0]
    out = tmp_path / "att"
    code = cli.main(["export-attention", "--checkpoint", cli_run, "--dataset",
                     dataset_dir, "--scene-id", str(scene_id), "--out", str(out)])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "wrote" in stdout
    assert (out / "sentence.txt").exists()

    assert cli.main(["dump-checkpoint", cli_run]) == 0
    dump = capsys.readouterr().out
    assert "version: 1" in dump and "tensors:" in dump


def test_cli_score_matches_fixture(tmp_path, capsys):
    pairs = tmp_path / "pairs.json"
    pairs.write_text(json.dumps([
        {"candidate": "the cat", "references": ["the cat sat"]},
    ]))
    json_out = tmp_path / "scores.json"
    code = cli.main(["score", "--pairs", str(pairs), "--json-out", str(json_out)])
    assert code == 0
    assert "BLEU-1" in capsys.readouterr().out
    scores = json.loads(json_out.read_text())["scores"]
    assert scores["BLEU-1"] == pytest.approx(math.exp(-0.5), abs=1e-9)


def test_cli_error_paths(dataset_dir, tmp_path, capsys):
    assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "no.ckpt"),
                     "--dataset", dataset_dir]) == 1
    assert capsys.readouterr().err.startswith("error:")

    bad_config = tmp_path / "bad.json"
    bad_config.write_text(json.dumps({"dataset": dataset_dir, "bogus": 1}))
    assert cli.main(["train", "--config", str(bad_config)]) == 1
    assert "bogus" in capsys.readouterr().err

    assert cli.main(["train"]) == 1
    assert "dataset" in capsys.readouterr().err

    pairs = tmp_path / "pairs.json"
    pairs.write_text(json.dumps([{"candidate": "x"}]))
    assert cli.main(["score", "--pairs", str(pairs)]) == 1
    assert "references" in capsys.readouterr().err

    blocker = tmp_path / "file.txt"
    blocker.write_text("x")
    assert cli.main(["generate-dataset", "--out", str(blocker / "sub"),
                     "--scenes", "2"]) == 1
    assert capsys.readouterr().err.startswith("error:")
