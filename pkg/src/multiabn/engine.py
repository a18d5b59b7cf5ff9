"""Training, evaluation, captioning, attention export and checkpointing.

The training loop runs each sample of a batch on its own tape (gradients
accumulate across tapes) and applies one Adam step scaled by 1/batch. All
randomness is derived from the run seed, so a (seed, config, dataset)
triple reproduces its loss series bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Tape
from .dataset import (
    BoundingBox,
    DatasetBundle,
    load_dataset,
    resize_nearest,
    tokenize,
    write_ppm,
)
from .metrics import EvalPair, ScoreReport, evaluate_corpus, render_table
from .model import PRESETS, Model, ModelConfig, SampleInputs, relation_features
from .optim import Adam, OptimizerError
from .vocab import EOS_ID, SPECIAL_TOKENS, UNK_ID, Vocabulary


class EngineError(RuntimeError):
    """Orchestration failure with a user-facing message."""


class CheckpointError(EngineError):
    """Unreadable, truncated or incompatible checkpoint file."""


class TrainingAborted(EngineError):
    """Training stopped on a non-finite loss; the last checkpoint is kept."""

    def __init__(self, step: int, checkpoint_path: str):
        super().__init__(
            f"non-finite loss at step {step}; "
            f"last good checkpoint retained at {checkpoint_path}")
        self.step = step
        self.checkpoint_path = checkpoint_path


TRAIN_MODES = ("full", "visual_only", "linguistic_only")
ABLATION_LABELS = {
    "full": "Ours (Multi-ABN)",
    "visual_only": "Ours (VAB only)",
    "linguistic_only": "Ours (LAB only)",
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    dataset: str
    out_dir: str = "run"
    preset: str = "toy"
    mode: str = "full"
    batch_size: int = 32
    lr: float = 5e-4
    lr_decay: float = 1.0
    beta1: float = 0.99
    beta2: float = 0.9
    max_steps: int = 1000
    seed: int = 0
    checkpoint_interval: int = 200
    log_interval: int = 10
    stop_loss: float = 0.0
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {sorted(PRESETS)}")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ValueError("intervals must be >= 1")
        if self.stop_loss < 0:
            raise ValueError("stop_loss must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**data)


def build_model_config(config: TrainConfig, vocab_size: int) -> ModelConfig:
    overrides = dict(config.model_overrides)
    if "mlp_hidden" in overrides:
        overrides["mlp_hidden"] = tuple(overrides["mlp_hidden"])
    overrides["mode"] = config.mode
    return PRESETS[config.preset](vocab_size=vocab_size, **overrides)


# ---------------------------------------------------------------------------
# sample preparation
# ---------------------------------------------------------------------------

def image_to_input(image: np.ndarray, size: int) -> np.ndarray:
    """H×W×3 uint8 to a [0,1] float (3, size, size) tensor input."""
    resized = resize_nearest(image, size, size)
    return resized.astype(np.float64).transpose(2, 0, 1) / 255.0


def crop_to_input(image: np.ndarray, box: BoundingBox, size: int) -> np.ndarray:
    patch = image[box.y:box.y + box.h, box.x:box.x + box.w]
    return image_to_input(patch, size)


@dataclass
class PreparedScene:
    scene_id: int
    inputs: SampleInputs
    references: List[List[str]]
    token_refs: List[List[int]]


def prepare_scene(scene, annotation, model_config: ModelConfig,
                  image_size_px: int) -> PreparedScene:
    target = scene.objects[scene.target_id]
    source = scene.sources[scene.source_id]
    tbox, sbox = target.box(1), source.boxes[0]
    views = [image_to_input(img, model_config.image_size) for img in scene.images]
    inputs = SampleInputs(
        views=views,
        target_crop=crop_to_input(scene.images[0], tbox, model_config.image_size),
        source_crop=crop_to_input(scene.images[0], sbox, model_config.image_size),
        relation=relation_features(
            (tbox.x, tbox.y, tbox.w, tbox.h), (sbox.x, sbox.y, sbox.w, sbox.h),
            (image_size_px, image_size_px), fifth=model_config.fifth_relation),
    )
    references = [tokenize(s) for s in annotation.sentences]
    limit = model_config.max_len - 1  # leave room for the end token
    token_refs = [ids[:limit] for ids in annotation.token_ids]
    return PreparedScene(scene.scene_id, inputs, references, token_refs)


def prepare_split(bundle: DatasetBundle, split: str,
                  model_config: ModelConfig) -> List[PreparedScene]:
    if split not in bundle.splits:
        raise EngineError(f"unknown split {split!r}")
    ids = bundle.splits[split]
    if not ids:
        raise EngineError(f"split {split!r} is empty")
    by_id = {scene.scene_id: scene for scene in bundle.scenes}
    ann_by_id = {ann.scene_id: ann for ann in bundle.annotations}
    return [
        prepare_scene(by_id[i], ann_by_id[i], model_config, bundle.config.image_size)
        for i in ids
    ]


def training_samples(prepared: List[PreparedScene]) -> List[SampleInputs]:
    samples = []
    for scene in prepared:
        for ids in scene.token_refs:
            if not ids:
                continue
            samples.append(dataclasses.replace(scene.inputs, reference=list(ids)))
    if not samples:
        raise EngineError("no non-empty references to train on")
    return samples


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MABN"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    model_config: ModelConfig
    vocab: Vocabulary
    step: int
    tensors: Dict[str, np.ndarray]
    adam: Optional[dict]
    rng_state: Optional[dict]


def _config_to_json(config: ModelConfig) -> dict:
    data = dataclasses.asdict(config)
    data["mlp_hidden"] = list(data["mlp_hidden"])
    return data


def _config_from_json(data: dict) -> ModelConfig:
    data = dict(data)
    data["mlp_hidden"] = tuple(data["mlp_hidden"])
    return ModelConfig(**data)


def save_checkpoint(path, model: Model, vocab: Vocabulary, step: int = 0,
                    optimizer: Optional[Adam] = None,
                    rng_state: Optional[dict] = None) -> None:
    """Self-contained little-endian binary snapshot; written atomically."""
    records: List[Tuple[str, np.ndarray]] = [
        (name, p.data) for name, p in sorted(model.parameters().items())
    ]
    adam_meta = None
    if optimizer is not None:
        adam_meta = {
            "t": optimizer.state.t,
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
        }
        for name in sorted(model.parameters()):
            records.append((f"adam.m.{name}", optimizer.state.m[name]))
            records.append((f"adam.v.{name}", optimizer.state.v[name]))
    meta = {
        "model_config": _config_to_json(model.config),
        "step": int(step),
        "vocab": vocab.words,
        "adam": adam_meta,
        "rng_state": rng_state,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(records))
    for name, array in records:
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", array.ndim)
        blob += struct.pack(f"<{array.ndim}I", *array.shape)
        blob += np.ascontiguousarray(array, dtype="<f8").tobytes()

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint file {self.path}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint file not found: {path}")
    r = _Reader(raw, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    version = r.unpack("<I")[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    meta_len = r.unpack("<Q")[0]
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint metadata in {path}: {err}")
    for key in ("model_config", "step", "vocab"):
        if key not in meta:
            raise CheckpointError(f"checkpoint metadata missing {key!r}")

    count = r.unpack("<I")[0]
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.unpack("<H")[0]
        name = r.take(name_len).decode("utf-8")
        rank = r.unpack("<B")[0]
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64)
    if r.pos != len(raw):
        raise CheckpointError(f"{path} has {len(raw) - r.pos} trailing bytes")

    words = meta["vocab"]
    if tuple(words[:4]) != SPECIAL_TOKENS:
        raise CheckpointError("checkpoint vocabulary does not start with the reserved tokens")
    vocab = Vocabulary()
    for w in words[4:]:
        vocab.add(w)

    try:
        model_config = _config_from_json(meta["model_config"])
    except (TypeError, ValueError) as err:
        raise CheckpointError(f"invalid model config in checkpoint: {err}")
    return Checkpoint(version, model_config, vocab, int(meta["step"]), tensors,
                      meta.get("adam"), meta.get("rng_state"))


def restore_model(ckpt: Checkpoint) -> Model:
    model = Model(ckpt.model_config, seed=0)
    params = model.parameters()
    stored = {n for n in ckpt.tensors if not n.startswith("adam.")}
    if stored != set(params):
        missing = sorted(set(params) - stored)[:3]
        extra = sorted(stored - set(params))[:3]
        raise CheckpointError(
            f"parameter names do not match the config (missing {missing}, extra {extra})")
    for name, p in params.items():
        value = ckpt.tensors[name]
        if value.shape != p.data.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {value.shape}, expected {p.data.shape}")
        p.data[...] = value
    return model


def restore_optimizer(ckpt: Checkpoint, model: Model) -> Optional[Adam]:
    if ckpt.adam is None:
        return None
    meta = ckpt.adam
    opt = Adam(model.parameters(), lr=meta["lr"], beta1=meta["beta1"],
               beta2=meta["beta2"], eps=meta["eps"])
    opt.state.t = int(meta["t"])
    for name in model.parameters():
        for prefix, table in (("adam.m.", opt.state.m), ("adam.v.", opt.state.v)):
            key = prefix + name
            if key not in ckpt.tensors:
                raise CheckpointError(f"checkpoint is missing optimizer tensor {key!r}")
            table[name][...] = ckpt.tensors[key]
    return opt


def dump_checkpoint_text(path) -> str:
    """Stable text rendering of a checkpoint, for inspection and diffing."""
    ckpt = load_checkpoint(path)
    lines = [
        f"version: {ckpt.version}",
        f"step: {ckpt.step}",
        f"vocab: {len(ckpt.vocab)} words",
        f"model_config: {json.dumps(_config_to_json(ckpt.model_config), sort_keys=True)}",
        f"adam: {json.dumps(ckpt.adam, sort_keys=True)}",
        f"tensors: {len(ckpt.tensors)}",
    ]
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name]
        lines.append(f"  {name} shape={list(t.shape)} "
                     f"mean={t.mean():.6g} rms={np.sqrt(np.mean(t * t)):.6g}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    losses: List[Tuple[float, float, float]]   # (L, L_per, L_att) per step
    scores: Dict[str, Dict[str, float]]
    wall_clock: float
    config: dict
    completed_steps: int
    note: str = "fixed step budget; evaluation uses greedy decoding"

    def to_json(self) -> str:
        if len(self.losses) != self.completed_steps:
            raise ValueError("loss series length must equal completed steps")
        payload = {
            "config": self.config,
            "completed_steps": self.completed_steps,
            "wall_clock_sec": self.wall_clock,
            "losses": [list(row) for row in self.losses],
            "scores": self.scores,
            "note": self.note,
        }
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"


@dataclass
class TrainResult:
    model: Model
    vocab: Vocabulary
    report: RunReport
    checkpoint_path: str


def train(config: TrainConfig, log: Optional[Callable[[str], None]] = None) -> TrainResult:
    emit = log if log is not None else (lambda line: None)
    started = time.perf_counter()

    bundle = load_dataset(config.dataset)
    model_config = build_model_config(config, len(bundle.vocab))
    model = Model(model_config, seed=config.seed)
    opt = Adam(model.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    prepared = prepare_split(bundle, "train", model_config)
    samples = training_samples(prepared)
    rng = np.random.default_rng((config.seed, 1))

    os.makedirs(config.out_dir, exist_ok=True)
    ckpt_path = os.path.join(config.out_dir, "checkpoint.ckpt")

    def snapshot(step):
        save_checkpoint(ckpt_path, model, bundle.vocab, step=step, optimizer=opt,
                        rng_state=rng.bit_generator.state)

    snapshot(0)
    emit(f"training on {len(samples)} samples "
         f"({len(prepared)} scenes), mode={config.mode}, preset={config.preset}")

    losses: List[Tuple[float, float, float]] = []
    for step in range(1, config.max_steps + 1):
        opt.lr = config.lr * config.lr_decay ** (step - 1)
        # distinct samples per step; batch_size >= dataset size means full batch
        picks = rng.permutation(len(samples))[:config.batch_size]
        sums = np.zeros(3)
        for i in picks:
            with Tape() as tape:
                loss, loss_per, loss_att = model.forward_loss(samples[int(i)])
                tape.backward(loss)
            sums += (float(loss.data), float(loss_per.data), float(loss_att.data))
        mean_l, mean_per, mean_att = sums / len(picks)
        if not np.all(np.isfinite(sums)):
            raise TrainingAborted(step, ckpt_path)
        try:
            opt.step(grad_scale=1.0 / len(picks))
        except OptimizerError:
            raise TrainingAborted(step, ckpt_path)
        opt.zero_grad()
        losses.append((mean_l, mean_per, mean_att))

        if step % config.log_interval == 0 or step == config.max_steps:
            emit(f"step {step:>6}  L={mean_l:.4f}  L_per={mean_per:.4f}  L_att={mean_att:.4f}")
        if step % config.checkpoint_interval == 0:
            snapshot(step)
        if config.stop_loss and mean_per < config.stop_loss:
            emit(f"stopping early at step {step}: L_per {mean_per:.4f} < {config.stop_loss}")
            break

    completed = len(losses)
    snapshot(completed)

    scores: Dict[str, Dict[str, float]] = {}
    if bundle.splits.get("val"):
        report, _ = evaluate_split(model, bundle.vocab, bundle, "val")
        scores["val"] = report.as_dict()
        emit(render_table([(f"{config.mode} (val)", report)]))

    report = RunReport(
        losses=losses,
        scores=scores,
        wall_clock=time.perf_counter() - started,
        config=config.to_dict(),
        completed_steps=completed,
    )
    with open(os.path.join(config.out_dir, "run_report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    return TrainResult(model, bundle.vocab, report, ckpt_path)


# ---------------------------------------------------------------------------
# evaluation and captioning
# ---------------------------------------------------------------------------

def evaluate_split(model: Model, vocab: Vocabulary, bundle: DatasetBundle,
                   split: str, beam: int = 0) -> Tuple[ScoreReport, List[EvalPair]]:
    """Decode every scene in the split and score against its references."""
    if vocab != bundle.vocab:
        raise EngineError("checkpoint vocabulary differs from the dataset vocabulary")
    prepared = prepare_split(bundle, split, model.config)
    pairs = []
    for scene in prepared:
        if beam:
            tokens = model.decode_beam(scene.inputs, beam)
        else:
            tokens, _ = model.decode_greedy(scene.inputs)
        pairs.append(EvalPair(tuple(vocab.decode(tokens)),
                              tuple(tuple(r) for r in scene.references)))
    return evaluate_corpus(pairs), pairs


@dataclass
class CaptionResult:
    words: List[str]
    token_ids: List[int]
    logps: List[float]


def caption_sample(model: Model, vocab: Vocabulary, inputs: SampleInputs,
                   beam: int = 0) -> CaptionResult:
    """Decode one sample; per-token log-probs cover the emitted words."""
    if beam:
        tokens = model.decode_beam(inputs, beam)
        logps = _score_tokens(model, inputs, tokens)
    else:
        process = model.decode_process(inputs)
        state = process.start()
        tokens, logps = [], []
        for step in range(model.config.max_len):
            probs, _ = process.predict(state)
            tok = int(np.argmax(probs))
            if tok == EOS_ID:
                break
            if tok > UNK_ID:
                tokens.append(tok)
                logps.append(math.log(max(float(probs[tok]), 1e-300)))
            if step + 1 < model.config.max_len:
                state = process.advance(state, tok)
    return CaptionResult(vocab.decode(tokens), tokens, logps)


def _score_tokens(model: Model, inputs: SampleInputs, tokens: List[int]) -> List[float]:
    process = model.decode_process(inputs)
    state = process.start()
    logps = []
    for i, tok in enumerate(tokens):
        probs, _ = process.predict(state)
        logps.append(math.log(max(float(probs[tok]), 1e-300)))
        if i + 1 < len(tokens):
            state = process.advance(state, tok)
    return logps


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------

def write_pgm(path, gray: np.ndarray) -> None:
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def attention_to_gray(values: np.ndarray, size: int) -> np.ndarray:
    """(0,1) attention map to a size×size uint8 image, rounding half up."""
    up = resize_nearest(values, size, size)
    return np.clip(np.floor(up * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _overlay(image: np.ndarray, attention: np.ndarray) -> np.ndarray:
    """Blend attention into the red channel of an H×W×3 uint8 image."""
    out = image.astype(np.float64)
    out[:, :, 0] = out[:, :, 0] + attention * (255.0 - out[:, :, 0])
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def export_attention(model: Model, vocab: Vocabulary, inputs: SampleInputs,
                     out_dir) -> dict:
    """Greedy-decode and write one heatmap set per generated word.

    Per word and view: a raw grayscale PGM of the attention map upsampled to
    the input size, plus a PPM overlay on the view image. The linguistic
    attention vectors go to one text file, a row per word.
    """
    os.makedirs(out_dir, exist_ok=True)
    tokens, maps = model.decode_greedy(inputs)
    words = vocab.decode(tokens)
    size = model.config.image_size
    view_images = [
        np.clip(np.floor(np.asarray(v).transpose(1, 2, 0) * 255.0 + 0.5), 0, 255).astype(np.uint8)
        for v in inputs.views
    ]

    files = []
    linguistic_rows = []
    for k, (word, word_maps) in enumerate(zip(words, maps), start=1):
        for m in word_maps:
            if m.kind == "visual":
                gray = attention_to_gray(m.values, size)
                name = f"word{k:02d}_view{m.view}.pgm"
                write_pgm(os.path.join(out_dir, name), gray)
                files.append(name)
                overlay_name = f"word{k:02d}_view{m.view}_overlay.ppm"
                up = resize_nearest(m.values, size, size)
                write_ppm(os.path.join(out_dir, overlay_name),
                          _overlay(view_images[m.view - 1], up))
                files.append(overlay_name)
            else:
                row = " ".join(format(v, ".6f") for v in m.values.reshape(-1))
                linguistic_rows.append(f"{k} {word} {row}")
    if linguistic_rows:
        with open(os.path.join(out_dir, "linguistic_attention.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write("\n".join(linguistic_rows) + "\n")
        files.append("linguistic_attention.txt")
    with open(os.path.join(out_dir, "sentence.txt"), "w", encoding="utf-8") as fh:
        fh.write(" ".join(words) + "\n")
    files.append("sentence.txt")
    return {"words": words, "files": files}


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

def run_ablation(dataset_path: str, out_dir: str, steps: int, seed: int,
                 preset: str = "toy", batch_size: int = 4,
                 model_overrides: Optional[dict] = None,
                 log: Optional[Callable[[str], None]] = None) -> Tuple[str, dict]:
    """Train and score all three branch configurations on one dataset."""
    rows = []
    scores = {}
    for mode in TRAIN_MODES:
        config = TrainConfig(
            dataset=dataset_path,
            out_dir=os.path.join(out_dir, mode),
            preset=preset,
            mode=mode,
            batch_size=batch_size,
            max_steps=steps,
            seed=seed,
            checkpoint_interval=max(steps, 1),
            model_overrides=dict(model_overrides or {}),
        )
        result = train(config, log=log)
        bundle = load_dataset(dataset_path)
        split = "val" if bundle.splits.get("val") else "train"
        report, _ = evaluate_split(result.model, result.vocab, bundle, split)
        rows.append((ABLATION_LABELS[mode], report))
        scores[mode] = report.as_dict()
    table = render_table(rows)
    with open(os.path.join(out_dir, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    return table, scores
