"""Multi-view attention branch network for instruction generation.

The network sees M views of a scene plus target/source crops and a
15-float spatial relation vector. Each view feeds a visual attention
branch; an LSTM stack generates the sentence; its hidden state feeds a
linguistic attention branch whose masked output drives the word head.
Every branch also carries an auxiliary word classifier so attention is
supervised by the same next-token targets as the main head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .vocab import BOS_ID, EOS_ID, PAD_ID, UNK_ID

MODES = ("full", "visual_only", "linguistic_only")
FIFTH_RELATION = ("area", "printed")
BRANCH_REDUCTIONS = ("sum", "mean")

REL_DIM = 15


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """Shape and mode settings. Defaults are the full-size network."""

    views: int = 3
    vocab_size: int = 233
    hidden_dim: int = 1024          # LSTM cell and word embedding width
    lstm_layers: int = 3
    feature_size: int = 14          # spatial side of the extracted map
    feature_channels: int = 512
    image_size: int = 224
    image_channels: int = 3
    max_len: int = 30
    crop_dim: int = 128
    rel_dim: int = REL_DIM
    att_channels: int = 0           # 0 means vocab_size, the table default
    ctx_channels: int = 8           # tiled hidden-state channels for dynamic attention
    mlp_hidden: tuple[int, ...] = (1024, 1024)
    static_attention: bool = False  # drop the per-step conditioning of the conv stack
    fifth_relation: str = "area"
    branch_reduction: str = "sum"
    mode: str = "full"

    def __post_init__(self):
        if self.views < 1:
            raise ValueError("views must be >= 1")
        if self.rel_dim != REL_DIM:
            raise ValueError(f"rel_dim is fixed at {REL_DIM}")
        if self.vocab_size < 5:
            raise ValueError("vocab needs the four reserved tokens plus words")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.fifth_relation not in FIFTH_RELATION:
            raise ValueError(f"fifth_relation must be one of {FIFTH_RELATION}")
        if self.branch_reduction not in BRANCH_REDUCTIONS:
            raise ValueError(f"branch_reduction must be one of {BRANCH_REDUCTIONS}")
        ratio, size = divmod(self.image_size, self.feature_size)
        if size != 0 or ratio < 2 or ratio & (ratio - 1):
            raise ValueError("image_size / feature_size must be a power of two >= 2")
        for v in (self.hidden_dim, self.lstm_layers, self.feature_channels,
                  self.max_len, self.crop_dim, self.ctx_channels):
            if v < 1:
                raise ValueError("all dimensions must be positive")

    @property
    def attention_channels(self) -> int:
        return self.att_channels if self.att_channels else self.vocab_size

    @property
    def extractor_stages(self) -> int:
        return int(math.log2(self.image_size // self.feature_size))

    def extractor_channels(self) -> list[int]:
        n = self.extractor_stages
        return [max(4, self.feature_channels >> (n - 1 - i)) for i in range(n - 1)] + [
            self.feature_channels
        ]

    @property
    def has_visual(self) -> bool:
        return self.mode != "linguistic_only"

    @property
    def has_linguistic(self) -> bool:
        return self.mode != "visual_only"

    @classmethod
    def large(cls, vocab_size: int = 233, **overrides) -> "ModelConfig":
        return cls(vocab_size=vocab_size, **overrides)

    @classmethod
    def toy(cls, vocab_size: int = 120, **overrides) -> "ModelConfig":
        base = dict(
            views=3, vocab_size=vocab_size, hidden_dim=64, lstm_layers=2,
            feature_size=4, feature_channels=32, image_size=32, max_len=16,
            crop_dim=32, att_channels=48, ctx_channels=8, mlp_hidden=(64,),
        )
        base.update(overrides)
        return cls(**base)


PRESETS = {"large": ModelConfig.large, "toy": ModelConfig.toy}


# ---------------------------------------------------------------------------
# inputs and step records
# ---------------------------------------------------------------------------

@dataclass
class SampleInputs:
    """One training/decoding sample. Crops come from view 1 only."""

    views: list
    target_crop: np.ndarray
    source_crop: np.ndarray
    relation: np.ndarray
    reference: Optional[list[int]] = None


@dataclass
class AttentionMap:
    kind: str                      # "visual" | "linguistic"
    values: np.ndarray             # S×S grid or length-d vector, all in (0,1)
    step: int
    view: Optional[int] = None     # 1-based view id, visual only


@dataclass
class StepOutput:
    p_o: np.ndarray
    p_v: list
    p_l: Optional[np.ndarray]
    attention: list
    h: np.ndarray


# ---------------------------------------------------------------------------
# relation features
# ---------------------------------------------------------------------------

def _ratio_block(m_box, n_width, n_height, n_box_height, fifth: str) -> list[float]:
    x, y, w, h = (float(v) for v in m_box)
    if n_width <= 0 or n_height <= 0:
        raise ValueError("reference component has zero area")
    block = [x / n_width, y / n_height, w / n_width, h / n_height]
    if fifth == "area":
        block.append((w * h) / (n_width * n_height))
    else:
        # the printed form w_m*h_n/(W_m*H_n) reduces to a constant once the
        # capitalized symbols are read as the components' own sizes
        block.append((w * n_box_height) / (w * n_box_height))
    return block


def relation_features(target_box, source_box, image_dims, fifth: str = "area") -> np.ndarray:
    """15 floats: target/source, target/frame and source/frame ratio blocks.

    Boxes are (x, y, w, h); image_dims is (W, H). Each block is
    [x/W, y/H, w/W, h/H, area ratio] of the component against its reference.
    """
    if fifth not in FIFTH_RELATION:
        raise ValueError(f"fifth must be one of {FIFTH_RELATION}")
    for box in (target_box, source_box):
        if box[2] <= 0 or box[3] <= 0:
            raise ValueError(f"box {tuple(box)} has non-positive width/height")
    img_w, img_h = (float(v) for v in image_dims)
    if img_w <= 0 or img_h <= 0:
        raise ValueError("image dimensions must be positive")
    parts = (
        _ratio_block(target_box, float(source_box[2]), float(source_box[3]),
                     float(source_box[3]), fifth)
        + _ratio_block(target_box, img_w, img_h, img_h, fifth)
        + _ratio_block(source_box, img_w, img_h, img_h, fifth)
    )
    out = np.asarray(parts, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError("relation features are not finite")
    return out


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class _State:
    """Decoder state: per-layer (h, c) pairs plus the cached visual context."""

    __slots__ = ("layers", "steps", "ctx")

    def __init__(self, layers, steps, ctx=None):
        self.layers = layers
        self.steps = steps
        self.ctx = ctx

    @property
    def h(self) -> Tensor:
        return self.layers[-1][0]


class _HeadOut:
    __slots__ = ("word_logits", "visual", "linguistic", "ctx", "h")

    def __init__(self, word_logits, visual, linguistic, ctx, h):
        self.word_logits = word_logits
        self.visual = visual          # list of (a, v, logits) per view
        self.linguistic = linguistic  # (a_l, l_k, logits) or None
        self.ctx = ctx
        self.h = h


class Model:
    """Parameter container plus forward passes, loss and decoding."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameter construction ------------------------------------------

    def _add(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _uniform(self, rng, shape, fan_in) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def _add_linear(self, rng, name, out_dim, in_dim):
        self._add(f"{name}.w", self._uniform(rng, (out_dim, in_dim), in_dim))
        self._add(f"{name}.b", np.zeros(out_dim))

    def _add_conv2d(self, rng, name, out_ch, in_ch, k):
        self._add(f"{name}.w", self._uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k))
        self._add(f"{name}.b", np.zeros(out_ch))

    def _add_conv1d(self, rng, name, out_ch, in_ch, k):
        self._add(f"{name}.w", self._uniform(rng, (out_ch, in_ch, k), in_ch * k))
        self._add(f"{name}.b", np.zeros(out_ch))

    def _add_extractor(self, rng, prefix):
        cfg = self.config
        in_ch = cfg.image_channels
        for i, out_ch in enumerate(cfg.extractor_channels()):
            self._add_conv2d(rng, f"{prefix}.{i}", out_ch, in_ch, 3)
            in_ch = out_ch

    def _init_params(self, rng):
        cfg = self.config
        d, v = cfg.hidden_dim, cfg.vocab_size
        att = cfg.attention_channels

        self._add_extractor(rng, "view_extractor")
        for prefix in ("crop_target", "crop_source"):
            self._add_extractor(rng, prefix)
            self._add_linear(rng, f"{prefix}.proj", cfg.crop_dim, cfg.feature_channels)

        self._add_linear(rng, "init.rel_proj", cfg.crop_dim, cfg.rel_dim)
        self._add_linear(rng, "init.fuse", d, 3 * cfg.crop_dim)
        self._add("embed.table", self._uniform(rng, (v, d), d))
        self._add_linear(rng, "step.fuse", d, 2 * d)

        for i in range(cfg.lstm_layers):
            in_dim = d
            w = self._uniform(rng, (4 * d, in_dim + d), in_dim + d)
            b = np.zeros(4 * d)
            b[d:2 * d] = 1.0        # open forget gates at the start
            self._add(f"lstm.{i}.w", w)
            self._add(f"lstm.{i}.b", b)

        if cfg.has_visual:
            conv_in = cfg.feature_channels
            if not cfg.static_attention:
                conv_in += cfg.ctx_channels
            for j in range(1, cfg.views + 1):
                p = f"visual_branch.{j}"
                if not cfg.static_attention:
                    self._add_linear(rng, f"{p}.ctx_proj", cfg.ctx_channels, d)
                self._add_conv2d(rng, f"{p}.conv1", att, conv_in, 3)
                for i in (2, 3, 4):
                    self._add_conv2d(rng, f"{p}.conv{i}", att, att, 3)
                self._add_conv2d(rng, f"{p}.att", 1, att, 1)
                mlp_in = att + d
                for i, width in enumerate(cfg.mlp_hidden):
                    self._add_linear(rng, f"{p}.mlp{i}", width, mlp_in)
                    mlp_in = width
                self._add_linear(rng, f"{p}.out", v, mlp_in)
                self._add_linear(rng, f"{p}.context_proj", d, cfg.feature_channels)
        else:
            for j in range(1, cfg.views + 1):
                self._add_linear(rng, f"view_context.{j}", d, cfg.feature_channels)

        if cfg.has_linguistic:
            self._add_conv1d(rng, "linguistic_branch.conv1", att, 1, 3)
            self._add_conv1d(rng, "linguistic_branch.conv2", att, att, 3)
            self._add_conv1d(rng, "linguistic_branch.conv3", att, att, 3)
            self._add_conv1d(rng, "linguistic_branch.att", 1, att, 1)
            self._add_linear(rng, "linguistic_branch.out", v, att)

        self._add_linear(rng, "word_head", v, d)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # -- feature extraction ----------------------------------------------

    def _run_extractor(self, x: Tensor, prefix: str) -> Tensor:
        for i in range(self.config.extractor_stages):
            x = ad.relu(ad.conv2d(x, self._p(f"{prefix}.{i}.w"), self._p(f"{prefix}.{i}.b"),
                                  stride=2, padding=1))
        return x

    def _check_image(self, image, what: str) -> Tensor:
        cfg = self.config
        t = image if isinstance(image, Tensor) else Tensor(image)
        expected = (cfg.image_channels, cfg.image_size, cfg.image_size)
        if t.shape != expected:
            raise ShapeError(f"{what} has shape {t.shape}, expected {expected}")
        return t

    def extract_visual_features(self, image) -> Tensor:
        """One view image to its C_f×S_f×S_f feature map."""
        return self._run_extractor(self._check_image(image, "view image"), "view_extractor")

    def crop_feature(self, crop, prefix: str) -> Tensor:
        f = self._run_extractor(self._check_image(crop, f"{prefix} crop"), prefix)
        pooled = ad.global_avg_pool(f)
        return ad.linear(pooled, self._p(f"{prefix}.proj.w"), self._p(f"{prefix}.proj.b"))

    # -- attention branches ------------------------------------------------

    def visual_attention_branch_forward(self, f: Tensor, h_k: Tensor, view: int):
        """Returns (attention grid, masked features, auxiliary word logits)."""
        cfg = self.config
        p = f"visual_branch.{view}"
        if cfg.static_attention:
            x = f
        else:
            ctx = ad.linear(h_k, self._p(f"{p}.ctx_proj.w"), self._p(f"{p}.ctx_proj.b"))
            tiled = ad.broadcast_spatial(ctx, (cfg.feature_size, cfg.feature_size))
            x = ad.concat([f, tiled], axis=0)
        x = ad.relu(ad.conv2d(x, self._p(f"{p}.conv1.w"), self._p(f"{p}.conv1.b"), padding=1))
        x = ad.relu(ad.conv2d(x, self._p(f"{p}.conv2.w"), self._p(f"{p}.conv2.b"), padding=1))
        x3 = ad.relu(ad.conv2d(x, self._p(f"{p}.conv3.w"), self._p(f"{p}.conv3.b"), padding=1))

        att_logits = ad.conv2d(x3, self._p(f"{p}.att.w"), self._p(f"{p}.att.b"))
        a = ad.sigmoid(ad.reshape(att_logits, (cfg.feature_size, cfg.feature_size)))
        v = ad.hadamard(f, a)

        x4 = ad.conv2d(x3, self._p(f"{p}.conv4.w"), self._p(f"{p}.conv4.b"), padding=1)
        z = ad.concat([ad.global_avg_pool(x4), h_k], axis=0)
        for i in range(len(cfg.mlp_hidden)):
            z = ad.relu(ad.linear(z, self._p(f"{p}.mlp{i}.w"), self._p(f"{p}.mlp{i}.b")))
        logits = ad.linear(z, self._p(f"{p}.out.w"), self._p(f"{p}.out.b"))
        return a, v, logits

    def linguistic_attention_branch_forward(self, h_k: Tensor):
        """Returns (attention vector, masked hidden state, auxiliary word logits)."""
        d = self.config.hidden_dim
        seq = ad.reshape(h_k, (1, d))
        x1 = ad.relu(ad.conv1d(seq, self._p("linguistic_branch.conv1.w"),
                               self._p("linguistic_branch.conv1.b"), padding=1))
        x2 = ad.relu(ad.conv1d(x1, self._p("linguistic_branch.conv2.w"),
                               self._p("linguistic_branch.conv2.b"), padding=1))

        att_logits = ad.conv1d(x2, self._p("linguistic_branch.att.w"),
                               self._p("linguistic_branch.att.b"))
        a = ad.sigmoid(ad.reshape(att_logits, (d,)))
        l_k = ad.hadamard(h_k, a)

        x3 = ad.conv1d(x2, self._p("linguistic_branch.conv3.w"),
                       self._p("linguistic_branch.conv3.b"), padding=1)
        logits = ad.linear(ad.global_avg_pool(x3), self._p("linguistic_branch.out.w"),
                           self._p("linguistic_branch.out.b"))
        return a, l_k, logits

    # -- perception branch -------------------------------------------------

    def _advance(self, layers, x: Tensor):
        new_layers = []
        for i, (h_prev, c_prev) in enumerate(layers):
            h, c = ad.lstm_cell(x, h_prev, c_prev, self._p(f"lstm.{i}.w"), self._p(f"lstm.{i}.b"))
            new_layers.append((h, c))
            x = h
        return new_layers

    def perception_init(self, target_crop, source_crop, relation) -> _State:
        cfg = self.config
        if target_crop is None or source_crop is None:
            raise ValueError("both crops are required to initialize the decoder")
        rel = relation if isinstance(relation, Tensor) else Tensor(np.asarray(relation, dtype=np.float64))
        if rel.shape != (cfg.rel_dim,):
            raise ShapeError(f"relation vector has shape {rel.shape}, expected ({cfg.rel_dim},)")
        if not np.all(np.isfinite(rel.data)):
            raise ValueError("relation vector is not finite")

        t_feat = self.crop_feature(target_crop, "crop_target")
        s_feat = self.crop_feature(source_crop, "crop_source")
        r_feat = ad.linear(rel, self._p("init.rel_proj.w"), self._p("init.rel_proj.b"))
        x_f = ad.linear(ad.concat([t_feat, s_feat, r_feat], axis=0),
                        self._p("init.fuse.w"), self._p("init.fuse.b"))

        zero = Tensor(np.zeros(cfg.hidden_dim))
        layers = [(zero, zero) for _ in range(cfg.lstm_layers)]
        return _State(self._advance(layers, x_f), steps=1)

    def perception_step(self, state: _State, ctx: Tensor, token: int) -> _State:
        if not 0 <= token < self.config.vocab_size:
            raise IndexError(f"token {token} outside vocabulary")
        word = ad.embed_row(self._p("embed.table"), token)
        x = ad.linear(ad.concat([ctx, word], axis=0),
                      self._p("step.fuse.w"), self._p("step.fuse.b"))
        return _State(self._advance(state.layers, x), steps=state.steps + 1)

    # -- heads --------------------------------------------------------------

    def _word_logits(self, feat: Tensor) -> Tensor:
        return ad.linear(feat, self._p("word_head.w"), self._p("word_head.b"))

    def predict_token(self, l_k) -> np.ndarray:
        """Word distribution from a masked hidden state."""
        t = l_k if isinstance(l_k, Tensor) else Tensor(np.asarray(l_k, dtype=np.float64))
        return ad.softmax(self._word_logits(t).data)

    def _context_from(self, pooled: list[Tensor], prefix: str) -> Tensor:
        terms = [
            ad.linear(pooled[j - 1], self._p(f"{prefix}.{j}.w"), self._p(f"{prefix}.{j}.b"))
            for j in range(1, self.config.views + 1)
        ]
        return terms[0] if len(terms) == 1 else ad.add_n(terms)

    def _step_heads(self, f_list: list[Tensor], state: _State) -> _HeadOut:
        cfg = self.config
        h_k = state.h
        visual = []
        linguistic = None

        if cfg.has_visual:
            for j, f in enumerate(f_list, start=1):
                visual.append(self.visual_attention_branch_forward(f, h_k, j))
            pooled = [ad.global_avg_pool(v) for _, v, _ in visual]
            ctx = self._context_from_branches(pooled)
        else:
            pooled = [ad.global_avg_pool(f) for f in f_list]
            ctx = self._context_from(pooled, "view_context")

        if cfg.has_linguistic:
            linguistic = self.linguistic_attention_branch_forward(h_k)
            word_logits = self._word_logits(linguistic[1])
        else:
            word_logits = self._word_logits(h_k)

        return _HeadOut(word_logits, visual, linguistic, ctx, h_k)

    def _context_from_branches(self, pooled: list[Tensor]) -> Tensor:
        terms = [
            ad.linear(pooled[j - 1], self._p(f"visual_branch.{j}.context_proj.w"),
                      self._p(f"visual_branch.{j}.context_proj.b"))
            for j in range(1, self.config.views + 1)
        ]
        return terms[0] if len(terms) == 1 else ad.add_n(terms)

    # -- sample plumbing ------------------------------------------------------

    def _check_sample(self, sample: SampleInputs) -> None:
        if len(sample.views) != self.config.views:
            raise ShapeError(
                f"sample has {len(sample.views)} views, model expects {self.config.views}")

    def _view_features(self, sample: SampleInputs) -> list[Tensor]:
        self._check_sample(sample)
        return [self.extract_visual_features(v) for v in sample.views]

    def _maps_from(self, out: _HeadOut, step: int) -> list[AttentionMap]:
        maps = []
        for j, (a, _, _) in enumerate(out.visual, start=1):
            maps.append(AttentionMap("visual", a.data.copy(), step, view=j))
        if out.linguistic is not None:
            maps.append(AttentionMap("linguistic", out.linguistic[0].data.copy(), step))
        return maps

    def _step_output(self, out: _HeadOut, step: int) -> StepOutput:
        return StepOutput(
            p_o=ad.softmax(out.word_logits.data),
            p_v=[ad.softmax(logits.data) for _, _, logits in out.visual],
            p_l=None if out.linguistic is None else ad.softmax(out.linguistic[2].data),
            attention=self._maps_from(out, step),
            h=out.h.data.copy(),
        )

    # -- loss -----------------------------------------------------------------

    def forward_loss(self, sample: SampleInputs):
        """Teacher-forced (L, L_per, L_att), each averaged over steps."""
        cfg = self.config
        if not sample.reference:
            raise ValueError("forward_loss needs a non-empty reference sequence")
        targets = list(sample.reference) + [EOS_ID]

        f_list = self._view_features(sample)
        state = self.perception_init(sample.target_crop, sample.source_crop, sample.relation)

        per_terms = []
        att_terms = []
        for i, target in enumerate(targets):
            if target == PAD_ID:
                continue
            out = self._step_heads(f_list, state)
            per_terms.append(ad.softmax_cross_entropy(out.word_logits, target))

            step_att = []
            if out.visual:
                branch = [ad.softmax_cross_entropy(logits, target) for _, _, logits in out.visual]
                summed = branch[0] if len(branch) == 1 else ad.add_n(branch)
                if cfg.branch_reduction == "mean":
                    summed = ad.scale(summed, 1.0 / len(branch))
                step_att.append(summed)
            if out.linguistic is not None:
                step_att.append(ad.softmax_cross_entropy(out.linguistic[2], target))
            att_terms.append(step_att[0] if len(step_att) == 1 else ad.add_n(step_att))

            if i < len(targets) - 1:
                state = self.perception_step(state, out.ctx, target)

        if not per_terms:
            raise ValueError("reference contains no supervised positions")
        k = float(len(per_terms))
        loss_per = ad.scale(ad.add_n(per_terms), 1.0 / k)
        loss_att = ad.scale(ad.add_n(att_terms), 1.0 / k)
        return ad.add(loss_att, loss_per), loss_per, loss_att

    def teacher_forced_steps(self, sample: SampleInputs) -> list[StepOutput]:
        """Per-step head outputs under teacher forcing, for inspection."""
        if not sample.reference:
            raise ValueError("teacher_forced_steps needs a reference sequence")
        targets = list(sample.reference) + [EOS_ID]
        f_list = self._view_features(sample)
        state = self.perception_init(sample.target_crop, sample.source_crop, sample.relation)
        outs = []
        for i, target in enumerate(targets):
            out = self._step_heads(f_list, state)
            outs.append(self._step_output(out, state.steps))
            if i < len(targets) - 1:
                state = self.perception_step(state, out.ctx, target)
        return outs

    # -- decoding ---------------------------------------------------------------

    def decode_process(self, sample: SampleInputs) -> "ModelDecodeProcess":
        return ModelDecodeProcess(self, sample)

    def decode_greedy(self, sample: SampleInputs, max_len: Optional[int] = None):
        """Greedy rollout: (word token ids, attention maps per kept word)."""
        limit = max_len if max_len is not None else self.config.max_len
        raw, auxes, _, _ = greedy_rollout(self.decode_process(sample), EOS_ID, limit)
        words = [t for t in raw if t > UNK_ID]
        maps = [aux for t, aux in zip(raw, auxes) if t > UNK_ID]
        return words, maps

    def decode_beam(self, sample: SampleInputs, beam_width: int,
                    max_len: Optional[int] = None) -> list[int]:
        limit = max_len if max_len is not None else self.config.max_len
        raw = beam_rollout(self.decode_process(sample), EOS_ID, limit, beam_width)
        return [t for t in raw if t > UNK_ID]


class ModelDecodeProcess:
    """Stepwise decode interface over a fixed sample.

    predict() caches the visual context on the state so the following
    advance() reuses the branch outputs computed for that state.
    """

    def __init__(self, model: Model, sample: SampleInputs):
        self.model = model
        self.sample = sample
        self._f_list = model._view_features(sample)

    def start(self) -> _State:
        return self.model.perception_init(
            self.sample.target_crop, self.sample.source_crop, self.sample.relation)

    def predict(self, state: _State):
        out = self.model._step_heads(self._f_list, state)
        state.ctx = out.ctx
        probs = ad.softmax(out.word_logits.data)
        return probs, self.model._maps_from(out, state.steps)

    def advance(self, state: _State, token: int) -> _State:
        if token == EOS_ID:
            raise ValueError("cannot advance past the end token")
        if state.ctx is None:
            raise ValueError("advance called before predict on this state")
        return self.model.perception_step(state, state.ctx, token)


# ---------------------------------------------------------------------------
# generic decoding over any process with start/predict/advance
# ---------------------------------------------------------------------------

def _log(p: float) -> float:
    return math.log(max(float(p), 1e-300))


def greedy_rollout(process, eos_id: int, max_len: int):
    """Argmax rollout. Returns (tokens, per-token aux, total logprob, steps)."""
    state = process.start()
    tokens, auxes = [], []
    total = 0.0
    steps = 0
    for _ in range(max_len):
        probs, aux = process.predict(state)
        tok = int(np.argmax(probs))
        total += _log(probs[tok])
        steps += 1
        if tok == eos_id:
            break
        tokens.append(tok)
        auxes.append(aux)
        if steps < max_len:
            state = process.advance(state, tok)
    return tokens, auxes, total, steps


def beam_rollout(process, eos_id: int, max_len: int, width: int) -> list[int]:
    """Length-normalized beam search; the greedy rollout seeds the pool."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    g_tokens, _, g_total, g_steps = greedy_rollout(process, eos_id, max_len)
    pool = [(g_total / max(g_steps, 1), g_tokens)]

    live = [(0.0, [], process.start())]
    for _ in range(max_len):
        candidates = []
        for total, tokens, state in live:
            probs, _ = process.predict(state)
            top = np.argsort(-probs, kind="stable")[:width]
            for tok in top:
                candidates.append((total + _log(probs[tok]), tokens, int(tok), state))
        candidates.sort(key=lambda c: -c[0])

        live = []
        for total, tokens, tok, state in candidates:
            if tok == eos_id:
                pool.append((total / (len(tokens) + 1), tokens))
            elif len(live) < width:
                grown = tokens + [tok]
                if len(grown) < max_len:
                    live.append((total, grown, process.advance(state, tok)))
                else:
                    pool.append((total / len(grown), grown))
        if not live:
            break

    best_score, best_tokens = pool[0]
    for score, tokens in pool[1:]:
        if score > best_score:
            best_score, best_tokens = score, tokens
    return best_tokens
