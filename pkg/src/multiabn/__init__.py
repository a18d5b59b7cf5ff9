"""Multi-view attention branch captioner for object-fetching instructions.

A dependency-light stack: a tape-based autodiff core (`autodiff`, `optim`),
the multi-branch captioning network (`model`), a procedural multi-view scene
generator (`dataset`), corpus caption metrics (`metrics`) and the training/
inference engine with its CLI (`engine`, `cli`).
"""

from .autodiff import (
    NumericsError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    set_finite_checks,
)
from .dataset import (
    AnnotationError,
    BoundingBox,
    DatasetBundle,
    GenConfig,
    GenerationError,
    Scene,
    check_unique,
    generate_dataset,
    generate_instruction,
    generate_scene,
    load_dataset,
    save_dataset,
    tokenize,
)
from .engine import (
    CheckpointError,
    EngineError,
    TrainConfig,
    TrainingAborted,
    caption_sample,
    evaluate_split,
    export_attention,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    run_ablation,
    save_checkpoint,
    train,
)
from .metrics import (
    EvalPair,
    ScoreReport,
    bleu,
    cider,
    evaluate_corpus,
    meteor_lite,
    render_table,
    rouge_l,
)
from .model import (
    AttentionMap,
    Model,
    ModelConfig,
    SampleInputs,
    relation_features,
)
from .optim import Adam, OptimizerError
from .vocab import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Vocabulary

__version__ = "0.1.0"
