"""factstack: two-stage claim classification with a from-scratch encoder.

A small transformer encoder (with exact hand-written gradients) is pretrained
with masked language modeling, a cloze-prompt filter peels off refute claims,
the remaining classes are learned under stratified k-fold finetuning, and
predictions are combined by snapshot ensembling, mean ensembling, and
out-of-fold stacking.
"""

__version__ = "0.1.0"

from .corpus import (
    ALL_LABELS, Dataset, DatasetError, FoldAssignment, Instance, Label,
    NON_REFUTE_LABELS, generate_synthetic, load_dataset, preprocess_instance,
    save_dataset, stratified_kfold,
)
from .encoder import (
    EncoderConfig, EncoderParams, ForwardGraph, backward, class_logits,
    forward, init_params, load_checkpoint, mlm_logits, save_checkpoint,
)
from .ensemble import (
    SnapshotSet, StackerParams, mean_ensemble, snapshot_predict,
    snapshot_train, stacker_predict, train_stacker,
)
from .metrics import ConfusionMatrix, confusion, per_class_f1, weighted_f1
from .mlm import MaskedBatch, MaskingConfig, apply_masking, mlm_loss, pretrain
from .optim import (
    AdamWHyper, AdamWState, ScheduleConfig, TrainConfig, adamw_step,
    lr_cyclic, lr_warmup_cosine, lr_warmup_linear,
)
from .pipeline import (
    ClassifierModel, ModelSpec, OofMatrix, PredictionVector, crossval_train,
    finetune, predict, two_stage_predict,
)
from .prompt import (
    BinaryPrediction, FilterModel, PromptTemplate, Verbalizer, answer_map,
    apply_template, refute_filter_predict, refute_filter_train,
)
from .tokenizer import TokenSequence, Vocabulary, build_vocab, decode, encode
