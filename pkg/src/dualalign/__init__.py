"""Dual-encoder contrastive alignment at desk scale: paired feature/caption
ingestion, symmetric contrastive training, zero-shot classification and
cosine retrieval."""

from .alignment import (
    AlignmentModel,
    TrainConfig,
    TrainHistory,
    fit,
    init_model,
    joint_embed,
    load_checkpoint,
    save_checkpoint,
    similarity_logits,
    symmetric_loss,
    train_step,
)
from .dataset import (
    Batch,
    FeatureStore,
    PairRecord,
    Vocab,
    attach_captions,
    batches,
    by_split,
    build_vocab,
    encode_pairs,
    load_manifest,
    split_records,
    tokenize,
    write_manifest,
)
from .encoders import encode_image, encode_text
from .fvecs import read_fvecs, write_fvecs
from .inference import (
    EvalReport,
    PromptSet,
    RetrievalIndex,
    aggregate_report,
    avg_topk_cosine,
    build_index,
    export_embeddings,
    retrieve,
    top1_accuracy,
    zero_shot_predict,
)

__version__ = "0.1.0"
