"""Text-video retrieval with video content dictionaries and cross-attention
distillation over a frozen knowledge corpus."""

from .distill import KnowledgeCorpus, KnowledgeDistiller, build_corpus, cross_attend
from .encoders import PrecomputedEncoder, ToyEncoder
from .estimator import WaverRetriever
from .evaluation import (
    RetrievalReport,
    StyleRobustnessReport,
    annotator_split_eval,
    compute_metrics,
    kappa_sweep,
    multi_caption_eval,
    rank_targets,
    style_eval,
)
from .exceptions import DataError, NumericError, ValidationError, WaverError
from .ingest import Dataset, generate_synthetic, load_dataset, save_dataset, split_holdout
from .train import RetrievalModel, TrainConfig, infonce_t2v, infonce_total, infonce_v2t, train_loop
from .vcd import ContentDictionary, ContentDictionaryBuilder, build_dictionary

__version__ = "0.1.0"
