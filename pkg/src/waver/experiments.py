"""Seeded desk-scale experiment: synthetic data, train, evaluate."""

import time
from dataclasses import dataclass

from .distill import build_corpus
from .encoders import ToyEncoder
from .evaluation import multi_caption_eval
from .ingest import generate_synthetic, split_holdout
from .train import RetrievalModel, TrainConfig, train_loop
from .vcd import build_dictionary

SMOKE_DATA = dict(n_videos=80, captions_per_video=5, style_variants=4, strength=0.1)
SMOKE_HOLDOUT = 16
SMOKE_DIM, SMOKE_KAPPA, SMOKE_Z = 32, 5, 64.0


def smoke_config(seed=16):
    return TrainConfig(batch_size=16, max_steps=200, learning_rate=0.01, optimizer="adam", seed=seed)


@dataclass
class SmokeRun:
    train: object
    test: object
    backend: object
    dictionary: object
    corpus: object
    result: object
    model: object
    train_report: object
    test_report: object
    seconds: float


def run_smoke(seed=16, config=None):
    """64 training and 16 held-out synthetic videos, 200 steps at batch 16."""
    start = time.perf_counter()
    data = generate_synthetic(seed, **SMOKE_DATA)
    train, test = split_holdout(data, SMOKE_HOLDOUT)
    backend = ToyEncoder(dim=SMOKE_DIM)
    dictionary = build_dictionary(train, backend, SMOKE_KAPPA)
    corpus = build_corpus(dictionary, backend, SMOKE_Z)
    config = config if config is not None else smoke_config(seed)
    result = train_loop(train, corpus, backend, config)
    model = RetrievalModel.from_result(result, corpus, backend, config.text_pooling)
    return SmokeRun(
        train, test, backend, dictionary, corpus, result, model,
        multi_caption_eval(model, train), multi_caption_eval(model, test),
        time.perf_counter() - start,
    )
