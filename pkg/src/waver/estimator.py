"""Estimator facade over the full pipeline.

``WaverRetriever().fit(dataset)`` mines the content dictionary, builds the
knowledge corpus and trains both projection heads. Queries are caption
strings; the gallery is a list of videos (anything with ``video_id`` and
``frames``) or a :class:`~waver.ingest.Dataset`.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_choice, check_int, check_real
from .distill import DEFAULT_Z, build_corpus
from .encoders import ToyEncoder
from .evaluation import compute_metrics, multi_caption_eval, rank_targets
from .train import TAU_MAX, TAU_MIN, RetrievalModel, TrainConfig, train_loop
from .vcd import DEFAULT_KAPPA, build_dictionary


def _gallery(videos):
    return list(videos.videos) if hasattr(videos, "videos") else list(videos)


class WaverRetriever(BaseEstimator):
    """Text-to-video retriever with content-dictionary distillation.

    ``backend`` defaults to a :class:`ToyEncoder` of width ``dim`` seeded
    with ``encoder_seed``.
    """

    def __init__(self, dim=32, kappa=DEFAULT_KAPPA, z=DEFAULT_Z, batch_size=126, epochs=5,
                 max_steps=None, learning_rate=1e-4, momentum=0.0, optimizer="sgd",
                 tau_init=0.07, seed=0, d_proj=None, text_pooling="mean",
                 encoder_seed=0, backend=None):
        self.dim = dim
        self.kappa = kappa
        self.z = z
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.optimizer = optimizer
        self.tau_init = tau_init
        self.seed = seed
        self.d_proj = d_proj
        self.text_pooling = text_pooling
        self.encoder_seed = encoder_seed
        self.backend = backend

    def _train_config(self):
        return TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs, max_steps=self.max_steps,
            learning_rate=self.learning_rate, momentum=self.momentum, tau_init=self.tau_init,
            seed=self.seed, d_proj=self.d_proj, text_pooling=self.text_pooling,
            optimizer=self.optimizer,
        ).validate()

    def _validate_params(self):
        check_int(self.dim, "dim", 1)
        check_int(self.kappa, "kappa", 1)
        check_real(self.z, "z", 0.0, low_open=True)
        check_real(self.tau_init, "tau_init", TAU_MIN, TAU_MAX)
        check_choice(self.text_pooling, "text_pooling", {"mean", "last"})
        return self._train_config()

    def fit(self, dataset, y=None, sidecar=None):
        config = self._validate_params()
        backend = self.backend
        if backend is None:
            backend = ToyEncoder(dim=self.dim, seed=self.encoder_seed, pooling=self.text_pooling)
        self.backend_ = backend
        self.dictionary_ = build_dictionary(dataset, backend, self.kappa, sidecar=sidecar)
        self.corpus_ = build_corpus(self.dictionary_, backend, self.z)
        self.result_ = train_loop(dataset, self.corpus_, backend, config)
        self.model_ = RetrievalModel.from_result(self.result_, self.corpus_, backend, self.text_pooling)
        self.tau_ = self.result_.tau
        self.loss_curve_ = [loss for _, loss, _ in self.result_.trace]
        return self

    def decision_function(self, texts, videos):
        """Similarity matrix, one row per text and one column per video."""
        check_is_fitted(self, "model_")
        if isinstance(texts, str):
            texts = [texts]
        return self.model_.similarity(list(texts), _gallery(videos))

    def predict(self, texts, videos):
        """Gallery index of the best video for each text."""
        return np.argmax(self.decision_function(texts, videos), axis=1)

    def rank(self, texts, videos, truth):
        return rank_targets(self.decision_function(texts, videos), truth)

    def evaluate(self, dataset):
        check_is_fitted(self, "model_")
        return multi_caption_eval(self.model_, dataset)

    def score(self, dataset, y=None):
        """Text-to-video R@1 as a fraction, every caption a query."""
        return self.evaluate(dataset).r1 / 100.0

    def score_ranks(self, texts, videos, truth):
        return compute_metrics(self.rank(texts, videos, truth))
