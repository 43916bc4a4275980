"""Knowledge corpus and cross-attention distillation.

The corpus holds one frozen prompt embedding per training video. A video's
frame embeddings query it and come back as attention-weighted mixtures of
corpus rows::

    distilled = softmax_rows(frames @ corpus.T / sqrt(z)) @ corpus
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DimensionMismatch, EmptyInput, InvalidConfig, ParseError
from .ingest import parse_header, read_headed_tensors, write_headed_tensors
from .numerics import Tensor, matmul, softmax_rows

DEFAULT_Z = 64.0


@dataclass
class KnowledgeCorpus:
    vectors: np.ndarray  # L x D
    video_ids: list
    z: float = DEFAULT_Z

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.video_ids = list(self.video_ids)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise EmptyInput(f"corpus needs at least one row, got shape {self.vectors.shape}")
        if len(self.video_ids) != self.vectors.shape[0]:
            raise DimensionMismatch("corpus rows and video ids differ in length")
        if not np.isfinite(self.vectors).all():
            raise InvalidConfig("corpus contains non-finite values")
        if not self.z > 0:
            raise InvalidConfig("z must be positive")
        self.z = float(self.z)

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def save(self, path):
        header = f"#corpus v1 L={self.size} dim={self.dim} z={self.z!r}"
        for vid in self.video_ids:
            if "\t" in vid or "\n" in vid:
                raise InvalidConfig(f"video id {vid!r} contains a tab or newline")
        ids_line = "#ids\t" + "\t".join(self.video_ids)
        write_headed_tensors(path, header, {"corpus": self.vectors}, [ids_line])

    @classmethod
    def load(cls, path):
        (header, ids_line), blobs = read_headed_tensors(path, n_lines=2)
        meta = parse_header(header, "corpus", path=path)
        if not ids_line.startswith("#ids\t"):
            raise ParseError("missing #ids line", line=2, path=path)
        ids = ids_line.split("\t")[1:]
        if "corpus" not in blobs:
            raise ParseError("missing 'corpus' tensor", path=path)
        vectors = blobs["corpus"].astype(np.float64)
        try:
            size, dim, z = int(meta["L"]), int(meta["dim"]), float(meta["z"])
        except (KeyError, ValueError):
            raise ParseError("header needs L=, dim=, z=", line=1, path=path) from None
        if vectors.shape != (size, dim):
            raise ParseError(f"header says {size}x{dim}, tensor is {vectors.shape}", path=path)
        return cls(vectors, ids, z)


def build_corpus(dictionary, backend, z=DEFAULT_Z):
    """Embed one prompt per dictionary entry with the frozen text encoder.

    Vectors pass through float32, the precision of the corpus cache, so a
    corpus rebuilt here equals one read back from disk.
    """
    if len(dictionary) == 0:
        raise EmptyInput("dictionary has no entries")
    vectors = backend.encode_prompts(dictionary.prompts())
    vectors = vectors.astype(np.float32).astype(np.float64)
    return KnowledgeCorpus(vectors, dictionary.video_ids, z)


def cross_attend(frames, corpus, return_weights=False):
    """Distil frame embeddings through the corpus.

    ``frames`` may be an array or a :class:`~waver.numerics.Tensor`; with a
    Tensor the result is differentiable with respect to the frames only.
    Corpus rows enter as constants.
    """
    data = frames.data if isinstance(frames, Tensor) else np.asarray(frames, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != corpus.dim:
        raise DimensionMismatch(f"frames {data.shape} do not match corpus dim {corpus.dim}")
    scale = 1.0 / math.sqrt(corpus.z)
    if isinstance(frames, Tensor):
        keys = Tensor(corpus.vectors.T)
        weights = softmax_rows(matmul(frames, keys) * scale)
        out = matmul(weights, Tensor(corpus.vectors))
    else:
        weights = softmax_rows(data @ corpus.vectors.T * scale)
        out = weights @ corpus.vectors
    return (out, weights) if return_weights else out


@dataclass
class DistilledVideo:
    video_id: str
    embedding: np.ndarray


class KnowledgeDistiller(BaseEstimator, TransformerMixin):
    """Fits a corpus from a content dictionary; transforms frame matrices."""

    def __init__(self, backend=None, z=DEFAULT_Z):
        self.backend = backend
        self.z = z

    def fit(self, dictionary, y=None):
        from .encoders import ToyEncoder

        backend = self.backend if self.backend is not None else ToyEncoder(dim=dictionary.dim)
        self.corpus_ = build_corpus(dictionary, backend, self.z)
        return self

    def transform(self, frames_list):
        check_is_fitted(self, "corpus_")
        return [cross_attend(f, self.corpus_) for f in frames_list]
