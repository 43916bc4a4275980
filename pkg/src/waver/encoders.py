"""Frozen feature encoders for videos, captions and prompts.

Two interchangeable backends share one interface:

* :class:`ToyEncoder` hashes tokens to pseudo-random unit vectors. A video is
  a list of short textual frame descriptors, each embedded like a caption.
* :class:`PrecomputedEncoder` serves frame matrices exported by an external
  model from a feature store; text goes through a companion text encoder.
"""

import hashlib
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .exceptions import DimensionMismatch, EmptyCaption, InvalidConfig, UnknownId

MAX_FRAMES = 12
MAX_TOKENS = 32

_TOKEN_RE = re.compile(r"[0-9a-z]+(?:'[a-z]+)?")
_MASK64 = (1 << 64) - 1


def tokenize(text):
    """Lowercase word tokens; whitespace and punctuation separate them."""
    return _TOKEN_RE.findall(text.lower())


def splitmix64(state):
    """One splitmix64 step. Returns ``(next_state, output)`` as Python ints."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


@lru_cache(maxsize=65536)
def _token_vector(token, dim, seed):
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    state = (int.from_bytes(digest, "little") ^ (seed * 0xD1B54A32D192ED03)) & _MASK64
    out = np.empty(dim)
    for j in range(dim):
        state, word = splitmix64(state)
        # top 53 bits -> uniform on [-1, 1)
        out[j] = (word >> 11) * (2.0 / (1 << 53)) - 1.0
    norm = np.sqrt(out @ out)
    out /= norm
    out.setflags(write=False)
    return out


@dataclass
class VideoFeatures:
    video_id: str
    frames: np.ndarray

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class TextFeatures:
    caption_id: str
    video_id: str
    tokens: np.ndarray
    pooled: np.ndarray = field(repr=False)


def pool_tokens(tokens, rule="mean"):
    if rule == "mean":
        return tokens.mean(axis=0)
    if rule == "last":
        return tokens[-1].copy()
    raise InvalidConfig(f"unknown pooling rule {rule!r}")


def sample_frame_indices(n, max_frames):
    """Evenly spaced frame indices when a clip has more frames than allowed."""
    if n <= max_frames:
        return np.arange(n)
    return np.linspace(0, n - 1, max_frames).round().astype(int)


class ToyEncoder:
    """Deterministic bag-of-tokens encoder.

    Every token maps to a fixed pseudo-random unit vector derived from a
    splitmix64 stream keyed by the token and ``seed``. A text's pooled
    embedding is the configured pooling of its token vectors followed by L2
    normalisation, then multiplied by ``scale``. Frames are encoded as texts.
    """

    kind = "toy-deterministic"

    def __init__(self, dim=32, seed=0, max_tokens=MAX_TOKENS, max_frames=MAX_FRAMES,
                 pooling="mean", scale=1.0):
        if dim < 1:
            raise InvalidConfig("dim must be >= 1")
        if max_tokens < 1 or max_frames < 1:
            raise InvalidConfig("max_tokens and max_frames must be >= 1")
        if not scale > 0:
            raise InvalidConfig("scale must be positive")
        pool_tokens(np.zeros((1, 1)), pooling)
        self.dim = int(dim)
        self.seed = int(seed)
        self.max_tokens = int(max_tokens)
        self.max_frames = int(max_frames)
        self.pooling = pooling
        self.scale = float(scale)

    def __repr__(self):
        return f"ToyEncoder(dim={self.dim}, seed={self.seed}, pooling={self.pooling!r}, scale={self.scale})"

    def _tokens(self, text):
        toks = tokenize(text)
        if not toks:
            raise EmptyCaption(f"no tokens in {text!r}")
        toks = toks[: self.max_tokens]
        return np.stack([_token_vector(t, self.dim, self.seed) for t in toks])

    def _pooled(self, tokens):
        pooled = pool_tokens(tokens, self.pooling)
        norm = np.sqrt(pooled @ pooled)
        if norm < 1e-12:
            # tokens cancelled exactly; fall back to the first token
            pooled, norm = tokens[0], 1.0
        return pooled / norm * self.scale

    def encode_text(self, caption, caption_id="", video_id=""):
        if not caption or not caption.strip():
            raise EmptyCaption("caption is empty")
        tokens = self._tokens(caption)
        return TextFeatures(caption_id, video_id, tokens * self.scale, self._pooled(tokens))

    def encode_prompt(self, prompt):
        if not prompt or not prompt.strip():
            raise EmptyCaption("prompt is empty")
        return self._pooled(self._tokens(prompt))

    def encode_prompts(self, prompts):
        return np.stack([self.encode_prompt(p) for p in prompts])

    def encode_video(self, video_id, frames=None):
        """Embed a list of textual frame descriptors as an N x D matrix."""
        if frames is None:
            raise UnknownId(f"toy encoder needs frame descriptors for video {video_id!r}")
        if isinstance(frames, np.ndarray):
            return _check_frames(video_id, frames, self.dim, self.max_frames)
        frames = list(frames)
        if not frames:
            raise EmptyCaption(f"video {video_id!r} has no frames")
        keep = sample_frame_indices(len(frames), self.max_frames)
        rows = [self._pooled(self._tokens(frames[i])) for i in keep]
        return VideoFeatures(video_id, np.stack(rows))


def _check_frames(video_id, frames, dim, max_frames):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise DimensionMismatch(f"video {video_id!r}: expected N x D frames, got {frames.shape}")
    if frames.shape[1] != dim:
        raise DimensionMismatch(f"video {video_id!r}: dim {frames.shape[1]} != backend dim {dim}")
    if not np.isfinite(frames).all():
        raise DimensionMismatch(f"video {video_id!r}: non-finite frame features")
    frames = frames[sample_frame_indices(frames.shape[0], max_frames)]
    return VideoFeatures(video_id, frames)


class PrecomputedEncoder:
    """Serve frame features from a store of ``video-id -> N x D`` arrays.

    Text and prompts are delegated to ``text_encoder`` (a toy encoder of the
    same dimension by default), since exported stores usually hold only
    visual features.
    """

    kind = "precomputed-file"

    def __init__(self, store, text_encoder=None, max_frames=MAX_FRAMES):
        store = {str(k): np.asarray(v, dtype=np.float64) for k, v in store.items()}
        dims = {v.shape[-1] for v in store.values()}
        if len(dims) > 1:
            raise DimensionMismatch(f"feature store mixes dimensions {sorted(dims)}")
        if text_encoder is None:
            if not dims:
                raise InvalidConfig("empty feature store needs an explicit text encoder")
            text_encoder = ToyEncoder(dim=dims.pop())
        elif dims and dims.pop() != text_encoder.dim:
            raise DimensionMismatch("text encoder dim differs from feature store dim")
        self.store = store
        self.text_encoder = text_encoder
        self.dim = text_encoder.dim
        self.max_frames = max_frames

    @classmethod
    def from_file(cls, path, text_encoder=None, max_frames=MAX_FRAMES):
        from .ingest import read_tensor_file

        return cls(read_tensor_file(path), text_encoder=text_encoder, max_frames=max_frames)

    def encode_video(self, video_id, frames=None):
        if frames is not None and isinstance(frames, np.ndarray):
            return _check_frames(video_id, frames, self.dim, self.max_frames)
        try:
            stored = self.store[video_id]
        except KeyError:
            raise UnknownId(f"video {video_id!r} not in feature store") from None
        return _check_frames(video_id, stored, self.dim, self.max_frames)

    def encode_text(self, caption, caption_id="", video_id=""):
        return self.text_encoder.encode_text(caption, caption_id, video_id)

    def encode_prompt(self, prompt):
        return self.text_encoder.encode_prompt(prompt)

    def encode_prompts(self, prompts):
        return np.stack([self.encode_prompt(p) for p in prompts])
