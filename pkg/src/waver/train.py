"""Projection heads, bidirectional InfoNCE and the training loop."""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from ._random import substream
from ._validation import check_choice, check_int, check_real
from .distill import cross_attend
from .encoders import TextFeatures, pool_tokens
from .exceptions import (
    InsufficientData,
    InvalidConfig,
    NonPositiveTemperature,
    NonSquare,
    NumericError,
    ParseError,
)
from .ingest import parse_header, read_headed_tensors, write_headed_tensors
from .numerics import Tensor

TAU_MIN, TAU_MAX = 5e-3, 0.5
HIDDEN_BIAS_INIT = 2.0
WHITEN_EPS = 1e-2  # ridge added to the eigenvalues, relative to the largest


class ProjectionHead:
    """Three affine layers with ReLU between them, then row L2 normalisation.

    Widths default to ``dim -> dim -> dim // 2 -> d_proj``. Inputs are first
    whitened by a frozen shift and linear map (identity until
    :meth:`fit_input_scaler` is called).
    """

    def __init__(self, dim, d_proj=None, hidden_dims=None, init="random", rng=None, prefix="head"):
        self.dim = check_int(dim, "dim", 1)
        self.d_proj = check_int(d_proj if d_proj is not None else max(1, dim // 2), "d_proj", 1)
        if self.d_proj > self.dim:
            raise InvalidConfig(f"d_proj ({self.d_proj}) must not exceed dim ({self.dim})")
        hidden = tuple(hidden_dims) if hidden_dims is not None else (dim, max(1, dim // 2))
        if len(hidden) != 2:
            raise InvalidConfig("hidden_dims needs exactly two widths")
        self.hidden_dims = tuple(check_int(h, "hidden width", 1) for h in hidden)
        self.prefix = prefix
        self.input_mean = np.zeros((1, self.dim))
        self.input_scale = np.eye(self.dim)
        widths = (self.dim, *self.hidden_dims, self.d_proj)
        self.params = []
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]), 1):
            self.params.append(Tensor(np.zeros((fan_in, fan_out)), True, f"{prefix}.fc{k}.weight"))
            self.params.append(Tensor(np.zeros((1, fan_out)), True, f"{prefix}.fc{k}.bias"))
        if init == "random":
            rng = rng if rng is not None else np.random.default_rng(0)
            for w in self.params[::2]:
                fan_in = w.shape[0]
                w.data[...] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=w.shape)
            # positive hidden biases keep most units in their linear regime at init
            for b in self.params[1:4:2]:
                b.data[...] = HIDDEN_BIAS_INIT
        elif init == "identity":
            self._identity_init()
        else:
            raise InvalidConfig(f"unknown head init {init!r}")

    def _identity_init(self, shift=1e3):
        if not (self.hidden_dims == (self.dim, self.dim) and self.d_proj == self.dim):
            raise InvalidConfig("identity init needs hidden_dims == (dim, dim) and d_proj == dim")
        # a large positive shift keeps every ReLU in its linear regime
        eye = np.eye(self.dim)
        w1, b1, w2, b2, w3, b3 = self.params
        w1.data[...], b1.data[...] = eye, shift
        w2.data[...], b2.data[...] = eye, 0.0
        w3.data[...], b3.data[...] = eye, -shift

    def fit_input_scaler(self, x, eps=WHITEN_EPS):
        """Freeze a ZCA whitening of ``x`` (rows are samples).

        ``eps`` times the largest eigenvalue is added to every eigenvalue, so
        near-constant directions are not blown up.
        """
        x = np.asarray(x, dtype=np.float64)
        self.input_mean = x.mean(axis=0, keepdims=True)
        centred = x - self.input_mean
        evals, evecs = np.linalg.eigh(centred.T @ centred / max(len(x), 1))
        evals = np.maximum(evals, 0.0) + max(eps * evals.max(), 1e-12)
        self.input_scale = (evecs / np.sqrt(evals)) @ evecs.T
        return self

    def __call__(self, x):
        """Project a ``B x dim`` batch (array or Tensor) to unit rows."""
        if isinstance(x, Tensor):
            if x.shape[-1] != self.dim:
                raise nx.DimensionMismatch(f"head expects dim {self.dim}, got {x.shape[-1]}")
            x = (x - self.input_mean) @ Tensor(self.input_scale)
        else:
            x = np.atleast_2d(np.asarray(x, dtype=np.float64))
            if x.shape[-1] != self.dim:
                raise nx.DimensionMismatch(f"head expects dim {self.dim}, got {x.shape[-1]}")
            x = Tensor((x - self.input_mean) @ self.input_scale)
        w1, b1, w2, b2, w3, b3 = self.params
        h = nx.relu(x @ w1 + b1)
        h = nx.relu(h @ w2 + b2)
        return nx.l2_normalize_rows(h @ w3 + b3)

    def state(self):
        out = {f"{self.prefix}.input.mean": self.input_mean.copy(),
               f"{self.prefix}.input.scale": self.input_scale.copy()}
        out.update((p.name, p.data.copy()) for p in self.params)
        return out

    def load_state(self, state):
        mean_key, scale_key = f"{self.prefix}.input.mean", f"{self.prefix}.input.scale"
        if mean_key in state:
            self.input_mean = np.asarray(state[mean_key], dtype=np.float64).reshape(1, self.dim)
            self.input_scale = np.asarray(state[scale_key], dtype=np.float64).reshape(self.dim, self.dim)
        for p in self.params:
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.shape:
                raise InvalidConfig(f"{p.name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()


def pool_input(x, pooling="mean"):
    """Reduce frames (``N x D``) or text tokens to one ``1 x D`` row."""
    if isinstance(x, TextFeatures):
        return pool_tokens(x.tokens, pooling)[None, :]
    if isinstance(x, Tensor):
        return nx.mean(x, axis=0, keepdims=True)
    return np.asarray(x, dtype=np.float64).mean(axis=0, keepdims=True)


def project_and_pool(x, head, pooling="mean"):
    return head(pool_input(x, pooling))


def _check_sim(sim, tau):
    data = sim.data if isinstance(sim, Tensor) else np.asarray(sim, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] != data.shape[1]:
        raise NonSquare(f"similarity matrix must be square, got {data.shape}")
    t = tau.data if isinstance(tau, Tensor) else tau
    if not np.all(np.asarray(t) > 0):
        raise NonPositiveTemperature(f"temperature must be positive, got {t}")


def _directional(sim, tau):
    if isinstance(sim, Tensor) or isinstance(tau, Tensor):
        logits = nx.div(nx._as_tensor(sim), tau)
        return nx.mean(nx.logsumexp_rows(logits) - nx.diagonal(logits))
    logits = np.asarray(sim, dtype=np.float64) / tau
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(lse - np.diagonal(logits)))


def infonce_t2v(sim, tau):
    """Text-to-video loss: each text row is a softmax over videos."""
    _check_sim(sim, tau)
    return _directional(sim, tau)


def infonce_v2t(sim, tau):
    """Video-to-text loss: softmax over the columns of the text-row matrix."""
    _check_sim(sim, tau)
    return _directional(nx.transpose(sim) if isinstance(sim, Tensor) else np.asarray(sim).T, tau)


def infonce_total(sim, tau):
    t2v, v2t = infonce_t2v(sim, tau), infonce_v2t(sim, tau)
    return (t2v + v2t) * 0.5


def contrastive_loss(frames, texts, corpus, video_head, text_head, tau, pooling="mean"):
    """InfoNCE for a batch straight from frame matrices and text features.

    ``frames`` entries may be Tensors to obtain gradients with respect to the
    video features through the cross-attention.
    """
    videos = nx.concat_rows([pool_input(cross_attend(f, corpus)) for f in frames])
    queries = np.vstack([pool_input(t, pooling) for t in texts])
    sim = text_head(queries) @ nx.transpose(video_head(videos))
    return infonce_total(sim, tau)


@dataclass
class TrainConfig:
    batch_size: int = 126
    epochs: int = 5
    max_steps: int = None
    learning_rate: float = 1e-4
    momentum: float = 0.0
    tau_init: float = 0.07
    seed: int = 0
    d_proj: int = None
    hidden_dims: tuple = None
    head_init: str = "random"
    text_pooling: str = "mean"
    standardize: bool = True
    optimizer: str = "sgd"
    tie_init: bool = True

    def validate(self):
        check_int(self.batch_size, "batch_size", 2)
        check_int(self.epochs, "epochs", 0)
        if self.max_steps is not None:
            check_int(self.max_steps, "max_steps", 0)
        check_real(self.learning_rate, "learning_rate", 0.0, low_open=True)
        check_real(self.momentum, "momentum", 0.0, 1.0)
        check_real(self.tau_init, "tau_init", TAU_MIN, TAU_MAX)
        check_int(self.seed, "seed")
        check_choice(self.head_init, "head_init", {"random", "identity"})
        check_choice(self.text_pooling, "text_pooling", {"mean", "last"})
        check_choice(self.optimizer, "optimizer", {"sgd", "adam"})
        return self


@dataclass
class TrainResult:
    video_head: ProjectionHead
    text_head: ProjectionHead
    tau: float
    trace: list = field(default_factory=list)  # (step, loss, tau)


class SGD:
    """Gradient descent with optional heavy-ball momentum."""

    def __init__(self, params, lr, momentum=0.0):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, grads):
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr = params, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config, params):
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate)
    return SGD(params, config.learning_rate, config.momentum)


def init_heads(dim, config):
    """Both heads start from the same draw so the two towers begin aligned."""
    kwargs = dict(d_proj=config.d_proj, hidden_dims=config.hidden_dims, init=config.head_init)
    video = ProjectionHead(dim, prefix="video", rng=substream(config.seed, "init"), **kwargs)
    text_rng = substream(config.seed, "init" if config.tie_init else "init-text")
    text = ProjectionHead(dim, prefix="text", rng=text_rng, **kwargs)
    return video, text


def distilled_inputs(dataset, corpus, backend):
    """Mean-pooled distilled embedding per video, ``G x D``.

    Frame features come from the frozen encoder, so the distillation is a
    fixed function of the data and can be computed once per video.
    """
    rows = [
        cross_attend(backend.encode_video(v.video_id, v.frames).frames, corpus).mean(axis=0)
        for v in dataset.videos
    ]
    return np.vstack(rows)


def text_inputs(texts, backend, pooling="mean"):
    return np.vstack([pool_input(backend.encode_text(t), pooling) for t in texts])


def train_loop(dataset, corpus, backend, config, on_step=None):
    """Optimise both heads and the temperature with minibatch SGD.

    Pairs are reshuffled each epoch from the ``shuffle`` sub-stream of the run
    seed; a trailing partial batch is dropped.
    """
    config.validate()
    pairs = dataset.pairs()
    batch = config.batch_size
    if len(pairs) < batch:
        raise InsufficientData(f"{len(pairs)} caption/video pairs, batch size is {batch}")

    video_head, text_head = init_heads(backend.dim, config)
    tau = Tensor(config.tau_init, True, "tau")
    params = video_head.params + text_head.params + [tau]
    optimizer = make_optimizer(config, params)

    video_x = distilled_inputs(dataset, corpus, backend)
    text_x = text_inputs([c.text for c, _ in pairs], backend, config.text_pooling)
    video_of = np.array([vi for _, vi in pairs])
    # ReLU would quietly turn NaN into zero, so check before the heads see it
    for name, x in (("video", video_x), ("text", text_x)):
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite {name} features")
    if config.standardize:
        video_head.fit_input_scaler(video_x)
        text_head.fit_input_scaler(text_x)

    per_epoch = len(pairs) // batch
    total = config.epochs * per_epoch
    if config.max_steps is not None:
        total = config.max_steps
    rng = substream(config.seed, "shuffle")
    trace, step = [], 0
    while step < total:
        order = rng.permutation(len(pairs))
        for b in range(per_epoch):
            if step >= total:
                break
            idx = order[b * batch:(b + 1) * batch]
            sim = text_head(text_x[idx]) @ nx.transpose(video_head(video_x[video_of[idx]]))
            loss = infonce_total(sim, tau)
            if not np.isfinite(loss.data).all():
                raise NumericError(f"non-finite loss at step {step}")
            optimizer.step(nx.backward(loss, params))
            tau.data = np.clip(tau.data, TAU_MIN, TAU_MAX)
            step += 1
            trace.append((step, loss.item(), tau.item()))
            if on_step is not None:
                on_step(step, loss.item(), tau.item())
    return TrainResult(video_head, text_head, tau.item(), trace)


def initial_result(dim, config):
    """Parameters a zero-step run would return."""
    config.validate()
    video_head, text_head = init_heads(dim, config)
    return TrainResult(video_head, text_head, float(config.tau_init), [])


# -- persistence --------------------------------------------------------------


def save_checkpoint(path, result, pooling="mean"):
    vh, th = result.video_head, result.text_head
    header = f"#ckpt v1 dim={vh.dim} dproj={vh.d_proj} tau={result.tau!r} pooling={pooling}"
    blobs = {**vh.state(), **th.state()}
    write_headed_tensors(path, header, blobs)


def load_checkpoint(path):
    """Returns ``(TrainResult, pooling)``."""
    (header,), blobs = read_headed_tensors(path, n_lines=1)
    meta = parse_header(header, "ckpt", path=path)
    try:
        dim, d_proj, tau = int(meta["dim"]), int(meta["dproj"]), float(meta["tau"])
    except (KeyError, ValueError):
        raise ParseError("header needs dim=, dproj=, tau=", line=1, path=path) from None
    heads = []
    for prefix in ("video", "text"):
        try:
            hidden = (blobs[f"{prefix}.fc1.weight"].shape[1], blobs[f"{prefix}.fc2.weight"].shape[1])
        except KeyError:
            raise ParseError(f"missing {prefix} head tensors", path=path) from None
        head = ProjectionHead(dim, d_proj, hidden, prefix=prefix)
        head.load_state(blobs)
        heads.append(head)
    return TrainResult(heads[0], heads[1], tau, []), meta.get("pooling", "mean")


def write_trace(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "tau"])
        for step, loss, tau in trace:
            writer.writerow([step, repr(float(loss)), repr(float(tau))])


def read_trace(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["loss"]), float(r["tau"])) for r in rows]


# -- frozen snapshot used for retrieval -------------------------------------------


@dataclass
class RetrievalModel:
    """Immutable view of trained heads plus the frozen corpus and encoder."""

    video_head: ProjectionHead
    text_head: ProjectionHead
    tau: float
    corpus: object
    backend: object
    text_pooling: str = "mean"

    @classmethod
    def from_result(cls, result, corpus, backend, text_pooling="mean"):
        return cls(result.video_head, result.text_head, result.tau, corpus, backend, text_pooling)

    def embed_videos(self, videos):
        rows = [
            pool_input(cross_attend(self.backend.encode_video(v.video_id, v.frames).frames, self.corpus))
            for v in videos
        ]
        return self.video_head(np.vstack(rows)).data

    def embed_texts(self, texts):
        return self.text_head(text_inputs(texts, self.backend, self.text_pooling)).data

    def similarity(self, texts, videos):
        """Cosine similarity, texts in rows and videos in columns."""
        return self.embed_texts(texts) @ self.embed_videos(videos).T

    def with_corpus(self, corpus):
        return replace(self, corpus=corpus)
