"""Video content dictionary: activity phrases ranked against each video.

Captions are mined for verb phrases, every phrase is wrapped in the prompt
``"This is a video about <phrase>"`` and embedded with the frozen text
encoder, and each video keeps the ``kappa`` phrases whose prompt embeddings
have the highest cosine similarity to its mean frame embedding.
"""

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import EmptyPhrase, EmptyVocab, InvalidConfig, ParseError
from .numerics import cosine_matrix, mean_pool_rows

PROMPT_PREFIX = "This is a video about "
DEFAULT_KAPPA = 5
MAX_TAIL = 3

_WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?|[.,;:!?()\"]")

AUXILIARIES = frozenset(
    "is are was were be been being am do does did has have had will would shall "
    "should can could may might must 's 're".split()
)
CONJUNCTIONS = frozenset("and or but nor so yet while whereas because although though then".split())
# dropped from the end of a phrase so "playing guitar in the" becomes "playing guitar"
TRAILING_FUNCTION_WORDS = frozenset(
    "a an the this that these those in on at of to for with by from into onto over under "
    "near about as who which what where when".split()
)
NON_VERB_ING = frozenset(
    "thing things something anything nothing everything morning evening ceiling king ring "
    "wing spring string sing sting swing bring during ping icing pudding wedding building "
    "clothing stuffing awning".split()
)
# base, third-person and past forms of common activity verbs that are not gerunds
VERBS = frozenset(
    """
    play plays played cook cooks cooked ride rides rode drive drives drove paint paints painted
    throw throws threw read reads sing sings sang wash washes washed cut cuts climb climbs
    climbed feed feeds fed build builds built swim swims swam dance dances danced fix fixes fixed
    run runs ran walk walks walked jump jumps jumped talk talks talked eat eats ate drink drinks
    drank write writes wrote draw draws drew make makes made open opens opened close closes
    closed kick kicks kicked catch catches caught hit hits push pushes pushed pull pulls pulled
    carry carries carried hold holds held watch watches watched show shows showed explain
    explains explained sit sits sat stand stands stood pour pours poured mix mixes mixed stir
    stirs stirred chop chops chopped slice slices sliced bake bakes baked fry fries fried grill
    grills grilled clean cleans cleaned repair repairs repaired wear wears wore teach teaches
    taught perform performs performed practice practices practiced prepare prepares prepared
    shoot shoots shot score scores scored skate skates skated ski skis skied surf surfs surfed
    """.split()
)


def _words(text):
    return _WORD_RE.findall(text.lower())


def _is_verb(token):
    if token in AUXILIARIES:
        return False
    if token in VERBS:
        return True
    return token.endswith("ing") and len(token) > 4 and token not in NON_VERB_ING


def _is_stop(token):
    return not token[0].isalnum() or token in CONJUNCTIONS


def phrases_in(text):
    """Rule-based verb phrases of one caption, in order of appearance."""
    words = _words(text)
    found, i = [], 0
    while i < len(words):
        if not _is_verb(words[i]):
            i += 1
            continue
        j = i + 1
        while j < len(words) and j - i - 1 < MAX_TAIL:
            if _is_stop(words[j]) or _is_verb(words[j]) or words[j] in AUXILIARIES:
                break
            j += 1
        span = words[i:j]
        while len(span) > 1 and span[-1] in TRAILING_FUNCTION_WORDS:
            span.pop()
        found.append(" ".join(span))
        i = j
    return found


@dataclass(frozen=True)
class ActivityPhrase:
    text: str
    source_caption_id: str = ""


def extract_activities(captions, sidecar=None):
    """Deduplicated activity phrases over ``(caption_id, text)`` pairs.

    Order is first occurrence. When ``sidecar`` (caption id -> list of
    phrases) is given it replaces the rules entirely.
    """
    seen, out = set(), []
    for caption_id, text in captions:
        if sidecar is not None:
            phrases = sidecar.get(caption_id, ())
        else:
            phrases = phrases_in(text)
        for phrase in phrases:
            phrase = " ".join(phrase.lower().split())
            if phrase and phrase not in seen:
                seen.add(phrase)
                out.append(ActivityPhrase(phrase, caption_id))
    return out


def read_phrase_sidecar(path):
    """``caption-id \\t phrase \\t phrase ...`` lines -> dict."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cid, *phrases = line.split("\t")
            if not cid:
                raise ParseError("empty caption id", line=line_no, path=path)
            table.setdefault(cid, []).extend(p for p in phrases if p.strip())
    return table


def build_prompt(phrases):
    """``"This is a video about "`` followed by the phrase(s), joined by ``", "``."""
    if isinstance(phrases, str):
        phrases = [phrases]
    phrases = list(phrases)
    if not phrases or any(not p or not p.strip() for p in phrases):
        raise EmptyPhrase("prompt needs at least one non-empty phrase")
    return PROMPT_PREFIX + ", ".join(phrases)


def global_video_embedding(frames):
    return mean_pool_rows(frames)


@dataclass
class VocabEntry:
    phrase: ActivityPhrase
    embedding: np.ndarray
    score: float = 0.0


def top_k_order(scores, phrases, kappa):
    """Indices of the ``kappa`` best scores.

    Descending score, then ascending phrase text, then insertion index.
    """
    if kappa < 1:
        raise InvalidConfig("kappa must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(len(scores)), np.asarray(phrases, dtype=str), -scores))
    return order[: min(kappa, len(scores))]


def top_k_vocab(e, vocab, kappa):
    """Phrases of the ``kappa`` vocabulary entries most similar to ``e``."""
    if not vocab:
        raise EmptyVocab("vocabulary is empty")
    embeddings = np.stack([entry.embedding for entry in vocab])
    scores = cosine_matrix(np.atleast_2d(e), embeddings)[0]
    for entry, s in zip(vocab, scores):
        entry.score = float(s)
    texts = [entry.phrase.text for entry in vocab]
    return [texts[i] for i in top_k_order(scores, texts, kappa)]


@dataclass
class ContentDictionary:
    entries: dict  # video id -> list of phrases, best first
    kappa: int
    vocab_size: int
    dim: int
    source: str = "dataset"

    def __post_init__(self):
        if self.kappa < 1:
            raise InvalidConfig("kappa must be >= 1")
        if not self.source or any(c.isspace() for c in self.source):
            raise InvalidConfig(f"source {self.source!r} must be non-empty without whitespace")

    def __len__(self):
        return len(self.entries)

    @property
    def video_ids(self):
        return list(self.entries)

    def prompts(self):
        return [build_prompt(phrases) for phrases in self.entries.values()]

    def dumps(self):
        lines = [f"#vcd v1 kappa={self.kappa} dim={self.dim} source={self.source} vocab={self.vocab_size}"]
        for vid, phrases in self.entries.items():
            for value in (vid, *phrases):
                if "\t" in value or "\n" in value:
                    raise InvalidConfig(f"{value!r} contains a tab or newline")
            lines.append("\t".join([vid, str(len(phrases)), *phrases]))
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_bytes(self.dumps().encode("utf-8"))

    @classmethod
    def loads(cls, text, path=None):
        from .ingest import parse_header

        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines:
            raise ParseError("empty dictionary file", path=path)
        meta = parse_header(lines[0], "vcd", path=path)
        try:
            kappa, dim = int(meta["kappa"]), int(meta["dim"])
            vocab = int(meta.get("vocab", 0))
        except (KeyError, ValueError):
            raise ParseError("header needs integer kappa= and dim=", line=1, path=path) from None
        entries = {}
        for line_no, line in enumerate(lines[1:], 2):
            fields = line.split("\t")
            if len(fields) < 2:
                raise ParseError("malformed dictionary record", line=line_no, path=path)
            vid, count, phrases = fields[0], fields[1], fields[2:]
            if not vid or not count.isdigit() or int(count) != len(phrases):
                raise ParseError("malformed dictionary record", line=line_no, path=path)
            if vid in entries:
                raise ParseError(f"duplicate video id {vid!r}", line=line_no, path=path)
            entries[vid] = phrases
        return cls(entries, kappa, vocab, dim, meta.get("source", "dataset"))

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_bytes().decode("utf-8"), path=path)


def build_vocabulary(dataset, backend, sidecar=None):
    phrases = extract_activities(((c.caption_id, c.text) for c in dataset.captions), sidecar)
    if not phrases:
        raise EmptyVocab(f"no activity phrases found in {dataset.name!r}")
    embeddings = backend.encode_prompts([build_prompt(p.text) for p in phrases])
    return [VocabEntry(p, h) for p, h in zip(phrases, embeddings)]


def build_dictionary(dataset, backend, kappa=DEFAULT_KAPPA, vocab_source=None, sidecar=None):
    """Top-``kappa`` phrases for every video of ``dataset``.

    The vocabulary is mined from ``vocab_source`` captions when given
    (cross-dataset dictionaries), otherwise from ``dataset`` itself.
    """
    if kappa < 1:
        raise InvalidConfig("kappa must be >= 1")
    source = vocab_source if vocab_source is not None else dataset
    vocab = build_vocabulary(source, backend, sidecar)
    texts = [entry.phrase.text for entry in vocab]
    globals_ = np.stack([
        global_video_embedding(backend.encode_video(v.video_id, v.frames).frames)
        for v in dataset.videos
    ])
    scores = cosine_matrix(globals_, np.stack([entry.embedding for entry in vocab]))
    entries = {
        v.video_id: [texts[i] for i in top_k_order(row, texts, kappa)]
        for v, row in zip(dataset.videos, scores)
    }
    return ContentDictionary(entries, kappa, len(vocab), backend.dim, source.name)


class ContentDictionaryBuilder(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit`` mines and embeds the vocabulary,
    ``transform`` maps videos to their top-``kappa`` phrase lists."""

    def __init__(self, backend=None, kappa=DEFAULT_KAPPA):
        self.backend = backend
        self.kappa = kappa

    def fit(self, dataset, y=None, sidecar=None):
        if self.kappa < 1:
            raise InvalidConfig("kappa must be >= 1")
        self.vocabulary_ = build_vocabulary(dataset, self._backend(), sidecar)
        self.source_ = dataset.name
        return self

    def _backend(self):
        from .encoders import ToyEncoder

        return self.backend if self.backend is not None else ToyEncoder()

    def transform(self, videos):
        """``videos``: a Dataset or an iterable of frame matrices."""
        check_is_fitted(self, "vocabulary_")
        backend = self._backend()
        if hasattr(videos, "videos"):
            frames = [backend.encode_video(v.video_id, v.frames).frames for v in videos.videos]
        else:
            frames = list(videos)
        return [top_k_vocab(global_video_embedding(f), self.vocabulary_, self.kappa) for f in frames]

    def build(self, dataset):
        """Fit-time vocabulary applied to ``dataset`` as a :class:`ContentDictionary`."""
        lists = self.transform(dataset)
        entries = dict(zip(dataset.video_ids, lists))
        return ContentDictionary(entries, self.kappa, len(self.vocabulary_), self._backend().dim, self.source_)
