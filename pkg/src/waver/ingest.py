"""Dataset manifests, the ``WVTR`` tensor container, and synthetic data.

Manifest layout (UTF-8, tab separated, one record per line):

* caption manifest, first line ``#dataset v1 split=<split> videos=<path> name=<name>``
  then ``caption-id  video-id  annotator-id  text`` (annotator ``-`` if none);
* video manifest: ``video-id  feature-file  n-frames``. A feature file ending
  in ``.wvtr`` holds a blob named after the video; any other feature file is a
  frame sheet of ``video-id  descriptor`` lines, one per frame, in order.
"""

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    BadMagic,
    DanglingReference,
    InvalidConfig,
    ParseError,
    ShapeOverflow,
    TruncatedFile,
)

MAGIC = b"WVTR"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

# -- tensor container -----------------------------------------------------------


def _blob_items(blobs):
    items = list(blobs.items()) if hasattr(blobs, "items") else list(blobs)
    seen = set()
    for name, _ in items:
        if name in seen:
            raise ShapeOverflow(f"duplicate blob name {name!r}")
        seen.add(name)
    return items


def dump_tensors(blobs):
    """Serialise ``{name: array}`` (or ``(name, array)`` pairs) to bytes."""
    items = _blob_items(blobs)
    if len(items) > 0xFFFFFFFF:
        raise ShapeOverflow("too many blobs")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HI", FORMAT_VERSION, len(items)))
    for name, array in items:
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ShapeOverflow(f"blob name too long ({len(raw_name)} bytes)")
        array = np.asarray(array)
        if array.ndim > 0xFF:
            raise ShapeOverflow(f"blob {name!r}: rank {array.ndim} exceeds 255")
        if any(d > 0xFFFFFFFF for d in array.shape):
            raise ShapeOverflow(f"blob {name!r}: dimension exceeds u32")
        out.write(struct.pack("<H", len(raw_name)))
        out.write(raw_name)
        out.write(struct.pack("<B", array.ndim))
        out.write(struct.pack(f"<{array.ndim}I", *array.shape))
        out.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return out.getvalue()


def load_tensors(data):
    """Parse bytes produced by :func:`dump_tensors` into an ordered dict of float32 arrays."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFile(f"needed {n} bytes at offset {pos}, file has {len(view)}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(view[:4]) != MAGIC:
        if len(view) < 4:
            raise TruncatedFile("file shorter than magic")
        raise BadMagic(f"expected {MAGIC!r}, found {bytes(view[:4])!r}")
    pos = 4
    version, count = struct.unpack("<HI", take(6))
    if version != FORMAT_VERSION:
        raise BadMagic(f"unsupported WVTR version {version}")
    blobs = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = 1
        for d in shape:
            n *= d
        if n * 4 > 1 << 62:
            raise ShapeOverflow(f"blob {name!r}: shape {shape} too large")
        payload = take(4 * n)
        blobs[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(view):
        raise ParseError(f"{len(view) - pos} trailing bytes after last blob")
    return blobs


def write_tensor_file(path, blobs):
    Path(path).write_bytes(dump_tensors(blobs))


def read_tensor_file(path):
    return load_tensors(Path(path).read_bytes())


def write_headed_tensors(path, header, blobs, extra_lines=()):
    """Write text header line(s) followed by a WVTR container."""
    lines = [header, *extra_lines]
    for line in lines:
        if "\n" in line:
            raise InvalidConfig("header lines must not contain newlines")
    text = "".join(line + "\n" for line in lines).encode("utf-8")
    Path(path).write_bytes(text + dump_tensors(blobs))


def read_headed_tensors(path, n_lines=1):
    raw = Path(path).read_bytes()
    lines, pos = [], 0
    for i in range(n_lines):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise TruncatedFile(f"{path}: missing header line {i + 1}")
        lines.append(raw[pos:end].decode("utf-8"))
        pos = end + 1
    return lines, load_tensors(raw[pos:])


def parse_header(line, tag, path=None):
    """Parse ``#<tag> v1 key=value ...`` into a dict of strings."""
    parts = line.split(" ")
    if len(parts) < 2 or parts[0] != f"#{tag}" or parts[1] != "v1":
        raise ParseError(f"expected '#{tag} v1 ...' header, got {line[:60]!r}", line=1, path=path)
    fields = {}
    for item in parts[2:]:
        key, sep, value = item.partition("=")
        if not sep:
            raise ParseError(f"malformed header field {item!r}", line=1, path=path)
        fields[key] = value
    return fields


# -- datasets -----------------------------------------------------------------


@dataclass(frozen=True)
class Video:
    video_id: str
    frames: object  # tuple of frame descriptors, or an N x D array
    feature_file: str = ""

    @property
    def n_frames(self):
        return len(self.frames)


@dataclass(frozen=True)
class Caption:
    caption_id: str
    video_id: str
    text: str
    annotator: str = None


@dataclass
class Dataset:
    videos: list
    captions: list
    split: str = "train"
    name: str = "dataset"
    _by_video: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.videos = list(self.videos)
        self.captions = list(self.captions)
        self.validate()

    def validate(self):
        if self.split not in SPLITS:
            raise InvalidConfig(f"unknown split {self.split!r}")
        if not self.name or any(c.isspace() for c in self.name):
            raise InvalidConfig(f"dataset name {self.name!r} must be non-empty without whitespace")
        ids = [v.video_id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise DanglingReference("duplicate video ids")
        cap_ids = [c.caption_id for c in self.captions]
        if len(set(cap_ids)) != len(cap_ids):
            raise DanglingReference("duplicate caption ids")
        by_video = {vid: [] for vid in ids}
        for cap in self.captions:
            if cap.video_id not in by_video:
                raise DanglingReference(
                    f"caption {cap.caption_id!r} references missing video {cap.video_id!r}"
                )
            by_video[cap.video_id].append(cap)
        for vid, caps in by_video.items():
            if not caps:
                raise DanglingReference(f"video {vid!r} has no captions")
        self._by_video = by_video

    @property
    def video_ids(self):
        return [v.video_id for v in self.videos]

    def captions_of(self, video_id):
        return list(self._by_video[video_id])

    def video_index(self):
        return {v.video_id: i for i, v in enumerate(self.videos)}

    def pairs(self):
        """``(caption, video_index)`` for every caption."""
        index = self.video_index()
        return [(c, index[c.video_id]) for c in self.captions]

    def subset(self, video_ids, split=None, name=None):
        keep = set(video_ids)
        return Dataset(
            [v for v in self.videos if v.video_id in keep],
            [c for c in self.captions if c.video_id in keep],
            split=split or self.split,
            name=name or self.name,
        )


def split_holdout(dataset, n_test):
    """Hold out the last ``n_test`` videos as a test split."""
    if not 1 <= n_test < len(dataset.videos):
        raise InvalidConfig(f"n_test must be in [1, {len(dataset.videos) - 1}]")
    ids = dataset.video_ids
    train = dataset.subset(ids[:-n_test], split="train")
    test = dataset.subset(ids[-n_test:], split="test")
    return train, test


def _check_field(value, what):
    if "\t" in value or "\n" in value or "\r" in value:
        raise InvalidConfig(f"{what} {value!r} contains a tab or newline")
    return value


def save_dataset(dataset, path):
    """Write the caption manifest at ``path`` plus sibling video/frame files."""
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".tsv") else path.name
    videos_name = f"{stem}.videos.tsv"
    frames_name = f"{stem}.frames.tsv"
    features_name = f"{stem}.features.wvtr"

    video_lines, frame_lines, feature_blobs = [], [], {}
    for v in dataset.videos:
        _check_field(v.video_id, "video id")
        if isinstance(v.frames, np.ndarray):
            feature_blobs[v.video_id] = v.frames
            video_lines.append(f"{v.video_id}\t{features_name}\t{len(v.frames)}\n")
        else:
            for desc in v.frames:
                frame_lines.append(f"{v.video_id}\t{_check_field(desc, 'frame descriptor')}\n")
            video_lines.append(f"{v.video_id}\t{frames_name}\t{len(v.frames)}\n")

    cap_lines = [f"#dataset v1 split={dataset.split} videos={videos_name} name={dataset.name}\n"]
    for c in dataset.captions:
        for value, what in ((c.caption_id, "caption id"), (c.text, "caption text")):
            _check_field(value, what)
        annot = c.annotator if c.annotator else "-"
        cap_lines.append(f"{c.caption_id}\t{c.video_id}\t{_check_field(annot, 'annotator')}\t{c.text}\n")

    path.write_text("".join(cap_lines), encoding="utf-8")
    (path.parent / videos_name).write_text("".join(video_lines), encoding="utf-8")
    if frame_lines:
        (path.parent / frames_name).write_text("".join(frame_lines), encoding="utf-8")
    if feature_blobs:
        write_tensor_file(path.parent / features_name, feature_blobs)


def _records(path, n_fields, last_free=False):
    """Yield ``(line_no, fields)`` for non-empty, non-comment lines."""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t", n_fields - 1) if last_free else line.split("\t")
            if len(fields) != n_fields:
                raise ParseError(
                    f"expected {n_fields} tab-separated fields, got {len(fields)}",
                    line=line_no, path=path,
                )
            yield line_no, fields


def _load_frames(path, cache):
    if path in cache:
        return cache[path]
    if path.suffix == ".wvtr":
        frames = {k: v.astype(np.float64) for k, v in read_tensor_file(path).items()}
    else:
        frames = {}
        for _, (vid, desc) in _records(path, 2, last_free=True):
            frames.setdefault(vid, []).append(desc)
        frames = {k: tuple(v) for k, v in frames.items()}
    cache[path] = frames
    return frames


def load_dataset(path):
    """Read and validate a caption manifest and everything it references."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
    meta = parse_header(header, "dataset", path=path)
    if "videos" not in meta:
        raise ParseError("header lacks videos=<path>", line=1, path=path)
    videos_path = path.parent / meta["videos"]
    split = meta.get("split", "train")
    name = meta.get("name", path.stem)

    cache, videos = {}, []
    for line_no, (vid, feature_file, n_frames) in _records(videos_path, 3):
        try:
            n = int(n_frames)
        except ValueError:
            raise ParseError(f"n-frames {n_frames!r} is not an integer", line=line_no, path=videos_path) from None
        store = _load_frames(videos_path.parent / feature_file, cache)
        if vid not in store:
            raise DanglingReference(f"video {vid!r} missing from feature file {feature_file!r}")
        frames = store[vid]
        if len(frames) != n:
            raise ParseError(
                f"video {vid!r} declares {n} frames, feature file has {len(frames)}",
                line=line_no, path=videos_path,
            )
        videos.append(Video(vid, frames, feature_file))

    captions = []
    for _, (cid, vid, annot, text) in _records(path, 4, last_free=True):
        captions.append(Caption(cid, vid, text, None if annot == "-" else annot))
    try:
        return Dataset(videos, captions, split=split, name=name)
    except InvalidConfig as exc:
        raise ParseError(str(exc), line=1, path=path) from None


# -- synthetic corpus -------------------------------------------------------------

# four domains; every verb of a domain combines with every object of it
DOMAINS = (
    (("cooking", "cutting", "serving", "tasting"),
     ("pasta", "rice", "soup", "eggs", "steak", "noodles", "onions", "bread")),
    (("playing", "tuning", "carrying", "polishing"),
     ("guitar", "piano", "violin", "drums", "cello", "flute", "harp", "trumpet")),
    (("driving", "washing", "fixing", "parking"),
     ("car", "truck", "bus", "tractor", "van", "taxi", "jeep", "motorcycle")),
    (("feeding", "walking", "petting", "brushing"),
     ("dog", "cat", "horse", "goat", "rabbit", "pony", "puppy", "lamb")),
)

PHRASE_BANK = tuple(f"{verb} {obj}" for verbs, objs in DOMAINS for verb in verbs for obj in objs)

SYNONYMS = {
    "cooking": ("preparing", "making"),
    "cutting": ("slicing", "chopping"),
    "serving": ("plating", "offering"),
    "tasting": ("sampling", "trying"),
    "playing": ("practicing", "performing"),
    "tuning": ("adjusting", "calibrating"),
    "carrying": ("holding", "lifting"),
    "polishing": ("shining", "buffing"),
    "driving": ("steering", "operating"),
    "washing": ("cleaning", "scrubbing"),
    "fixing": ("repairing", "mending"),
    "parking": ("stopping", "leaving"),
    "feeding": ("nourishing", "giving food to"),
    "walking": ("leading", "exercising"),
    "petting": ("stroking", "patting"),
    "brushing": ("grooming", "combing"),
    "pasta": ("spaghetti",),
    "car": ("automobile",),
    "truck": ("lorry",),
    "motorcycle": ("motorbike",),
    "cat": ("kitty",),
    "dog": ("doggy",),
    "drums": ("drumkit",),
}

SUBJECTS = ("a man", "a woman", "a person", "a kid", "someone")
SCENES = ("indoors", "outside", "kitchen", "park", "street", "studio")
FILLERS = ("happily", "today", "again", "slowly")

TEMPLATES = (
    "{subj} is {verb} {det}{obj}",
    "a video of {subj} {verb} {det}{obj}",
    "{subj} {verb} {det}{obj} in the {scene}",
    "{verb} {det}{obj}, {subj} {filler}",
    "someone is busy {verb} {det}{obj}",
    "in this clip {subj} keeps {verb} {det}{obj}",
    "{subj} {filler} {verb} {det}{obj}",
    "footage of {det}{obj} and {subj} {verb} it",
)


def _swap(word, rng, strength):
    options = SYNONYMS.get(word)
    if options and rng.random() < strength:
        return options[rng.integers(len(options))]
    return word


def generate_synthetic(seed, n_videos, captions_per_video, style_variants=4,
                       strength=0.1, name="synthetic", split="train", frames_range=(4, 12)):
    """Generate a caption/video corpus whose ground truth is a latent activity.

    Each video draws a distinct phrase from :data:`PHRASE_BANK` while
    ``n_videos`` allows it, and a sequence of textual frame descriptors
    mentioning that activity in a scene. Captions paraphrase the activity:
    the first ``style_variants`` templates are used, and with probability
    ``strength`` each content word is swapped for a synonym and a filler
    word is inserted.
    """
    if n_videos < 2:
        raise InvalidConfig("n_videos must be >= 2")
    if captions_per_video < 1:
        raise InvalidConfig("captions_per_video must be >= 1")
    if not 1 <= style_variants <= len(TEMPLATES):
        raise InvalidConfig(f"style_variants must be in [1, {len(TEMPLATES)}]")
    if not 0.0 <= strength <= 1.0:
        raise InvalidConfig("strength must be in [0, 1]")
    lo, hi = frames_range
    if not 1 <= lo <= hi:
        raise InvalidConfig("frames_range must satisfy 1 <= lo <= hi")

    rng = np.random.default_rng(seed)
    bank = len(PHRASE_BANK)
    if n_videos <= bank:
        phrase_idx = rng.permutation(bank)[:n_videos]
    else:
        phrase_idx = np.concatenate([rng.permutation(bank), rng.integers(bank, size=n_videos - bank)])

    width = len(str(n_videos - 1))
    videos, captions = [], []
    for i, p in enumerate(phrase_idx):
        verb, obj = PHRASE_BANK[p].split(" ")
        vid = f"video{i:0{width}d}"
        subj = SUBJECTS[rng.integers(len(SUBJECTS))]
        frames = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            words = [verb, obj]
            if rng.random() < 0.15:
                del words[int(rng.integers(2))]  # partially occluded action
            if rng.random() < 0.5:
                words.append(SCENES[rng.integers(len(SCENES))])
            frames.append(" ".join(words))
        videos.append(Video(vid, tuple(frames)))

        for k in range(captions_per_video):
            template = TEMPLATES[0] if k == 0 else TEMPLATES[rng.integers(style_variants)]
            styled = k > 0
            text = template.format(
                subj=SUBJECTS[rng.integers(len(SUBJECTS))] if styled else subj,
                verb=_swap(verb, rng, strength) if styled else verb,
                obj=_swap(obj, rng, strength) if styled else obj,
                det="the " if styled and rng.random() < 0.5 else "",
                scene=SCENES[rng.integers(len(SCENES))],
                filler=FILLERS[rng.integers(len(FILLERS))],
            )
            if styled and "{filler}" not in template and rng.random() < strength * 0.5:
                text = f"{text} {FILLERS[rng.integers(len(FILLERS))]}"
            captions.append(Caption(f"{vid}_c{k}", vid, text, f"annotator{k}"))
    return Dataset(videos, captions, split=split, name=name)
