"""Retrieval ranking, metrics and the evaluation protocols.

Protocols:

* multi-caption: every caption is a query against all videos of the split;
* style: one caption per video, picked by a keyed generator per seed, then
  mean and spread of the metrics over seeds;
* annotator split: one query set per annotator;
* top-kappa sweep: rebuild dictionary and corpus, retrain, evaluate.
"""

import io
import math
from dataclasses import dataclass, field

import numpy as np

from ._random import keyed_choice
from ._validation import check_int
from .exceptions import EmptyInput, IndexOutOfRange, InvalidConfig, UnknownCaption

METRICS = ("r1", "r5", "r10", "mdr", "mnr")
STYLE_SEEDS = (16, 171, 1710, 2804)
SWEEP_KAPPAS = (1, 3, 5, 7, 9)


@dataclass(frozen=True)
class RetrievalReport:
    r1: float
    r5: float
    r10: float
    mdr: float
    mnr: float
    n_queries: int
    seed: int = None

    def __post_init__(self):
        if not 0.0 <= self.r1 <= self.r5 <= self.r10 <= 100.0:
            raise InvalidConfig(f"recalls out of order: {self.r1}, {self.r5}, {self.r10}")
        if self.mdr < 1 or self.mnr < 1:
            raise InvalidConfig("ranks start at 1")

    def values(self):
        return [getattr(self, m) for m in METRICS]

    def as_dict(self):
        return dict(zip(METRICS, self.values()))


def rank_targets(sim, truth):
    """Rank of each query's ground-truth column, 1-based.

    Higher similarity ranks first; among equal scores the lower gallery index
    ranks first, so a tied target never ranks better than the items it ties
    with that come before it.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] < 1 or sim.shape[1] < 1:
        raise EmptyInput(f"similarity matrix must be non-empty 2-D, got shape {sim.shape}")
    truth = np.asarray(truth)
    if truth.shape != (sim.shape[0],):
        raise IndexOutOfRange(f"need one target per query ({sim.shape[0]}), got {truth.shape}")
    if truth.dtype.kind not in "iu" or (truth < 0).any() or (truth >= sim.shape[1]).any():
        raise IndexOutOfRange(f"targets must be gallery indices in [0, {sim.shape[1]})")
    rows = np.arange(sim.shape[0])
    target = sim[rows, truth][:, None]
    before = np.arange(sim.shape[1])[None, :] < truth[:, None]
    ahead = (sim > target) | ((sim == target) & before)
    return 1 + ahead.sum(axis=1)


def compute_metrics(ranks, seed=None):
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise EmptyInput("no ranks to summarise")
    if (ranks < 1).any():
        raise InvalidConfig("ranks start at 1")
    q = ranks.size
    recall = [100.0 * np.count_nonzero(ranks <= k) / q for k in (1, 5, 10)]
    return RetrievalReport(*recall, float(np.median(ranks)), float(ranks.mean()), q, seed)


def evaluate_queries(model, texts, truth, videos, seed=None):
    """Rank ``videos`` for each text query; ``truth`` holds gallery indices."""
    sim = model.similarity(list(texts), list(videos))
    return compute_metrics(rank_targets(sim, np.asarray(truth, dtype=np.int64)), seed)


def _evaluate_captions(model, dataset, captions, seed=None):
    index = dataset.video_index()
    truth = [index[c.video_id] for c in captions]
    return evaluate_queries(model, [c.text for c in captions], truth, dataset.videos, seed)


def multi_caption_eval(model, dataset):
    """Every caption is one query; the gallery is all videos of ``dataset``."""
    return _evaluate_captions(model, dataset, dataset.captions)


def select_captions(dataset, seed):
    """One caption per video, chosen by ``keyed_choice(seed, video_index, n)``."""
    return [
        caps[keyed_choice(seed, i, len(caps))]
        for i, caps in enumerate(dataset.captions_of(v) for v in dataset.video_ids)
    ]


def _spread(values, ddof):
    values = np.asarray(values, dtype=np.float64)
    if len(values) <= ddof or np.all(values == values[0]):
        return 0.0
    return float(np.std(values, ddof=ddof))


@dataclass
class StyleRobustnessReport:
    reports: list
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    ddof: int = 1

    @classmethod
    def from_reports(cls, reports, ddof=1):
        if not reports:
            raise EmptyInput("no per-seed reports")
        mean = {m: math.fsum(getattr(r, m) for r in reports) / len(reports) for m in METRICS}
        for m in METRICS:
            # keep the mean inside the observed range despite rounding
            lo = min(getattr(r, m) for r in reports)
            hi = max(getattr(r, m) for r in reports)
            mean[m] = min(max(mean[m], lo), hi)
        std = {m: _spread([getattr(r, m) for r in reports], ddof) for m in METRICS}
        return cls(list(reports), mean, std, ddof)


def style_eval(model, dataset, seeds=STYLE_SEEDS, ddof=1):
    """Per-seed single-caption evaluation plus mean and std per metric.

    ``ddof=1`` gives the sample standard deviation, ``ddof=0`` the population
    one. With a single seed the std is 0.
    """
    seeds = [check_int(s, "seed") for s in seeds]
    if not seeds:
        raise EmptyInput("style evaluation needs at least one seed")
    if ddof not in (0, 1):
        raise InvalidConfig("ddof must be 0 or 1")
    reports = [_evaluate_captions(model, dataset, select_captions(dataset, s), s) for s in seeds]
    return StyleRobustnessReport.from_reports(reports, ddof)


def annotator_selections(dataset):
    """``annotator -> {video id: caption id}`` from the captions' annotator field.

    Only annotators who captioned every video are kept; if one captioned a
    video twice, the first caption wins.
    """
    table = {}
    for cap in dataset.captions:
        if cap.annotator is not None:
            table.setdefault(cap.annotator, {}).setdefault(cap.video_id, cap.caption_id)
    n = len(dataset.videos)
    return {a: sel for a, sel in sorted(table.items()) if len(sel) == n}


def annotator_split_eval(model, dataset, selections):
    """One report per annotator over the captions that annotator selected."""
    by_id = {c.caption_id: c for c in dataset.captions}
    out = {}
    for annotator, chosen in selections.items():
        missing = [v for v in dataset.video_ids if v not in chosen]
        if missing:
            raise InvalidConfig(f"annotator {annotator!r} selects no caption for {missing[0]!r}")
        captions = []
        for vid in dataset.video_ids:
            cap = by_id.get(chosen[vid])
            if cap is None or cap.video_id != vid:
                raise UnknownCaption(f"annotator {annotator!r}: no caption {chosen[vid]!r} for video {vid!r}")
            captions.append(cap)
        out[annotator] = _evaluate_captions(model, dataset, captions)
    return out


@dataclass
class SweepRow:
    kappa: int
    report: RetrievalReport
    dictionary: object


def kappa_sweep(train, test, backend, kappas=SWEEP_KAPPAS, config=None, z=64.0, sidecar=None):
    """Rebuild dictionary and corpus for every ``kappa``, retrain, evaluate on ``test``.

    Rows follow the order of ``kappas``, duplicates included.
    """
    from .distill import build_corpus
    from .train import RetrievalModel, TrainConfig, train_loop
    from .vcd import build_dictionary

    kappas = [check_int(k, "kappa", 1) for k in kappas]
    if not kappas:
        raise EmptyInput("kappa list is empty")
    config = config if config is not None else TrainConfig()
    rows = []
    for kappa in kappas:
        dictionary = build_dictionary(train, backend, kappa, sidecar=sidecar)
        corpus = build_corpus(dictionary, backend, z)
        result = train_loop(train, corpus, backend, config)
        model = RetrievalModel.from_result(result, corpus, backend, config.text_pooling)
        rows.append(SweepRow(kappa, multi_caption_eval(model, test), dictionary))
    return rows


def is_prefix_chain(dictionaries):
    """True when, for every video, the smaller-kappa list prefixes the larger."""
    ordered = sorted(dictionaries, key=lambda d: d.kappa)
    for small, large in zip(ordered, ordered[1:]):
        if small.video_ids != large.video_ids:
            return False
        for vid in small.video_ids:
            a, b = small.entries[vid], large.entries[vid]
            if b[: len(a)] != a:
                return False
    return True


# -- output -------------------------------------------------------------------


def _num(x):
    return repr(float(x))


def report_csv(report):
    buf = io.StringIO()
    buf.write("metric,value\n")
    for m, v in report.as_dict().items():
        buf.write(f"{m},{_num(v)}\n")
    buf.write(f"n_queries,{report.n_queries}\n")
    return buf.getvalue()


def _rows_csv(key, rows):
    lines = [",".join((key, *METRICS))]
    for label, values in rows:
        lines.append(",".join([str(label), *(_num(v) for v in values)]))
    return "\n".join(lines) + "\n"


def style_csv(style):
    rows = [(r.seed, r.values()) for r in style.reports]
    rows.append(("mean", [style.mean[m] for m in METRICS]))
    rows.append(("std", [style.std[m] for m in METRICS]))
    return _rows_csv("seed", rows)


def sweep_csv(rows):
    return _rows_csv("kappa", [(r.kappa, r.report.values()) for r in rows])


def annotator_csv(reports):
    return _rows_csv("annotator", [(a, r.values()) for a, r in reports.items()])


def format_table(key, rows):
    """Fixed-width text table of ``(label, values)`` rows, two decimals."""
    head = [key.ljust(10)] + [m.upper().rjust(8) for m in METRICS]
    lines = [" ".join(head)]
    for label, values in rows:
        lines.append(" ".join([str(label).ljust(10)] + [f"{v:8.2f}" for v in values]))
    return "\n".join(lines) + "\n"


def report_table(report, label="all"):
    return format_table("split", [(label, report.values())])


def style_table(style):
    rows = [(r.seed, r.values()) for r in style.reports]
    rows.append(("mean", [style.mean[m] for m in METRICS]))
    rows.append(("std", [style.std[m] for m in METRICS]))
    return format_table("seed", rows)


def sweep_table(rows):
    return format_table("kappa", [(r.kappa, r.report.values()) for r in rows])
