"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Lines are printed as each check runs (visible with ``-s``), collected into a
summary section at the end of every pytest run, and printed directly when
this file is executed as a script.
"""

import math
import time

import numpy as np
import pytest

import oracles
from waver.distill import KnowledgeCorpus, cross_attend
from waver.evaluation import (
    STYLE_SEEDS,
    compute_metrics,
    is_prefix_chain,
    kappa_sweep,
    rank_targets,
    style_csv,
    style_eval,
)
from waver.ingest import Dataset, dump_tensors, load_tensors
from waver.numerics import Tensor, backward
from waver.train import (
    ProjectionHead,
    TrainResult,
    infonce_t2v,
    infonce_total,
    infonce_v2t,
    load_checkpoint,
    project_and_pool,
    save_checkpoint,
)
from waver.vcd import ActivityPhrase, ContentDictionary, VocabEntry, top_k_vocab

RESULTS = {}

TITLES = {
    "1": "gradient integrity",
    "2a": "loss oracles (independent 64-bit derivation)",
    "2b": "loss oracles (constants quoted in the contract)",
    "3": "cross-attention invariants",
    "4": "top-k and ranking oracles",
    "5": "metric definitions",
    "6": "end-to-end smoke",
    "7": "style-robustness protocol",
    "8": "kappa-sweep protocol",
    "9": "format round-trips",
}


def criterion_sort_key(key):
    return (int(key.rstrip("ab")), key)


def format_line(key):
    ok, detail = RESULTS[key]
    return f"criterion {key:<3} {'PASS' if ok else 'FAIL'}  {TITLES[key]}: {detail}"


def record(key, ok, detail):
    RESULTS[key] = (bool(ok), detail)
    print(format_line(key))
    return bool(ok)


# -- 1 --------------------------------------------------------------------------


def _fd_instance(seed):
    rng = np.random.default_rng(seed)
    B, N, D, L = 3, 2, 4, 3
    corpus = KnowledgeCorpus(rng.normal(size=(L, D)), ["a", "b", "c"], z=2.0)
    frames = [Tensor(rng.normal(size=(N, D)), True, f"frames{i}") for i in range(B)]
    texts = rng.normal(size=(B, D))
    vh = ProjectionHead(D, rng=np.random.default_rng(seed + 1), prefix="video")
    th = ProjectionHead(D, rng=np.random.default_rng(seed + 2), prefix="text")
    for head in (vh, th):
        # generic point: random biases instead of the positive init
        for b in head.params[1::2]:
            b.data = rng.normal(0.0, 0.5, size=b.shape)
    tau = Tensor(0.3, True, "tau")
    corpus_t = Tensor(corpus.vectors, True, "corpus")

    def loss_fn():
        videos = [project_and_pool(cross_attend(f, corpus), vh) for f in frames]
        v = videos[0]
        for row in videos[1:]:
            v = _rows(v, row)
        sim = th(texts) @ v.T
        return infonce_total(sim, tau)

    params = vh.params + th.params + [tau] + frames
    return loss_fn, params, corpus_t


def _rows(a, b):
    from waver.numerics import concat_rows

    return concat_rows([a, b])


def check_gradients(seed=7, h=1e-6):
    start = time.perf_counter()
    loss_fn, params, corpus_t = _fd_instance(seed)
    loss = loss_fn()
    grads = backward(loss, params + [corpus_t])
    analytic, corpus_grad = grads[:-1], grads[-1]
    worst = 0.0
    for p, g in zip(params, analytic):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + h
            up = loss_fn().item()
            flat[k] = keep - h
            down = loss_fn().item()
            flat[k] = keep
            numeric.reshape(-1)[k] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(g), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, np.linalg.norm(g - numeric) / scale)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and not np.any(corpus_grad) and elapsed < 5
    return ok, f"max rel err {worst:.2e}, corpus grad zero={not np.any(corpus_grad)}, {elapsed:.2f}s"


def test_criterion_1_gradient_integrity():
    ok, detail = check_gradients()
    assert record("1", ok, detail), detail


# -- 2 --------------------------------------------------------------------------


def check_loss_oracles():
    sim = np.array(oracles.SIM_2X2)
    t2v, v2t, total = infonce_t2v(sim, 1.0), infonce_v2t(sim, 1.0), infonce_total(sim, 1.0)
    errs = (abs(t2v - oracles.T2V_2X2), abs(v2t - oracles.V2T_2X2), abs(total - oracles.TOTAL_2X2))
    exact_mean = total == (t2v + v2t) / 2
    ok = max(errs) < 1e-9 and exact_mean
    return ok, f"t2v={t2v:.10f} v2t={v2t:.10f} total={total:.10f} max err {max(errs):.1e}"


def check_quoted_constants():
    sim = np.array(oracles.SIM_2X2)
    t2v, v2t, total = infonce_t2v(sim, 1.0), infonce_v2t(sim, 1.0), infonce_total(sim, 1.0)
    errs = (abs(t2v - oracles.T2V_2X2_QUOTED), abs(v2t - oracles.V2T_2X2_QUOTED),
            abs(total - oracles.TOTAL_2X2_QUOTED))
    ok = max(errs) < 1e-9
    return ok, (f"quoted {oracles.T2V_2X2_QUOTED}/{oracles.V2T_2X2_QUOTED}/{oracles.TOTAL_2X2_QUOTED}, "
                f"computed {t2v:.10f}/{v2t:.10f}/{total:.10f}")


def test_criterion_2a_loss_oracles():
    ok, detail = check_loss_oracles()
    assert record("2a", ok, detail), detail


@pytest.mark.xfail(strict=True, reason="quoted constants contradict the loss definition; see decisions ledger")
def test_criterion_2b_quoted_constants():
    ok, detail = check_quoted_constants()
    assert record("2b", ok, detail), detail


# -- 3 --------------------------------------------------------------------------


def check_attention(trials=100, seed=3):
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_sum, worst_uniform, hull_ok, collapse_ok = 0.0, 0.0, True, True
    for _ in range(trials):
        n, d, L = rng.integers(1, 8), rng.integers(1, 10), rng.integers(1, 12)
        frames = rng.normal(size=(n, d)) * rng.uniform(0.1, 5)
        corpus = KnowledgeCorpus(rng.normal(size=(L, d)), [str(i) for i in range(L)], z=rng.uniform(0.5, 100))
        out, w = cross_attend(frames, corpus, return_weights=True)
        worst_sum = max(worst_sum, np.abs(w.sum(axis=1) - 1).max())
        # support-function test: no direction sees the output beyond every corpus row
        dirs = rng.normal(size=(16, d))
        beyond = (out @ dirs.T) - (corpus.vectors @ dirs.T).max(axis=0)
        hull_ok &= bool((beyond <= 1e-9).all() and (w >= 0).all())
        single = KnowledgeCorpus(corpus.vectors[:1], ["x"], z=corpus.z)
        collapse_ok &= bool((cross_attend(frames, single) == corpus.vectors[:1]).all())
        wide = KnowledgeCorpus(corpus.vectors, corpus.video_ids, z=1e16)
        _, wu = cross_attend(frames, wide, return_weights=True)
        worst_uniform = max(worst_uniform, np.abs(wu - 1.0 / L).max())
    elapsed = time.perf_counter() - start
    ok = worst_sum <= 1e-9 and hull_ok and collapse_ok and worst_uniform <= 1e-6 and elapsed < 10
    return ok, (f"row-sum err {worst_sum:.1e}, hull {hull_ok}, L=1 exact {collapse_ok}, "
                f"uniform err {worst_uniform:.1e}, {elapsed:.2f}s")


def test_criterion_3_attention_invariants():
    ok, detail = check_attention()
    assert record("3", ok, detail), detail


# -- 4 --------------------------------------------------------------------------


def brute_top_k(e, vocab, kappa):
    def cos(a, b):
        return math.fsum(a * b) / math.sqrt(math.fsum(a * a) * math.fsum(b * b))

    scored = [(-cos(e, v.embedding), v.phrase.text, i) for i, v in enumerate(vocab)]
    return [vocab[i].phrase.text for _, _, i in sorted(scored)[:kappa]]


def brute_rank(row, target):
    order = sorted(range(len(row)), key=lambda g: (-row[g], g))
    return order.index(target) + 1


def check_oracles(trials=1000, seed=4):
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    topk_bad = rank_bad = 0
    for _ in range(trials):
        d, u = rng.integers(2, 6), rng.integers(1, 15)
        base = rng.normal(size=(u, d))
        # duplicate some embeddings so exact score ties occur
        dup = rng.integers(0, u, size=u)
        emb = np.where((rng.random(u) < 0.3)[:, None], base[dup], base)
        words = ["run", "jump", "cook", "play", "ride", "swim"]
        vocab = [VocabEntry(ActivityPhrase(f"{words[rng.integers(6)]} {i % 4}"), emb[i]) for i in range(u)]
        e = rng.normal(size=d)
        kappa = int(rng.integers(1, u + 3))
        topk_bad += top_k_vocab(e, vocab, kappa) != brute_top_k(e, vocab, kappa)

        sim = rng.integers(-3, 4, size=(20, 20)).astype(float) / 2
        truth = rng.integers(0, 20, size=20)
        ranks = rank_targets(sim, truth)
        rank_bad += any(ranks[q] != brute_rank(list(sim[q]), truth[q]) for q in range(20))
    elapsed = time.perf_counter() - start
    ok = topk_bad == 0 and rank_bad == 0 and elapsed < 10
    return ok, f"{trials} trials each: top-k mismatches {topk_bad}, rank mismatches {rank_bad}, {elapsed:.2f}s"


def test_criterion_4_topk_and_rank_oracles():
    ok, detail = check_oracles()
    assert record("4", ok, detail), detail


# -- 5 --------------------------------------------------------------------------


def check_metrics(trials=1000, seed=5):
    rep = compute_metrics([1, 3, 10])
    want = oracles.METRICS_1_3_10
    ok = (abs(rep.r1 - 33.33) <= 0.01 and abs(rep.r5 - 66.67) <= 0.01 and rep.r10 == 100
          and rep.mdr == 3 and abs(rep.mnr - 4.6667) <= 1e-3
          and all(abs(getattr(rep, k) - v) < 1e-12 for k, v in want.items()))
    rng = np.random.default_rng(seed)
    monotone = True
    for _ in range(trials):
        r = compute_metrics(rng.integers(1, 30, size=rng.integers(1, 50)))
        monotone &= r.r1 <= r.r5 <= r.r10
    return ok and monotone, (f"r1={rep.r1:.2f} r5={rep.r5:.2f} r10={rep.r10:g} mdr={rep.mdr:g} "
                             f"mnr={rep.mnr:.4f}; monotone over {trials}: {monotone}")


def test_criterion_5_metric_definitions():
    ok, detail = check_metrics()
    assert record("5", ok, detail), detail


# -- 6 --------------------------------------------------------------------------


def check_smoke(run):
    tr, te = run.train_report.r1, run.test_report.r1
    shape_ok = len(run.train.videos) == 64 and len(run.test.videos) == 16
    ok = tr >= 90 and te >= 75 and run.seconds < 120 and shape_ok
    return ok, f"train R@1 {tr:.2f} (>= 90), test R@1 {te:.2f} (>= 75), {run.seconds:.1f}s"


def test_criterion_6_end_to_end_smoke(smoke):
    ok, detail = check_smoke(smoke)
    assert record("6", ok, detail), detail


# -- 7 --------------------------------------------------------------------------


def _single_caption(dataset):
    caps = [dataset.captions_of(v)[0] for v in dataset.video_ids]
    return Dataset(dataset.videos, caps, split=dataset.split, name=dataset.name)


def check_style(run):
    first = style_eval(run.model, run.test, STYLE_SEEDS)
    second = style_eval(run.model, run.test, STYLE_SEEDS)
    csv_a, csv_b = style_csv(first), style_csv(second)
    rows = csv_a.strip().split("\n")[1:]
    shape_ok = [r.split(",")[0] for r in rows] == [*map(str, STYLE_SEEDS), "mean", "std"]
    single = style_eval(run.model, _single_caption(run.test), STYLE_SEEDS)
    zero = all(v == 0.0 for v in single.std.values())
    ok = len(first.reports) == 4 and shape_ok and csv_a == csv_b and zero
    return ok, f"4 reports + mean/std rows {shape_ok}, byte-identical {csv_a == csv_b}, single-caption std 0 {zero}"


def test_criterion_7_style_protocol(smoke):
    ok, detail = check_style(smoke)
    assert record("7", ok, detail), detail


# -- 8 --------------------------------------------------------------------------


def check_sweep(run):
    from waver.experiments import smoke_config

    rows = kappa_sweep(run.train, run.test, run.backend, [1, 3, 5, 7, 9], smoke_config(16))
    keyed = [r.kappa for r in rows] == [1, 3, 5, 7, 9]
    prefix = is_prefix_chain([r.dictionary for r in rows])
    r1 = " ".join(f"k{r.kappa}:{r.report.r1:.1f}" for r in rows)
    return keyed and prefix, f"rows {len(rows)} keyed {keyed}, prefix property {prefix}; R@1 {r1}"


def test_criterion_8_kappa_sweep(smoke):
    ok, detail = check_sweep(smoke)
    assert record("8", ok, detail), detail


# -- 9 --------------------------------------------------------------------------


def _random_blobs(rng):
    blobs = {}
    for i in range(rng.integers(0, 4)):
        shape = tuple(rng.integers(0, 5, size=rng.integers(0, 4)))
        blobs[f"t{i}/ü{rng.integers(100)}"] = rng.normal(size=shape).astype(np.float32)
    return blobs


def check_round_trips(tmp, trials=1000, seed=9):
    rng = np.random.default_rng(seed)
    bad = {"tensor": 0, "dictionary": 0, "corpus": 0, "checkpoint": 0}
    for t in range(trials):
        blobs = _random_blobs(rng)
        raw = dump_tensors(blobs)
        back = load_tensors(raw)
        same = list(back) == list(blobs) and all(
            back[k].shape == v.shape and back[k].tobytes() == v.tobytes() for k, v in blobs.items())
        bad["tensor"] += not (same and dump_tensors(back) == raw)

        n, kappa = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        entries = {f"vid{t}_{i}": [f"doing thing {rng.integers(50)}" for _ in range(rng.integers(0, kappa + 1))]
                   for i in range(n)}
        dic = ContentDictionary(entries, kappa, int(rng.integers(1, 99)), int(rng.integers(1, 64)), "synthetic")
        path = tmp / "d.vcd"
        dic.save(path)
        first = path.read_bytes()
        again = ContentDictionary.load(path)
        again.save(path)
        bad["dictionary"] += not (again == dic and path.read_bytes() == first)

        L, D = int(rng.integers(1, 6)), int(rng.integers(1, 8))
        corpus = KnowledgeCorpus(rng.normal(size=(L, D)).astype(np.float32), [f"v{i}" for i in range(L)],
                                 z=float(rng.uniform(1, 100)))
        path = tmp / "c.corpus"
        corpus.save(path)
        first = path.read_bytes()
        loaded = KnowledgeCorpus.load(path)
        loaded.save(path)
        bad["corpus"] += not (path.read_bytes() == first and (loaded.vectors == corpus.vectors).all()
                              and loaded.video_ids == corpus.video_ids and loaded.z == corpus.z)

        dim = int(rng.integers(2, 9))
        heads = [ProjectionHead(dim, rng=rng, prefix=p) for p in ("video", "text")]
        for h in heads:
            for p in h.params:
                p.data = p.data.astype(np.float32).astype(np.float64)
        result = TrainResult(heads[0], heads[1], float(rng.uniform(0.005, 0.5)))
        path = tmp / "m.ckpt"
        save_checkpoint(path, result)
        first = path.read_bytes()
        loaded, _ = load_checkpoint(path)
        save_checkpoint(path, loaded)
        same = loaded.tau == result.tau and all(
            (a.data == b.data).all() for a, b in zip(loaded.video_head.params + loaded.text_head.params,
                                                      result.video_head.params + result.text_head.params))
        bad["checkpoint"] += not (same and path.read_bytes() == first)
    ok = not any(bad.values())
    return ok, f"{trials} instances per format, failures {bad}"


def test_criterion_9_round_trips(tmp_path):
    ok, detail = check_round_trips(tmp_path)
    assert record("9", ok, detail), detail


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    from waver.experiments import run_smoke

    run = run_smoke(16)
    checks = [("1", check_gradients), ("2a", check_loss_oracles), ("2b", check_quoted_constants),
              ("3", check_attention), ("4", check_oracles), ("5", check_metrics),
              ("6", lambda: check_smoke(run)), ("7", lambda: check_style(run)),
              ("8", lambda: check_sweep(run))]
    for key, fn in checks:
        record(key, *fn())
    with tempfile.TemporaryDirectory() as tmp:
        record("9", *check_round_trips(Path(tmp)))
