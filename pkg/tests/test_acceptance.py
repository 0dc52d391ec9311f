"""Release-gate checks for the whole package.

Ordered roughly by cost: analytic gradients against finite differences,
agreement with loop-based reference implementations, structural
invariants, and finally the training-based outcomes on corpora with
planted redundancy (weight separation, direction/frame/scale ablations,
chance-level sanity). The training checks carry explicit wall-clock
budgets; everything is seeded, so reruns are deterministic.
"""
import json
import math
import time

import numpy as np
import pytest

from redcon import tensor as T
from redcon.datasynth import (
    CorpusConfig,
    generate_corpus,
    load_corpus,
    save_corpus,
    split_indices,
)
from redcon.encoders import EncoderConfig, bind, encode_text_batch, \
    encode_video_batch, init_params, load_checkpoint
from redcon.evaluate import (
    evaluate_zero_shot,
    redundancy_report,
    retrieval_metrics,
    retrieval_ranks,
    run_ablation,
)
from redcon.losses import contrastive_pair, weighted_t2v, weighted_v2t
from redcon.redundancy import redundancy_scores, redundancy_weights
from redcon.trainer import TrainConfig, run_training

from conftest import central_diff


def unit_rows(rng, shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# gradient correctness: every loss against central finite differences
# ---------------------------------------------------------------------------

class TestGradientCorrectness:
    """Analytic gradients of all five losses match central differences."""

    STEP = 1e-5
    POINTS = 20
    TOL = 1e-4

    @staticmethod
    def _norm_rel_err(analytic, numeric):
        diff = np.linalg.norm(analytic - numeric)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        return diff / scale

    def _check(self, make_loss, arrays):
        tape = T.Tape()
        leaves = [tape.leaf(a.copy()) for a in arrays]
        out = make_loss(*leaves)
        T.backward(out)
        analytic = [leaf.grad for leaf in leaves]

        def as_float(*xs):
            return make_loss(*[T.constant(x) for x in xs]).item()

        numeric = central_diff(as_float, list(arrays), step=self.STEP)
        worst = max(self._norm_rel_err(a, n)
                    for a, n in zip(analytic, numeric))
        assert worst < self.TOL, f"gradient relative error {worst:.3e}"

    def test_all_losses_match_finite_differences(self, rng):
        started = time.monotonic()
        for _ in range(self.POINTS):
            b = int(rng.integers(2, 5))
            n = int(rng.integers(2, 6))
            l = int(rng.integers(2, 6))
            d = int(rng.integers(3, 7))
            tau = float(rng.uniform(0.2, 0.8))
            vc = 0.7 * rng.normal(size=(b, d))
            tc = 0.7 * rng.normal(size=(b, d))
            vl = 0.7 * rng.normal(size=(b, n, d))
            tl = 0.7 * rng.normal(size=(b, l, d))
            pw = T.constant(rng.uniform(0.2, 1.0, size=(b, n)))
            tw = T.constant(rng.uniform(0.2, 1.0, size=(b, l)))

            self._check(lambda v, t: contrastive_pair(v, t, tau)[0], (vc, tc))
            self._check(lambda v, t: contrastive_pair(v, t, tau)[1], (vc, tc))
            self._check(lambda v, loc: weighted_v2t(v, loc, tw, tau), (vc, tl))
            self._check(lambda t, loc: weighted_t2v(t, loc, pw, tau), (tc, vl))
            self._check(
                lambda v, t, vloc, tloc: T.add(
                    weighted_v2t(v, tloc, tw, tau),
                    weighted_t2v(t, vloc, pw, tau)),
                (vc, tc, vl, tl))
        assert time.monotonic() - started < 60.0


# ---------------------------------------------------------------------------
# oracle equivalence: loop-based reference implementations
# ---------------------------------------------------------------------------

def oracle_dissimilarity(v, t):
    n, l = v.shape[0], t.shape[0]
    return [[1.0 - sum(float(v[i][k]) * float(t[j][k])
                       for k in range(v.shape[1]))
             for j in range(l)] for i in range(n)]


def oracle_min_scores(m):
    patch = [min(row) for row in m]
    token = [min(m[i][j] for i in range(len(m))) for j in range(len(m[0]))]
    return patch, token


def oracle_weights(scores, floor=1e-6):
    w = [min(max(1.0 - r, 0.0), 1.0) for r in scores]
    if all(x == 0.0 for x in w):
        w = [x + floor for x in w]
    return w


def oracle_global_infonce(vc, tc, tau):
    b = vc.shape[0]
    s = [[float(vc[i] @ tc[j]) / tau for j in range(b)] for i in range(b)]

    def one(rows):
        total = 0.0
        for i in range(b):
            den = sum(math.exp(x) for x in rows[i])
            total += -math.log(math.exp(rows[i][i]) / den)
        return total / b

    return one(s), one([[s[j][i] for j in range(b)] for i in range(b)])


def oracle_weighted_infonce(anchors, locals_, w, tau):
    b, l, _ = locals_.shape
    total = 0.0
    for i in range(b):
        num = sum(float(w[i][k]) * math.exp(float(anchors[i] @ locals_[i, k]) / tau)
                  for k in range(l))
        den = sum(math.exp(float(anchors[i] @ locals_[j, k]) / tau)
                  for j in range(b) for k in range(l))
        total += math.log(den) - math.log(num)
    return total / b


def oracle_ranks(scores, truth):
    ranks = []
    for q in range(scores.shape[0]):
        target = scores[q][truth[q]]
        ahead = sum(1 for x in scores[q] if x > target)
        ahead += sum(1 for x in scores[q][:truth[q]] if x == target)
        ranks.append(1 + ahead)
    return ranks


def oracle_metrics(ranks):
    q = len(ranks)
    ordered = sorted(ranks)
    mid = q // 2
    mdr = float(ordered[mid]) if q % 2 else (ordered[mid - 1] + ordered[mid]) / 2.0
    return {
        "r1": 100.0 * sum(r <= 1 for r in ranks) / q,
        "r5": 100.0 * sum(r <= 5 for r in ranks) / q,
        "r10": 100.0 * sum(r <= 10 for r in ranks) / q,
        "mdr": mdr,
    }


class TestOracleEquivalence:
    """Scores, weights, losses, and retrieval match brute-force loops."""

    INSTANCES = 220
    TOL = 1e-10

    def test_small_instances_agree_with_bruteforce(self, rng):
        started = time.monotonic()
        for _ in range(self.INSTANCES):
            d = int(rng.integers(2, 7))
            n = int(rng.integers(1, 9))
            l = int(rng.integers(1, 9))
            b = int(rng.integers(1, 5))
            tau = float(rng.uniform(0.2, 1.0))

            # per-pair redundancy scores and weights
            v = unit_rows(rng, (n, d))
            t = unit_rows(rng, (l, d))
            got = redundancy_scores(T.constant(v), T.constant(t))
            want_patch, want_token = oracle_min_scores(oracle_dissimilarity(v, t))
            assert np.max(np.abs(got.patch.data - want_patch)) < self.TOL
            assert np.max(np.abs(got.token.data - want_token)) < self.TOL
            got_w = redundancy_weights(got.patch).data
            assert np.max(np.abs(got_w - oracle_weights(got.patch.data.tolist()))) < self.TOL

            # batch losses
            vc = unit_rows(rng, (b, d))
            tc = unit_rows(rng, (b, d))
            vl = unit_rows(rng, (b, n, d))
            tl = unit_rows(rng, (b, l, d))
            pw = rng.uniform(0.05, 1.0, size=(b, n))
            tw = rng.uniform(0.05, 1.0, size=(b, l))
            g_v2t, g_t2v = contrastive_pair(T.constant(vc), T.constant(tc), tau)
            o_v2t, o_t2v = oracle_global_infonce(vc, tc, tau)
            assert abs(g_v2t.item() - o_v2t) < self.TOL
            assert abs(g_t2v.item() - o_t2v) < self.TOL
            w1 = weighted_v2t(T.constant(vc), T.constant(tl), T.constant(tw), tau)
            w2 = weighted_t2v(T.constant(tc), T.constant(vl), T.constant(pw), tau)
            assert abs(w1.item() - oracle_weighted_infonce(vc, tl, tw, tau)) < self.TOL
            assert abs(w2.item() - oracle_weighted_infonce(tc, vl, pw, tau)) < self.TOL

            # retrieval ranks and metrics: square identity plus rectangular
            square = vc @ tc.T
            got_ranks = retrieval_ranks(square)
            want_ranks = oracle_ranks(square, list(range(b)))
            assert got_ranks.tolist() == want_ranks
            got_m = retrieval_metrics(square)
            want_m = oracle_metrics(want_ranks)
            for key in ("r1", "r5", "r10", "mdr"):
                assert abs(getattr(got_m, key) - want_m[key]) < 1e-12

            g = b + int(rng.integers(1, 5))
            rect = rng.normal(size=(b, g))
            truth = rng.integers(0, g, size=b)
            assert (retrieval_ranks(rect, truth).tolist()
                    == oracle_ranks(rect, truth.tolist()))
        assert time.monotonic() - started < 60.0


# ---------------------------------------------------------------------------
# structural invariants
# ---------------------------------------------------------------------------

class TestInvariants:
    def test_encoders_emit_unit_norm_features(self, rng):
        cfg = EncoderConfig(hidden=8, proj_dim=4, layers=1, heads=2,
                            vocab_size=12, frames=2, patches=3, patch_dim=5,
                            tokens=4, seed=3)
        bound = bind(init_params(cfg), None)
        frames = rng.normal(size=(2, 2, 3, 5))
        ids = rng.integers(0, 12, size=(2, 4))
        for feats in (encode_video_batch(frames, bound, cfg),
                      encode_text_batch(ids, bound, cfg)):
            for tensor in feats:
                norms = np.linalg.norm(tensor.data, axis=-1)
                assert np.max(np.abs(norms - 1.0)) < 1e-9

    def test_dissimilarity_scores_are_transpose_dual(self, rng):
        for _ in range(20):
            v = unit_rows(rng, (int(rng.integers(1, 7)), 5))
            t = unit_rows(rng, (int(rng.integers(1, 7)), 5))
            ab = redundancy_scores(T.constant(v), T.constant(t))
            ba = redundancy_scores(T.constant(t), T.constant(v))
            assert np.max(np.abs(ab.dissimilarity.data
                                 - ba.dissimilarity.data.T)) < 1e-12
            assert np.max(np.abs(ab.patch.data - ba.token.data)) < 1e-12
            assert np.max(np.abs(ab.token.data - ba.patch.data)) < 1e-12

    def test_adding_tokens_never_raises_patch_scores(self, rng):
        for _ in range(20):
            v = unit_rows(rng, (5, 6))
            t = unit_rows(rng, (3, 6))
            extra = np.concatenate([t, unit_rows(rng, (2, 6))])
            base = redundancy_scores(T.constant(v), T.constant(t)).patch.data
            wider = redundancy_scores(T.constant(v), T.constant(extra)).patch.data
            assert np.all(wider <= base + 1e-12)

    def test_weights_respect_clamp_bounds(self, rng):
        for _ in range(50):
            scores = T.constant(rng.uniform(0.0, 2.0, size=7))
            w = redundancy_weights(scores).data
            assert np.all(w >= 0.0) and np.all(w <= 1.0)
        all_far = redundancy_weights(T.constant(np.full(4, 1.8)))
        assert np.all(all_far.data == 1e-6)  # floor keeps log() usable

    def test_recall_at_k_is_monotone(self, rng):
        for _ in range(50):
            q = int(rng.integers(1, 30))
            m = retrieval_metrics(rng.normal(size=(q, q)))
            assert 0.0 <= m.r1 <= m.r5 <= m.r10 <= 100.0
            assert m.mdr >= 1.0

    def test_corpus_round_trip_is_bit_exact(self, tmp_path):
        cfg = CorpusConfig(pairs=12, frames=2, patches=6, patch_dim=5,
                           tokens=4, concepts=8, token_slots=2, concept_dim=3,
                           distractors=2, noise_sigma=0.4, seed=11)
        corpus = generate_corpus(cfg)
        save_corpus(tmp_path / "c.bin", corpus)
        back = load_corpus(tmp_path / "c.bin")
        assert back.config == cfg
        for a, b in zip(corpus.records, back.records):
            assert a.main_concept == b.main_concept
            assert np.array_equal(a.frames, b.frames)
            assert np.array_equal(a.token_ids, b.token_ids)
            assert np.array_equal(a.patch_aligned, b.patch_aligned)
            assert np.array_equal(a.token_aligned, b.token_aligned)

    def test_same_seed_training_is_bit_identical(self, tmp_path):
        cfg = CorpusConfig(pairs=100, frames=2, patches=4, patch_dim=6,
                           tokens=4, concepts=8, token_slots=2, concept_dim=3,
                           distractors=2, noise_sigma=0.4, seed=5)
        records = generate_corpus(cfg).records
        enc = EncoderConfig(hidden=8, proj_dim=4, layers=1, heads=2,
                            vocab_size=cfg.vocab_size, frames=2, patches=4,
                            patch_dim=6, tokens=4, seed=5)
        tcfg = TrainConfig(batch_size=2, epochs=1, warmup_steps=10,
                           temperature=0.2, seed=5)  # 50 batches of 2

        results = []
        for name in ("a", "b"):
            res = run_training(records, enc, tcfg, tmp_path / name)
            assert res.steps == 50
            results.append(res)
        first = (tmp_path / "a" / "checkpoint_final.ckpt").read_bytes()
        second = (tmp_path / "b" / "checkpoint_final.ckpt").read_bytes()
        assert first == second

        def trajectory(path):
            rows = []
            for line in (path / "train_log.jsonl").read_text().splitlines():
                row = json.loads(line)
                row.pop("elapsed_s")  # wall time may differ between reruns
                rows.append(row)
            return rows

        assert trajectory(tmp_path / "a") == trajectory(tmp_path / "b")


# ---------------------------------------------------------------------------
# chance-level sanity
# ---------------------------------------------------------------------------

class TestUntrainedBaseline:
    def test_untrained_model_scores_near_chance(self):
        corpus_cfg = CorpusConfig(pairs=100)
        records = generate_corpus(corpus_cfg).records
        enc = EncoderConfig()
        report = evaluate_zero_shot(init_params(enc), enc, records)
        assert report.pairs == 100
        for metrics in (report.v2t, report.t2v):
            assert 0.0 <= metrics.r1 <= 10.0


# ---------------------------------------------------------------------------
# trained outcomes on planted corpora
# ---------------------------------------------------------------------------

class TestPlantedSeparation:
    """Default training pushes weights apart on held-out pairs."""

    def test_trained_weights_separate_planted_positions(self, tmp_path):
        started = time.monotonic()
        corpus = generate_corpus(CorpusConfig())
        splits = split_indices(len(corpus))
        train = [corpus.records[i] for i in splits["train"]]
        test = [corpus.records[i] for i in splits["test"]]
        enc = EncoderConfig()
        result = run_training(train, enc, TrainConfig(log_every=10 ** 6),
                              tmp_path / "run")
        report = redundancy_report(result.params, enc, test)

        token_gap = (report.token_weights[report.token_aligned].mean()
                     - report.token_weights[~report.token_aligned].mean())
        patch_gap = (report.patch_weights[report.patch_aligned].mean()
                     - report.patch_weights[~report.patch_aligned].mean())
        assert token_gap >= 0.1, f"token weight gap {token_gap:.4f}"
        assert patch_gap >= 0.1, f"patch weight gap {patch_gap:.4f}"
        assert time.monotonic() - started < 600.0


# shared recipe for the direction and frame-count orderings: small corpus,
# one-block towers, enough optimization for retrieval to rise above chance
SWEEP_SEEDS = (0, 1, 2)
SWEEP_EPOCHS = 20


def _sweep_setup(seed):
    cfg = CorpusConfig(pairs=800, frames=4, patches=8, patch_dim=12,
                       tokens=6, concepts=40, token_slots=3, concept_dim=10,
                       distractors=2, noise_sigma=0.4, seed=seed)
    corpus = generate_corpus(cfg)
    splits = split_indices(len(corpus))
    train = [corpus.records[i] for i in splits["train"]]
    held = [corpus.records[i] for i in splits["val"] + splits["test"]]
    enc = EncoderConfig(hidden=16, proj_dim=16, layers=1, heads=2,
                        vocab_size=cfg.vocab_size, frames=4, patches=8,
                        patch_dim=12, tokens=6, seed=seed)
    return train, held, enc


def _sweep_train(train, held, enc, seed, direction="both", frames_used=None,
                 out_dir="/tmp"):
    tcfg = TrainConfig(batch_size=16, epochs=SWEEP_EPOCHS, peak_lr=3e-4,
                       warmup_steps=40, temperature=0.1, direction=direction,
                       frames_used=frames_used, seed=seed, log_every=10 ** 6)
    result = run_training(train, enc, tcfg, out_dir)
    report = evaluate_zero_shot(result.params, enc, held,
                                frames_used=frames_used)
    return report.t2v.r1


@pytest.fixture(scope="module")
def direction_sweep(tmp_path_factory):
    """Seed-averaged held-out t2v R1 for every weighting direction and for
    single-frame training; computed once and shared by the ordering tests."""
    base = tmp_path_factory.mktemp("sweep")
    table = {key: [] for key in ("off", "v2t", "t2v", "both", "one_frame")}
    for seed in SWEEP_SEEDS:
        train, held, enc = _sweep_setup(seed)
        for direction in ("off", "v2t", "t2v", "both"):
            r1 = _sweep_train(train, held, enc, seed, direction=direction,
                              out_dir=base / f"s{seed}_{direction}")
            table[direction].append(r1)
        table["one_frame"].append(
            _sweep_train(train, held, enc, seed, frames_used=1,
                         out_dir=base / f"s{seed}_one_frame"))
    return {key: float(np.mean(vals)) for key, vals in table.items()}


class TestDirectionOrdering:
    def test_weighted_training_beats_unweighted(self, direction_sweep):
        assert direction_sweep["both"] >= direction_sweep["off"], direction_sweep

    def test_single_directions_sit_between_extremes(self, direction_sweep):
        lo = min(direction_sweep["off"], direction_sweep["both"]) - 2.0
        hi = max(direction_sweep["off"], direction_sweep["both"]) + 2.0
        assert lo <= direction_sweep["v2t"] <= hi, direction_sweep
        assert lo <= direction_sweep["t2v"] <= hi, direction_sweep


class TestFrameCountOrdering:
    def test_four_frames_beat_one(self, direction_sweep):
        assert direction_sweep["both"] >= direction_sweep["one_frame"], \
            direction_sweep


# ---------------------------------------------------------------------------
# weighted-loss scale grid and exact off-equivalence at zero
# ---------------------------------------------------------------------------

def _tiny_setup(seed=9):
    cfg = CorpusConfig(pairs=60, frames=2, patches=6, patch_dim=8, tokens=4,
                       concepts=8, token_slots=2, concept_dim=4,
                       distractors=2, noise_sigma=0.4, seed=seed)
    corpus = generate_corpus(cfg)
    splits = split_indices(len(corpus))
    train = [corpus.records[i] for i in splits["train"]]
    test = [corpus.records[i] for i in splits["test"]]
    enc = EncoderConfig(hidden=8, proj_dim=4, layers=1, heads=2,
                        vocab_size=cfg.vocab_size, frames=2, patches=6,
                        patch_dim=8, tokens=4, seed=seed)
    return train, test, enc


class TestScaleGrid:
    def test_grid_emits_required_rows(self, tmp_path):
        train, test, enc = _tiny_setup()
        tcfg = TrainConfig(batch_size=8, epochs=2, warmup_steps=5,
                           temperature=0.2, seed=9, log_every=10 ** 6)
        rows = run_ablation(train, test, enc, tcfg, tmp_path, axis="lam")
        emitted = {float(row["value"]) for row in rows}
        assert {0.5, 1.0, 2.0, 4.0} <= emitted
        table = (tmp_path / "ablation_lam.tsv").read_text().splitlines()
        assert len(table) == len(rows) + 1  # header plus one line per value

    def test_zero_scale_trains_identically_to_off(self, tmp_path):
        train, _, enc = _tiny_setup()
        runs = {}
        for name, overrides in (("zero", {"lam": 0.0, "direction": "both"}),
                                ("off", {"lam": 1.0, "direction": "off"})):
            tcfg = TrainConfig(batch_size=8, epochs=3, warmup_steps=5,
                               temperature=0.2, seed=9, **overrides)
            runs[name] = run_training(train, enc, tcfg, tmp_path / name)

        zero, off = runs["zero"].params, runs["off"].params
        assert sorted(zero) == sorted(off)
        for key in zero:
            assert np.array_equal(zero[key], off[key]), key

        def losses(path):
            rows = []
            for line in (path / "train_log.jsonl").read_text().splitlines():
                row = json.loads(line)
                rows.append((row["step"], row["total"], row["global_sum"],
                             row["weighted_sum"]))
            return rows

        assert losses(tmp_path / "zero") == losses(tmp_path / "off")
