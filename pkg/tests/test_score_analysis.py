import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import silhouette_score

from tdbwe.score_analysis import (DcfParams, ScoreSet, Trial, dcf_at, eer, min_dcf, pair_condition,
                                  per_condition_report, read_histograms, read_scores, read_trials,
                                  score_histograms, trial_conditions, tsne, write_condition_report,
                                  write_histograms, write_scores, write_trials)


def make_set(scores, labels, conditions=None):
    conditions = conditions or [{}] * len(scores)
    trials = [Trial(f"e{i}", f"t{i}", bool(y), c) for i, (y, c) in enumerate(zip(labels, conditions))]
    return ScoreSet(trials, scores)


def brute_eer(scores, labels):
    """Walk every operating point with explicit loops and interpolate the crossing."""
    tar = [s for s, y in zip(scores, labels) if y]
    non = [s for s, y in zip(scores, labels) if not y]
    points = []
    for th in sorted(set(scores)) + [math.inf]:
        fr = sum(1 for s in tar if s < th) / len(tar)
        fa = sum(1 for s in non if s >= th) / len(non)
        points.append((fa, fr))
    for (fa0, fr0), (fa1, fr1) in zip(points, points[1:]):
        if fr0 - fa0 < 0 <= fr1 - fa1:
            t = (fa0 - fr0) / ((fr1 - fa1) - (fr0 - fa0))
            return 100 * (fa0 + t * (fa1 - fa0))
    raise AssertionError("no crossing")


def brute_min_dcf(scores, labels, p):
    tar = [s for s, y in zip(scores, labels) if y]
    non = [s for s, y in zip(scores, labels) if not y]
    best = math.inf
    # accepting at ">= each distinct score" plus "reject all" covers every decision rule
    for th in sorted(set(scores)) + [math.inf]:
        fr = sum(1 for s in tar if s < th) / len(tar)
        fa = sum(1 for s in non if s >= th) / len(non)
        best = min(best, (1 - p.p_tar) * p.c_fa * fa + p.p_tar * p.c_fr * fr)
    return best


def random_sets(n_sets=200, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_sets):
        n = int(rng.integers(2, 1001))
        labels = rng.random(n) < rng.uniform(0.05, 0.95)
        labels[0], labels[1] = True, False
        scores = rng.standard_normal(n) + 1.5 * labels
        if rng.random() < 0.3:
            scores = np.round(scores, 1)  # force ties
        yield scores, labels


def test_eer_examples():
    assert eer(make_set([1, 2, 3, 4], [0, 0, 1, 1]))[0] == 0.0
    assert eer(make_set([3, 4, 1, 2], [0, 0, 1, 1]))[0] == 100.0
    assert eer(make_set([1, 1, 1, 1], [0, 1, 0, 1]))[0] == 50.0
    with pytest.raises(ValueError):
        eer(make_set([1, 2], [1, 1]))


def test_eer_and_min_dcf_match_exhaustive_enumeration():
    p = DcfParams()
    for scores, labels in random_sets():
        s = make_set(scores, labels)
        assert eer(s)[0] == brute_eer(list(scores), list(labels))
        assert min_dcf(s, p)[0] == brute_min_dcf(list(scores), list(labels), p)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["exp", "affine", "cube"]))
def test_monotone_transform_invariance(seed, kind):
    rng = np.random.default_rng(seed)
    labels = np.arange(60) % 3 == 0
    scores = np.round(rng.standard_normal(60) + labels, 2)
    f = {"exp": np.exp, "affine": lambda v: 3 * v - 7, "cube": lambda v: v ** 3}[kind]
    a, b = make_set(scores, labels), make_set(f(scores), labels)
    assert eer(a)[0] == pytest.approx(eer(b)[0], abs=1e-12)
    assert min_dcf(a)[0] == pytest.approx(min_dcf(b)[0], abs=1e-12)


def test_min_dcf_examples():
    tied = make_set([0.5] * 10, [1, 0] * 5)
    assert min_dcf(tied)[0] == pytest.approx(0.05)
    assert min_dcf(make_set([1, 2, 3, 4], [0, 0, 1, 1]))[0] == 0.0
    with pytest.raises(ValueError):
        DcfParams(p_tar=0)


def test_min_dcf_not_above_eer_threshold_cost():
    for scores, labels in random_sets(30, seed=1):
        s = make_set(scores, labels)
        assert min_dcf(s)[0] <= dcf_at(s, eer(s)[1]) + 1e-12


def test_pair_condition_is_order_insensitive():
    assert pair_condition("AFV", "CTS") == pair_condition("CTS", "AFV") == "CTS-AFV"
    assert pair_condition("eng", "cmn") == "cmn-eng"
    tags = trial_conditions({"source": "AFV", "device": "a"}, {"source": "CTS", "device": "b"})
    assert tags == {"source": "CTS-AFV", "device": "a-b", "device_match": "different"}


def _conditioned_set(seed=2, n=400):
    rng = np.random.default_rng(seed)
    sources = rng.choice(["CTS", "AFV"], (n, 2))
    conds = [{"source": pair_condition(a, b), "gender": rng.choice(["f-f", "m-m"])} for a, b in sources]
    labels = rng.random(n) < 0.3
    return make_set(rng.standard_normal(n) + labels, labels, conds)


def test_per_condition_rows_match_subsets(tmp_path):
    s = _conditioned_set()
    rows = per_condition_report(s, ["source", "gender"])
    assert rows[-1].condition == "Overall" and rows[-1].eer == eer(s)[0]
    for key in ("source", "gender"):
        key_rows = [r for r in rows if r.key == key]
        assert sum(r.n_target + r.n_nontarget for r in key_rows) == len(s)
        for r in key_rows:
            sub = s.subset([t.conditions[key] == r.condition for t in s.trials])
            assert r.eer == eer(sub)[0] and r.min_dcf == min_dcf(sub)[0]
    assert [r.condition for r in rows if r.key == "source"] == ["CTS-CTS", "CTS-AFV", "AFV-AFV"]
    text = write_condition_report(tmp_path / "r.tsv", rows).read_text().splitlines()
    assert text[0].split("\t")[:4] == ["key", "condition", "eer", "min_dcf"] and len(text) == len(rows) + 1


def test_per_condition_rejects_bad_keys():
    s = _conditioned_set()
    with pytest.raises(ValueError):
        per_condition_report(s, ["colour"])
    with pytest.raises(ValueError):
        per_condition_report(s, ["language"])


def test_low_confidence_flag():
    s = make_set(np.arange(12.0), [1] * 3 + [0] * 9, [{"source": "CTS-CTS"}] * 12)
    row = per_condition_report(s, ["source"])[0]
    assert row.low_confidence and (row.n_target, row.n_nontarget) == (3, 9)


def test_histograms_variance_ratio_for_half_shrink(tmp_path):
    s = _conditioned_set(seed=3)
    y = s.labels
    shrunk = s.scores.copy()
    for mask in (y, ~y):
        m = shrunk[mask].mean()
        shrunk[mask] = m + 0.5 * (shrunk[mask] - m)
    rep = score_histograms(s, ScoreSet(s.trials, shrunk))
    assert rep.variance_ratio["target"] == pytest.approx(0.25, abs=1e-12)
    assert rep.variance_ratio["nontarget"] == pytest.approx(0.25, abs=1e-12)
    assert rep.means["after", "target"] == pytest.approx(rep.means["before", "target"])
    for key, counts in rep.counts.items():
        assert counts.sum() == (y.sum() if key[1] == "target" else (~y).sum())
    back = read_histograms(write_histograms(tmp_path / "h.tsv", rep))
    np.testing.assert_array_equal(back["after_target"], rep.counts["after", "target"])
    (tmp_path / "bad.tsv").write_text("bin_lo\tbin_hi\n0\n")
    with pytest.raises(ValueError):
        read_histograms(tmp_path / "bad.tsv")


def test_histograms_identity_and_errors():
    s = _conditioned_set(seed=4)
    rep = score_histograms(s, s, condition={"gender": "f-f"})
    assert rep.variance_ratio["all"] == 1.0
    assert rep.mean_gap["before", "target"] == rep.mean_gap["after", "target"]
    other = make_set([0.0, 1.0], [0, 1])
    other.trials = [Trial("x", "y", True), Trial("z", "w", False)]
    with pytest.raises(ValueError):
        score_histograms(s, other)
    with pytest.raises(ValueError):
        score_histograms(s, s, condition={"gender": "x-x"})


def _clusters(seed=0):
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((3, 20)) * 10
    labels = np.repeat(np.arange(3), 30)
    return centres[labels] + rng.standard_normal((90, 20)), labels


def test_tsne_separates_clusters_deterministically():
    x, labels = _clusters()
    a = tsne(x, perplexity=10, iterations=500, seed=4)
    b = tsne(x, perplexity=10, iterations=500, seed=4)
    np.testing.assert_array_equal(a.coords, b.coords)
    assert silhouette_score(a.coords, labels) > 0.5
    kl = [v for _, v in a.kl]
    assert kl[-1] < kl[len(kl) // 2 - 1] + 1e-9


def test_tsne_validation():
    x, _ = _clusters()
    with pytest.raises(ValueError):
        tsne(x, perplexity=40)
    with pytest.raises(ValueError):
        tsne(x[:5], perplexity=1)
    with pytest.warns(RuntimeWarning):
        tsne(np.ones((12, 3)), perplexity=3, iterations=50)


def test_trial_and_score_files(tmp_path):
    trials = [Trial("a", "b", True, {"source": "CTS-AFV"}), Trial("c", "d", False)]
    write_trials(tmp_path / "t.txt", trials)
    back = read_trials(tmp_path / "t.txt")
    assert back == trials and back[0].conditions == {"source": "CTS-AFV"} and back[1].conditions == {}
    scores = [0.1, -2.5e-17, 3.0]
    write_scores(tmp_path / "s.txt", scores)
    np.testing.assert_array_equal(read_scores(tmp_path / "s.txt"), scores)
    (tmp_path / "bad.txt").write_text("a b maybe\n")
    with pytest.raises(ValueError):
        read_trials(tmp_path / "bad.txt")
