"""Verification-trial analytics: EER, minimum DCF, per-condition tables,
score histograms and exact t-SNE.

A trial is accepted when its score is greater than or equal to the
decision threshold.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CONDITION_KEYS = ("source", "language", "gender", "device")
# canonical order inside pair conditions; unknown values sort alphabetically after these
PAIR_ORDER = ("CTS", "AFV")
MIN_CLASS_TRIALS = 10


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    is_target: bool
    conditions: dict = field(default_factory=dict, hash=False, compare=False)

    @property
    def key(self):
        return (self.enroll_id, self.test_id)


@dataclass
class ScoreSet:
    trials: list[Trial]
    scores: np.ndarray

    def __post_init__(self):
        self.trials = list(self.trials)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.trials) != len(self.scores):
            raise ValueError(f"{len(self.trials)} trials but {len(self.scores)} scores")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.is_target for t in self.trials], dtype=bool)

    def subset(self, mask) -> "ScoreSet":
        mask = np.asarray(mask, dtype=bool)
        return ScoreSet([t for t, m in zip(self.trials, mask) if m], self.scores[mask])

    def __len__(self):
        return len(self.trials)


@dataclass(frozen=True)
class DcfParams:
    p_tar: float = 0.05
    c_fa: float = 1.0
    c_fr: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_tar < 1:
            raise ValueError("p_tar must lie in (0, 1)")
        if not (self.c_fa > 0 and self.c_fr > 0):
            raise ValueError("costs must be positive")


def _split(s: ScoreSet):
    y = s.labels
    tar, non = s.scores[y], s.scores[~y]
    if len(tar) == 0 or len(non) == 0:
        raise ValueError("need at least one target and one non-target trial")
    return tar, non


def error_rates(tar: np.ndarray, non: np.ndarray, thresholds: np.ndarray):
    """(P_FA, P_FR) at each threshold under accept-if-score >= threshold."""
    tar, non = np.sort(tar), np.sort(non)
    p_fr = np.searchsorted(tar, thresholds, side="left") / len(tar)
    p_fa = (len(non) - np.searchsorted(non, thresholds, side="left")) / len(non)
    return p_fa, p_fr


def eer(s: ScoreSet) -> tuple[float, float]:
    """Equal error rate in percent and the threshold where it occurs.

    Operating points sit at every distinct score plus +inf. The crossing of
    P_FA and P_FR is linearly interpolated between the two bracketing points.
    """
    tar, non = _split(s)
    thresholds = np.append(np.unique(s.scores), np.inf)
    p_fa, p_fr = error_rates(tar, non, thresholds)
    diff = p_fr - p_fa
    k = int(np.argmax(diff >= 0))  # diff[0] == -1 and diff[-1] == 1
    t = -diff[k - 1] / (diff[k] - diff[k - 1])
    rate = p_fa[k - 1] + t * (p_fa[k] - p_fa[k - 1])
    if np.isinf(thresholds[k]):
        theta = thresholds[k - 1]
    else:
        theta = thresholds[k - 1] + t * (thresholds[k] - thresholds[k - 1])
    return float(100 * rate), float(theta)


def min_dcf(s: ScoreSet, p: DcfParams | None = None) -> tuple[float, float]:
    """Minimum (unnormalised) detection cost and its threshold.

    Candidate thresholds are -inf, the midpoints between consecutive distinct
    scores, and +inf.
    """
    p = p or DcfParams()
    tar, non = _split(s)
    u = np.unique(s.scores)
    thresholds = np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2, [np.inf]])
    p_fa, p_fr = error_rates(tar, non, thresholds)
    cost = (1 - p.p_tar) * p.c_fa * p_fa + p.p_tar * p.c_fr * p_fr
    k = int(np.argmin(cost))
    return float(cost[k]), float(thresholds[k])


def dcf_at(s: ScoreSet, threshold: float, p: DcfParams | None = None) -> float:
    p = p or DcfParams()
    tar, non = _split(s)
    p_fa, p_fr = error_rates(tar, non, np.array([threshold]))
    return float((1 - p.p_tar) * p.c_fa * p_fa[0] + p.p_tar * p.c_fr * p_fr[0])


# ---------------------------------------------------------------------------
# Conditions
# ---------------------------------------------------------------------------


def _order_key(value):
    return (PAIR_ORDER.index(value), "") if value in PAIR_ORDER else (len(PAIR_ORDER), value)


def pair_condition(enroll_value: str, test_value: str) -> str:
    """Order-insensitive pair label, e.g. ``AFV``/``CTS`` -> ``CTS-AFV``."""
    a, b = sorted([str(enroll_value), str(test_value)], key=_order_key)
    return f"{a}-{b}"


def trial_conditions(enroll_tags: dict, test_tags: dict, keys=CONDITION_KEYS) -> dict:
    """Pair conditions for every key present on both sides of a trial."""
    out = {}
    for k in keys:
        if k in enroll_tags and k in test_tags:
            out[k] = pair_condition(enroll_tags[k], test_tags[k])
    if "device" in enroll_tags and "device" in test_tags:
        out["device_match"] = "same" if enroll_tags["device"] == test_tags["device"] else "different"
    return out


@dataclass
class ConditionRow:
    key: str
    condition: str
    eer: float
    min_dcf: float
    n_target: int
    n_nontarget: int

    @property
    def low_confidence(self) -> bool:
        return self.n_target < MIN_CLASS_TRIALS or self.n_nontarget < MIN_CLASS_TRIALS


def _row(key, name, s: ScoreSet, p) -> ConditionRow:
    y = s.labels
    n_t, n_n = int(y.sum()), int((~y).sum())
    if n_t and n_n:
        e, _ = eer(s)
        d, _ = min_dcf(s, p)
    else:
        e = d = math.nan
    return ConditionRow(key, name, e, d, n_t, n_n)


def per_condition_report(s: ScoreSet, keys, p: DcfParams | None = None,
                         schema=CONDITION_KEYS + ("device_match",)) -> list[ConditionRow]:
    """One row per value of each requested condition key, then an Overall row."""
    rows = []
    for key in keys:
        if key not in schema:
            raise ValueError(f"unknown condition key {key!r}; schema is {schema}")
        values = [t.conditions.get(key) for t in s.trials]
        if any(v is None for v in values):
            raise ValueError(f"condition {key!r} missing on some trials")
        for value in sorted(set(values), key=lambda v: [_order_key(part) for part in v.split("-")]):
            rows.append(_row(key, value, s.subset([v == value for v in values]), p))
    rows.append(_row("all", "Overall", s, p))
    return rows


REPORT_COLUMNS = ("key", "condition", "eer", "min_dcf", "n_target", "n_nontarget", "low_confidence")


def write_condition_report(path, rows: list[ConditionRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r.key, r.condition, f"{r.eer:.4f}", f"{r.min_dcf:.4f}", r.n_target,
                        r.n_nontarget, int(r.low_confidence)])
    return path


# ---------------------------------------------------------------------------
# Score histograms
# ---------------------------------------------------------------------------


@dataclass
class HistogramReport:
    edges: np.ndarray
    counts: dict  # (system, "target" | "nontarget") -> counts per bin
    means: dict
    variances: dict
    variance_ratio: dict  # class -> after variance / before variance
    condition_means: dict  # (system, class) -> {source pair: mean}
    mean_gap: dict  # (system, class) -> max - min of condition means


def _aligned(before: ScoreSet, after: ScoreSet):
    idx = {t.key: i for i, t in enumerate(after.trials)}
    pairs = [(i, idx[t.key]) for i, t in enumerate(before.trials) if t.key in idx]
    if not pairs:
        raise ValueError("the two score sets share no trials")
    bi, ai = map(np.array, zip(*pairs))
    b = ScoreSet([before.trials[i] for i in bi], before.scores[bi])
    a = ScoreSet([before.trials[i] for i in bi], after.scores[ai])
    return b, a


def score_histograms(before: ScoreSet, after: ScoreSet, condition: dict | None = None,
                     bins: int = 40, gap_key: str = "source") -> HistogramReport:
    """Binned target / non-target score distributions of two systems on shared trials."""
    b, a = _aligned(before, after)
    if condition:
        keep = [all(t.conditions.get(k) == v for k, v in condition.items()) for t in b.trials]
        b, a = b.subset(keep), a.subset(keep)
        if len(b) == 0:
            raise ValueError(f"no trials match condition {condition}")
    lo = min(b.scores.min(), a.scores.min())
    hi = max(b.scores.max(), a.scores.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    y = b.labels
    counts, means, variances, cond_means, gaps = {}, {}, {}, {}, {}
    for system, s in (("before", b), ("after", a)):
        for cls, mask in (("target", y), ("nontarget", ~y)):
            vals = s.scores[mask]
            counts[system, cls] = np.histogram(vals, edges)[0]
            means[system, cls] = float(vals.mean()) if len(vals) else math.nan
            variances[system, cls] = float(vals.var()) if len(vals) else math.nan
            groups = {}
            for t, v in zip([t for t, m in zip(s.trials, mask) if m], vals):
                if gap_key in t.conditions:
                    groups.setdefault(t.conditions[gap_key], []).append(v)
            cond_means[system, cls] = {g: float(np.mean(v)) for g, v in sorted(groups.items())}
            cm = list(cond_means[system, cls].values())
            gaps[system, cls] = float(max(cm) - min(cm)) if cm else math.nan
        means[system, "all"] = float(s.scores.mean())
        variances[system, "all"] = float(s.scores.var())
    ratio = {}
    for cls in ("target", "nontarget", "all"):
        vb = variances["before", cls]
        ratio[cls] = variances["after", cls] / vb if vb and not math.isnan(vb) else math.nan
    return HistogramReport(edges, counts, means, variances, ratio, cond_means, gaps)


def write_histograms(path, report: HistogramReport) -> Path:
    """Plot-ready table: one row per bin with the four count columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = [("before", "target"), ("before", "nontarget"), ("after", "target"), ("after", "nontarget")]
    with path.open("w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi"] + [f"{s}_{c}" for s, c in cols])
        for i in range(len(report.edges) - 1):
            w.writerow([f"{report.edges[i]:.6g}", f"{report.edges[i + 1]:.6g}"]
                       + [int(report.counts[c][i]) for c in cols])
    return path


def read_histograms(path) -> dict:
    with Path(path).open() as f:
        rows = list(csv.reader(f, delimiter="\t"))
    header, body = rows[0], rows[1:]
    out = {h: [] for h in header}
    for n, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ValueError(f"{path}: malformed row {n}: {r}")
        for h, v in zip(header, r):
            try:
                out[h].append(float(v))
            except ValueError:
                raise ValueError(f"{path}: malformed row {n}: {r}") from None
    return {h: np.array(v) for h, v in out.items()}


# ---------------------------------------------------------------------------
# t-SNE
# ---------------------------------------------------------------------------


@dataclass
class TsneResult:
    coords: np.ndarray
    kl: list  # (iteration, KL divergence) every 50 iterations
    exaggeration_iters: int


def _affinities(x, perplexity, tol=1e-5, max_iter=100):
    n = len(x)
    sq = np.sum(x ** 2, axis=1)
    d = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    target = math.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-(di - di.min()) * beta)
            sw = w.sum()
            pi = w / sw
            h = -np.sum(pi * np.log(np.maximum(pi, 1e-300)))
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if np.isinf(hi) else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        p[i, np.arange(n) != i] = pi
    p = (p + p.T) / (2 * n)
    return np.maximum(p, 1e-12)


def _kl(p, q):
    return float(np.sum(p * np.log(p / q)))


def tsne(embeddings, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
         learning_rate: float = 200.0, exaggeration: float = 12.0,
         exaggeration_iters: int = 250) -> TsneResult:
    """Exact O(n^2) t-SNE to two dimensions."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if not 10 <= n <= 10000:
        raise ValueError(f"t-SNE needs 10 <= n <= 10000 points, got {n}")
    if not 0 < perplexity < n / 3:
        raise ValueError(f"perplexity must lie in (0, n/3) = (0, {n / 3:.1f}), got {perplexity}")
    rng = np.random.default_rng(seed)
    if np.allclose(x, x[0]):
        warnings.warn("all inputs identical; adding jitter", RuntimeWarning)
        x = x + 1e-4 * rng.standard_normal(x.shape)
    p = _affinities(x, perplexity)
    y = 1e-4 * rng.standard_normal((n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    history = []
    for it in range(1, iterations + 1):
        exag = exaggeration if it <= exaggeration_iters else 1.0
        momentum = 0.5 if it <= exaggeration_iters else 0.8
        sq = np.sum(y ** 2, axis=1)
        num = 1.0 / (1.0 + sq[:, None] + sq[None, :] - 2 * y @ y.T)
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq = (exag * p - q) * num
        grad = 4 * (np.diag(pq.sum(axis=1)) - pq) @ y
        gains = np.where(np.sign(grad) != np.sign(velocity), gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        if it % 50 == 0:
            history.append((it, _kl(p, q)))
    return TsneResult(y, history, exaggeration_iters)


# ---------------------------------------------------------------------------
# Trial and score files
# ---------------------------------------------------------------------------


def _format_tags(tags: dict) -> str:
    return ",".join(f"{k}:{v}" for k, v in sorted(tags.items()))


def write_trials(path, trials: list[Trial]) -> Path:
    """One ``enroll test tgt|non tag=k:v,...`` line per trial."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for t in trials:
            f.write(f"{t.enroll_id} {t.test_id} {'tgt' if t.is_target else 'non'} "
                    f"tag={_format_tags(t.conditions)}\n")
    return path


def read_trials(path) -> list[Trial]:
    trials = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) not in (3, 4) or parts[2] not in ("tgt", "non"):
            raise ValueError(f"{path}:{n}: malformed trial line {line!r}")
        tags = {}
        if len(parts) == 4:
            if not parts[3].startswith("tag="):
                raise ValueError(f"{path}:{n}: expected tag=..., got {parts[3]!r}")
            body = parts[3][4:]
            tags = dict(item.split(":", 1) for item in body.split(",")) if body else {}
        trials.append(Trial(parts[0], parts[1], parts[2] == "tgt", tags))
    return trials


def write_scores(path, scores) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{float(s)!r}\n" for s in scores))
    return path


def read_scores(path) -> np.ndarray:
    return np.array([float(x) for x in Path(path).read_text().split()])
