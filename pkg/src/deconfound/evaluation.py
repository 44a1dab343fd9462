"""Metrics, significance tests, APS and the cross-domain harness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class EvaluationError(ValueError):
    pass


class DegenerateTestError(EvaluationError):
    pass


class UndefinedCorrelationError(EvaluationError):
    pass


# ---------------------------------------------------------------- confusion / UAR


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise EvaluationError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise EvaluationError("negative counts in confusion matrix")

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes):
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
        return cls(cm)

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def support(self):
        return self.counts.sum(axis=1)

    def recalls(self):
        return np.diag(self.counts) / self.support

    def row_percent(self):
        s = self.support
        if (s == 0).any():
            raise EvaluationError(f"class {int(np.argmin(s))} has no samples")
        return 100.0 * self.counts / s[:, None]


def uar(cm: ConfusionMatrix, present_only=False) -> float:
    """Mean per-class recall.

    With ``present_only`` classes without support are skipped instead of
    raising.
    """
    s = cm.support
    if present_only:
        keep = s > 0
        if not keep.any():
            raise EvaluationError("no samples")
        return float(np.mean(np.diag(cm.counts)[keep] / s[keep]))
    empty = np.flatnonzero(s == 0)
    if len(empty):
        raise EvaluationError(f"class {int(empty[0])} has no samples; UAR undefined")
    return float(np.mean(np.diag(cm.counts) / s))


def uar_from_labels(y_true, y_pred, n_classes, present_only=False):
    return uar(ConfusionMatrix.from_labels(y_true, y_pred, n_classes), present_only=present_only)


def chance_level(y_true, n_classes=None):
    """``1 / C`` over the classes actually present."""
    return 1.0 / len(np.unique(np.asarray(y_true)))


def confusion_delta(cm_normal: ConfusionMatrix, cm_adversarial: ConfusionMatrix) -> np.ndarray:
    """Row-normalised adversarial percentages minus normal percentages."""
    if cm_normal.counts.shape != cm_adversarial.counts.shape:
        raise EvaluationError("confusion matrices differ in shape")
    if not np.array_equal(cm_normal.support, cm_adversarial.support):
        raise EvaluationError("confusion matrices cover different sample groups")
    return cm_adversarial.row_percent() - cm_normal.row_percent()


def confusion_delta_by_group(y_true, pred_normal, pred_adversarial, groups, n_classes=3):
    """One delta matrix per confound group value."""
    y_true, pn, pa, groups = map(np.asarray, (y_true, pred_normal, pred_adversarial, groups))
    out = {}
    for g in sorted(set(groups.tolist())):
        m = groups == g
        out[g] = confusion_delta(
            ConfusionMatrix.from_labels(y_true[m], pn[m], n_classes),
            ConfusionMatrix.from_labels(y_true[m], pa[m], n_classes),
        )
    return out


# ---------------------------------------------------------------- special functions


def _betacf(a, b, x, max_iter=400, eps=3e-16):
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise EvaluationError("incomplete beta continued fraction did not converge")


def betainc_reg(a, b, x):
    """Regularised incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise EvaluationError(f"x={x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lbt) * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t, df):
    """``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    t = abs(float(t))
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def _gammainc_upper_reg(a, x):
    # Q(a, x): series below a+1, continued fraction above
    if x <= 0:
        return 1.0
    gln = math.lgamma(a)
    if x < a + 1.0:
        ap, s, d = a, 1.0 / a, 1.0 / a
        for _ in range(1000):
            ap += 1.0
            d *= x / ap
            s += d
            if abs(d) < abs(s) * 3e-16:
                break
        return 1.0 - s * math.exp(-x + a * math.log(x) - gln)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-16:
            break
    return math.exp(-x + a * math.log(x) - gln) * h


def chi2_sf(stat, dof):
    return _gammainc_upper_reg(dof / 2.0, stat / 2.0)


# ---------------------------------------------------------------- tests / correlation


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float


def paired_t_test(a, b) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvaluationError("paired t-test needs two equal-length vectors")
    n = len(a)
    if n < 2:
        raise EvaluationError("paired t-test needs at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if not sd > 0:
        raise DegenerateTestError("differences have zero variance")
    t = d.mean() / (sd / math.sqrt(n))
    return TTestResult(float(t), n - 1, t_sf_two_sided(t, n - 1))


def one_sided_paired_p(a, b):
    """p for the alternative ``mean(a - b) > 0``."""
    r = paired_t_test(a, b)
    return r.p / 2 if r.t > 0 else 1 - r.p / 2


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise EvaluationError("pearson_r needs two equal-length vectors")
    if len(x) < 3:
        raise EvaluationError("pearson_r needs at least three points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("zero variance; correlation undefined")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def pearson_p(r, n):
    """Two-sided p from ``t = r sqrt((n-2)/(1-r^2))`` with ``n - 2`` dof."""
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return t_sf_two_sided(t, n - 2)


def bh_adjust(p_values) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1:
        raise EvaluationError("p-values must be a vector")
    if ((p < 0) | (p > 1) | np.isnan(p)).any():
        raise EvaluationError("p-values must lie in [0, 1]")
    m = len(p)
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(ranked, 1.0)
    return out


def significance_code(p):
    if p is None or math.isnan(p):
        return "n/a"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.1:
        return "-"
    return ""


# ---------------------------------------------------------------- APS


@dataclass(frozen=True)
class ApsRecord:
    sample_id: str
    successes_adv: int
    successes_normal: int
    runs: int
    aps: float


def aps(adv_outcomes, normal_outcomes, sample_id="") -> ApsRecord:
    """Adversarial success rate minus normal success rate for one sample."""
    adv = np.asarray(adv_outcomes, dtype=bool)
    nor = np.asarray(normal_outcomes, dtype=bool)
    if adv.shape != nor.shape or adv.ndim != 1 or len(adv) == 0:
        raise EvaluationError(f"run counts differ: {adv.shape} vs {nor.shape}")
    runs = len(adv)
    sa, sn = int(adv.sum()), int(nor.sum())
    return ApsRecord(sample_id, sa, sn, runs, sa / runs - sn / runs)


def aps_from_predictions(y_true, adv_preds, normal_preds, sample_ids):
    """``adv_preds``/``normal_preds`` are (runs, n_samples) predicted classes."""
    y = np.asarray(y_true)
    a = np.asarray(adv_preds) == y[None]
    n = np.asarray(normal_preds) == y[None]
    return [aps(a[:, i], n[:, i], sid) for i, sid in enumerate(sample_ids)]


@dataclass
class CorrelationResult:
    feature: str
    r: float | None
    p_raw: float | None
    p_adjusted: float | None
    code: str
    defined: bool = True


def aps_correlation_report(aps_records, features, feature_names):
    """Pearson r between each feature column and APS, BH-adjusted across features.

    ``features`` maps sample id to a feature vector. Constant columns (or a
    constant APS) are reported as undefined rather than dropped.
    """
    ids = [r.sample_id for r in aps_records]
    missing = [i for i in ids if i not in features]
    if missing:
        raise EvaluationError(f"{len(missing)} APS samples have no feature vector, e.g. {missing[0]!r}")
    y = np.array([r.aps for r in aps_records])
    X = np.stack([np.asarray(features[i], dtype=np.float64) for i in ids])
    if X.shape[1] != len(feature_names):
        raise EvaluationError(f"{X.shape[1]} feature columns but {len(feature_names)} names")
    rs, ps = [], []
    for j in range(X.shape[1]):
        try:
            r = pearson_r(X[:, j], y)
        except UndefinedCorrelationError:
            rs.append(None)
            ps.append(None)
            continue
        rs.append(r)
        ps.append(pearson_p(r, len(y)))
    defined = [j for j, p in enumerate(ps) if p is not None]
    adj = dict(zip(defined, bh_adjust([ps[j] for j in defined]))) if defined else {}
    out = []
    for j, name in enumerate(feature_names):
        if rs[j] is None:
            out.append(CorrelationResult(name, None, None, None, "n/a", defined=False))
        else:
            pa = float(adj[j])
            out.append(CorrelationResult(name, rs[j], ps[j], pa, significance_code(pa)))
    return out


def format_correlation_table(results):
    lines = [f"{'feature':<16}{'r':>9}{'p_adj':>10}  code"]
    for c in results:
        if not c.defined:
            lines.append(f"{c.feature:<16}{'undef':>9}{'':>10}  n/a")
        else:
            lines.append(f"{c.feature:<16}{c.r:>9.3f}{c.p_adjusted:>10.4f}  {c.code}")
    return "\n".join(lines)


# ---------------------------------------------------------------- cross-domain harness


@dataclass
class UarReport:
    model: str
    uar: float
    seed_uars: list
    per_speaker: dict
    confusion: ConfusionMatrix | None = None


@dataclass
class CrossDomainReport:
    target: str
    normal: UarReport
    adversarial: UarReport
    test: TTestResult | None
    delta: float
    sign_indeterminate: bool
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "target": self.target,
            "normal_uar": self.normal.uar,
            "adversarial_uar": self.adversarial.uar,
            "normal_seed_uars": self.normal.seed_uars,
            "adversarial_seed_uars": self.adversarial.seed_uars,
            "delta": self.delta,
            "t": None if self.test is None else self.test.t,
            "df": None if self.test is None else self.test.df,
            "p": None if self.test is None else self.test.p,
            "sign_indeterminate": self.sign_indeterminate,
            "notes": self.notes,
        }


def _check_modality(spec, examples):
    for stream in spec.streams:
        if not examples.has(stream):
            raise EvaluationError(
                f"modality mismatch: {spec.modality} model needs {stream} inputs the target does not provide"
            )


def _uar_report(name, prob_list, y, speakers):
    y = np.asarray(y)
    seed_uars = [uar_from_labels(y, np.asarray(p).argmax(axis=1), 3, present_only=True) for p in prob_list]
    from .train import average_argmax

    pred = average_argmax(prob_list)
    per_speaker = {}
    spk = np.asarray(speakers)
    for s in sorted(set(speakers)):
        m = spk == s
        per_speaker[s] = uar_from_labels(y[m], pred[m], 3, present_only=True)
    cm = ConfusionMatrix.from_labels(y, pred, 3)
    return UarReport(name, uar(cm, present_only=True), seed_uars, per_speaker, cm)


def cross_domain_eval(normal_records, adversarial_records, target_examples, target="target",
                      label_key="emotion", gain_tolerance=0.03, alpha=0.05):
    """Score normal and adversarial models on a target set never used in training.

    The two models are compared with a paired t-test over per-speaker UARs
    (over per-seed UARs when the target has fewer than two speakers).
    ``sign_indeterminate`` flags a gain whose sign is not established: the
    difference is non-significant or smaller than ``gain_tolerance``.
    """
    from .train import predict_probs

    for rec in list(normal_records) + list(adversarial_records):
        _check_modality(rec.params.spec, target_examples)
    overlap = set(target_examples.ids) & set().union(*(r.train_ids for r in normal_records + adversarial_records))
    if overlap:
        raise EvaluationError(f"{len(overlap)} target samples were used in training")
    pn = [predict_probs(r.params, target_examples)["emotion"] for r in normal_records]
    pa = [predict_probs(r.params, target_examples)["emotion"] for r in adversarial_records]
    return compare_on_target(pn, pa, target_examples.labels[label_key], target_examples.speakers,
                             target, gain_tolerance, alpha)


def compare_on_target(normal_probs, adversarial_probs, y, speakers, target="target",
                      gain_tolerance=0.03, alpha=0.05) -> CrossDomainReport:
    """The statistics half of :func:`cross_domain_eval`, from stored probabilities."""
    if not normal_probs or not adversarial_probs:
        raise EvaluationError("need at least one normal and one adversarial run")
    n = _uar_report("normal", list(normal_probs), y, speakers)
    a = _uar_report("adversarial", list(adversarial_probs), y, speakers)
    notes = []
    spk = sorted(n.per_speaker)
    if len(spk) >= 2:
        xa = [a.per_speaker[s] for s in spk]
        xn = [n.per_speaker[s] for s in spk]
        unit = "speaker"
    else:
        xa, xn, unit = a.seed_uars, n.seed_uars, "seed"
    try:
        test = paired_t_test(xa, xn)
    except (DegenerateTestError, EvaluationError) as exc:
        test = None
        notes.append(f"no significance test: {exc}")
    notes.append(f"paired unit: {unit}")
    delta = float(np.mean(a.seed_uars) - np.mean(n.seed_uars))
    indeterminate = test is None or test.p >= alpha or abs(delta) < gain_tolerance
    return CrossDomainReport(target, n, a, test, delta, indeterminate, notes)


def format_transfer_table(rows):
    """Table rows ``(setup, normal_uar, adversarial_uar, significant)``."""
    lines = [f"{'setup':<20}{'normal':>9}{'adversarial':>13}"]
    for setup, nu, au, sig in rows:
        mark = " *" if sig else ""
        lines.append(f"{setup:<20}{nu:>9.3f}{au:>13.3f}{mark}")
    return "\n".join(lines)
