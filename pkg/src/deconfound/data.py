"""Utterance records, label binning, speaker-independent splits and the synthetic corpus."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

LOW, MID, HIGH = 0, 1, 2
SCRIPTED, IMPROVISED = 0, 1
SPONTANEITY = {"scripted": SCRIPTED, "improvised": IMPROVISED}

MIN_DURATION_S = 3.0
MAX_DURATION_S = 35.0


class DataError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    speaker_id: str
    session_id: str
    duration_s: float
    tokens: list[str] | None = None
    activation: float | None = None
    valence: float | None = None
    rating_scale: int = 9
    confound: float | str | None = None
    corpus: str = "synthetic"
    acoustic: np.ndarray | None = field(default=None, repr=False)
    acoustic_path: str | None = None
    audio_path: str | None = None
    lexical: np.ndarray | None = field(default=None, repr=False)
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.duration_s > 0:
            raise DataError(f"{self.id}: duration must be positive, got {self.duration_s}")
        lo, hi = (1.0, 9.0) if self.rating_scale == 9 else (1.0, 5.0)
        for name in ("activation", "valence"):
            v = getattr(self, name)
            if v is not None and not lo <= v <= hi:
                raise DataError(f"{self.id}: {name} rating {v} outside [{lo}, {hi}]")

    @property
    def has_lexical(self):
        return self.tokens is not None or self.lexical is not None

    @property
    def has_acoustic(self):
        return self.acoustic is not None or self.acoustic_path is not None or self.audio_path is not None


# ---------------------------------------------------------------- binning


def bin_muse_rating(mean_rating: float) -> int:
    """Nine-point scale: low [min, 4.5], mid (4.5, 5.5], high (5.5, max]."""
    if not 1.0 <= mean_rating <= 9.0:
        raise DataError(f"rating {mean_rating} outside the nine-point scale")
    if mean_rating <= 4.5:
        return LOW
    if mean_rating <= 5.5:
        return MID
    return HIGH


def bin_five_point_rating(mean_rating: float) -> int:
    """Five-point scale: low [1, 2.75], mid (2.75, 3.25], high (3.25, max]."""
    if not 1.0 <= mean_rating <= 5.0:
        raise DataError(f"rating {mean_rating} outside the five-point scale")
    if mean_rating <= 2.75:
        return LOW
    if mean_rating <= 3.25:
        return MID
    return HIGH


def bin_rating(mean_rating: float, scale: int) -> int:
    if scale == 9:
        return bin_muse_rating(mean_rating)
    if scale == 5:
        return bin_five_point_rating(mean_rating)
    raise DataError(f"unsupported rating scale {scale}")


def adjusted_pss(items, question3_index: int = 2) -> float:
    """Sum of stress-scale items with the third question counted twice."""
    items = list(items)
    if not items:
        raise DataError("no PSS items")
    if not 0 <= question3_index < len(items):
        raise DataError(f"question index {question3_index} out of range for {len(items)} items")
    return float(sum(items) + items[question3_index])


def bin_stress(adjusted_score: float, population_mean: float) -> int:
    """low (min, mean-2], mid (mean-2, mean+2], high (mean+2, max]."""
    if adjusted_score <= population_mean - 2:
        return LOW
    if adjusted_score <= population_mean + 2:
        return MID
    return HIGH


def confound_class(value, population_mean=None) -> int:
    if isinstance(value, str):
        try:
            return SPONTANEITY[value]
        except KeyError:
            raise DataError(f"unknown spontaneity label {value!r}") from None
    if population_mean is None:
        raise DataError("stress binning needs the training population mean")
    return bin_stress(float(value), population_mean)


def stress_population_mean(utterances) -> float:
    """Mean adjusted score over sessions (one score per session)."""
    per_session = {}
    for u in utterances:
        if u.confound is not None and not isinstance(u.confound, str):
            per_session[u.session_id] = float(u.confound)
    if not per_session:
        raise DataError("no stress scores to average")
    return float(np.mean(list(per_session.values())))


def assign_labels(utterances, train_utterances=None):
    """Fill ``labels`` from raw ratings; stress is binned around the training mean.

    Labels already present are kept.
    """
    train_utterances = utterances if train_utterances is None else train_utterances
    mean = None
    if any(u.confound is not None and not isinstance(u.confound, str) for u in train_utterances):
        mean = stress_population_mean(train_utterances)
    for u in utterances:
        for target in ("activation", "valence"):
            v = getattr(u, target)
            if target not in u.labels and v is not None:
                u.labels[target] = bin_rating(v, u.rating_scale)
        if "confound" not in u.labels and u.confound is not None:
            u.labels["confound"] = confound_class(u.confound, mean)
    return utterances


def filter_by_duration(utterances, lo=MIN_DURATION_S, hi=MAX_DURATION_S):
    return [u for u in utterances if lo <= u.duration_s <= hi]


# ---------------------------------------------------------------- splits


@dataclass
class SplitPlan:
    fold: int
    assignments: dict[str, str]

    def ids(self, role):
        return [k for k, v in self.assignments.items() if v == role]

    def select(self, utterances, role):
        return [u for u in utterances if self.assignments.get(u.id) == role]

    def speakers(self, utterances, role):
        return {u.speaker_id for u in self.select(utterances, role)}


def _speaker_counts(utterances):
    counts = {}
    for u in utterances:
        counts[u.speaker_id] = counts.get(u.speaker_id, 0) + 1
    return counts


def _pick_validation_speakers(speakers, counts, fraction, rng):
    speakers = sorted(speakers)
    rng.shuffle(speakers)
    n_val = max(1, int(round(fraction * len(speakers))))
    if n_val >= len(speakers):
        raise DataError("not enough speakers for a speaker-disjoint validation split")
    return set(speakers[:n_val])


def make_speaker_independent_folds(utterances, k=5, seed=0, val_fraction=0.2):
    """Speaker-disjoint train/validation/test plans, one per fold.

    Speakers are dealt largest-first into the ``k`` groups with the fewest
    utterances so far; group ``i`` is the test set of fold ``i``.
    """
    counts = _speaker_counts(utterances)
    if len(counts) < k:
        raise DataError(f"{len(counts)} speakers cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = sorted(counts)
    rng.shuffle(order)
    order.sort(key=lambda s: -counts[s])  # stable: ties keep shuffled order
    groups = [[] for _ in range(k)]
    load = [0] * k
    for spk in order:
        i = min(range(k), key=lambda j: (load[j], j))
        groups[i].append(spk)
        load[i] += counts[spk]
    plans = []
    for i in range(k):
        test = set(groups[i])
        rest = [s for j, g in enumerate(groups) if j != i for s in g]
        val = _pick_validation_speakers(rest, counts, val_fraction, rng)
        role = {s: "test" if s in test else "validation" if s in val else "train" for s in counts}
        plans.append(SplitPlan(i, {u.id: role[u.speaker_id] for u in utterances}))
    return plans


def train_validation_split(utterances, val_fraction=0.2, seed=0) -> SplitPlan:
    """Speaker-disjoint 80:20 split with no test role."""
    counts = _speaker_counts(utterances)
    if len(counts) < 2:
        raise DataError("need at least two speakers for a train/validation split")
    val = _pick_validation_speakers(list(counts), counts, val_fraction, np.random.default_rng(seed))
    return SplitPlan(0, {u.id: "validation" if u.speaker_id in val else "train" for u in utterances})


def partition_by_confound(utterances, held_out_level):
    """Split into (source, target) with target = every utterance at ``held_out_level``."""
    target = [u for u in utterances if u.labels.get("confound") == held_out_level]
    if not target:
        raise DataError(f"no utterances at confound level {held_out_level}")
    source = [u for u in utterances if u.labels.get("confound") != held_out_level]
    return source, target


def overlapping_speaker_runs(source, target):
    """For each speaker present in both sets, yield ``(speaker, source - speaker, target[speaker])``."""
    shared = sorted({u.speaker_id for u in source} & {u.speaker_id for u in target})
    for spk in shared:
        yield (
            spk,
            [u for u in source if u.speaker_id != spk],
            [u for u in target if u.speaker_id == spk],
        )


# ---------------------------------------------------------------- feature files / manifest


def write_feature_file(path, arr):
    """``u32 ndim``, ``ndim x u64`` dims, then little-endian float64 data."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_feature_file(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise DataError(f"{path}: truncated feature file")
    (ndim,) = struct.unpack("<I", blob[:4])
    head = 4 + 8 * ndim
    if len(blob) < head:
        raise DataError(f"{path}: truncated feature header")
    shape = struct.unpack(f"<{ndim}Q", blob[4:head])
    n = int(np.prod(shape)) if shape else 1
    if len(blob) != head + 8 * n:
        raise DataError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(blob[head:], dtype="<f8").reshape(shape).astype(np.float64)


_MANIFEST_FIELDS = (
    "id", "speaker_id", "session_id", "duration_s", "tokens", "activation", "valence",
    "rating_scale", "confound", "corpus", "acoustic_path", "audio_path", "labels",
)


def utterance_to_record(u: Utterance) -> dict:
    return {k: getattr(u, k) for k in _MANIFEST_FIELDS}


def write_manifest(utterances, path, feature_dir=None):
    """One JSON object per line. Inline acoustic arrays are written to ``feature_dir``."""
    base = os.path.dirname(os.path.abspath(path))
    lines = []
    for u in utterances:
        if u.acoustic is not None and feature_dir is not None:
            os.makedirs(feature_dir, exist_ok=True)
            fpath = os.path.join(feature_dir, f"{u.id}.f64")
            write_feature_file(fpath, u.acoustic)
            u.acoustic_path = os.path.relpath(fpath, base)
        lines.append(json.dumps(utterance_to_record(u), sort_keys=True))
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_manifest(path, load_features=True):
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            missing = {"id", "speaker_id", "session_id", "duration_s"} - rec.keys()
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            unknown = rec.keys() - set(_MANIFEST_FIELDS)
            if unknown:
                raise DataError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            rec["labels"] = {k: int(v) for k, v in (rec.get("labels") or {}).items()}
            u = Utterance(**rec)
            if load_features and u.acoustic_path:
                u.acoustic = read_feature_file(os.path.join(base, u.acoustic_path))
            out.append(u)
    return out


# ---------------------------------------------------------------- synthetic corpus


FILLERS = ("uh", "um", "uhh", "hmm")
ADVERBS = ("really", "very", "just", "quite")
DISCOURSE = ("so", "well", "anyway")


@dataclass
class SyntheticConfig:
    """Knobs of the synthetic confounded corpus.

    ``rho`` is the probability that the confound class is the image of the
    emotion class under ``confound_map``; otherwise it is drawn from
    ``confound_priors``. ``acoustic_shift``/``lexical_shift`` set how strongly
    the confound moves each modality.
    """

    n_speakers: int = 40
    utterances_per_speaker: int = 30
    frame_range: tuple = (24, 40)
    token_range: tuple = (8, 14)
    emotion_priors: tuple = (1 / 3, 1 / 3, 1 / 3)
    confound_priors: tuple = (1 / 3, 1 / 3, 1 / 3)
    rho: float = 0.6
    acoustic_shift: float = 0.5
    lexical_shift: float = 0.5
    emotion_strength: float = 0.25
    valence_strength: float = 0.25
    lexical_emotion_rate: float = 0.15
    noise: float = 1.0
    speaker_sd: float = 0.3
    acoustic_dim: int = 40
    embedding_dim: int = 16
    confound_map: tuple | None = None
    confound_kind: str = "stress"
    corpus: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        for name in ("emotion_priors", "confound_priors"):
            p = np.asarray(getattr(self, name), dtype=float)
            if (p < 0).any() or abs(p.sum() - 1) > 1e-9 or (p > 0).sum() < 2:
                raise DataError(f"{name} must be a non-degenerate distribution, got {tuple(p)}")
        if len(self.emotion_priors) != 3:
            raise DataError("emotion priors need three classes")
        n_conf = len(self.confound_priors)
        if self.confound_kind == "stress" and n_conf != 3:
            raise DataError("stress confound has three classes")
        if self.confound_kind == "spontaneity" and n_conf != 2:
            raise DataError("spontaneity confound has two classes")
        if not 0.0 <= self.rho <= 1.0:
            raise DataError(f"rho must lie in [0, 1], got {self.rho}")
        if self.acoustic_dim < 40:
            raise DataError("acoustic_dim must be at least 40")
        if self.n_speakers < 1 or self.utterances_per_speaker < 1:
            raise DataError("empty corpus")

    @property
    def n_confound(self):
        return len(self.confound_priors)

    def mapping(self):
        if self.confound_map is not None:
            return tuple(self.confound_map)
        return (0, 1, 2) if self.n_confound == 3 else (0, 1, 1)


def synthetic_vocabulary(cfg: SyntheticConfig):
    words = {"neutral": [f"word{i}" for i in range(24)]}
    for target in ("act", "val"):
        for c in range(3):
            words[f"{target}{c}"] = [f"{target}{c}_{i}" for i in range(6)]
    words["filler"] = list(FILLERS)
    words["adverb"] = list(ADVERBS)
    words["discourse"] = list(DISCOURSE)
    return words


def synthetic_embedding_table(cfg: SyntheticConfig):
    """Word vectors clustered by word group, for the synthetic vocabulary."""
    from .features import EmbeddingTable

    rng = np.random.default_rng(cfg.seed + 7919)
    vocab = synthetic_vocabulary(cfg)
    vectors = {}
    for group, ws in vocab.items():
        centre = rng.normal(size=cfg.embedding_dim)
        for w in ws:
            vectors[w] = centre + 0.3 * rng.normal(size=cfg.embedding_dim)
    return EmbeddingTable(vectors, unk=np.zeros(cfg.embedding_dim))


def _draw(rng, priors):
    return int(rng.choice(len(priors), p=np.asarray(priors)))


def _rating_for_class(rng, c):
    lo, hi = ((1.5, 4.4), (4.6, 5.4), (5.6, 8.5))[c]
    return round(float(rng.uniform(lo, hi)), 3)


def generate_synthetic_corpus(cfg: SyntheticConfig):
    """Speakers with persistent offsets, emotion classes, and a correlated confound.

    Acoustic frames carry activation on dims 0-9, valence on 10-19 and the
    confound shift on 20-29; the remaining dims are noise. Token streams mix
    class words with fillers, adverbs and discourse markers whose rates grow
    with the confound level.
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.acoustic_dim
    conf_map = cfg.mapping()
    n_conf = cfg.n_confound

    act_means = rng.normal(size=(3, 10))
    act_means /= np.linalg.norm(act_means, axis=1, keepdims=True)
    val_means = rng.normal(size=(3, 10))
    val_means /= np.linalg.norm(val_means, axis=1, keepdims=True)
    conf_dir = rng.normal(size=10)
    conf_dir /= np.linalg.norm(conf_dir)
    vocab = synthetic_vocabulary(cfg)

    out = []
    for s in range(cfg.n_speakers):
        spk = f"spk{s:03d}"
        offset = rng.normal(scale=cfg.speaker_sd, size=d)
        for j in range(cfg.utterances_per_speaker):
            e = _draw(rng, cfg.emotion_priors)
            v = _draw(rng, cfg.emotion_priors)
            if rng.random() < cfg.rho:
                c = conf_map[e]
            else:
                c = _draw(rng, cfg.confound_priors)
            level = c / (n_conf - 1)  # 0..1
            centred = level - 0.5

            t = int(rng.integers(cfg.frame_range[0], cfg.frame_range[1] + 1))
            mean = offset.copy()
            mean[0:10] += cfg.emotion_strength * act_means[e]
            mean[10:20] += cfg.valence_strength * val_means[v]
            mean[20:30] += cfg.acoustic_shift * 2.0 * centred * conf_dir
            frames = mean + cfg.noise * rng.normal(size=(t, d))

            n_tok = int(rng.integers(cfg.token_range[0], cfg.token_range[1] + 1))
            p_fill = 0.04 + 0.3 * cfg.lexical_shift * level
            p_adv = 0.04 + 0.15 * cfg.lexical_shift * level
            p_disc = 0.04
            p_act = cfg.lexical_emotion_rate
            p_val = cfg.lexical_emotion_rate
            p_neu = max(0.0, 1.0 - (p_fill + p_adv + p_disc + p_act + p_val))
            probs = np.array([p_fill, p_adv, p_disc, p_act, p_val, p_neu])
            probs /= probs.sum()
            groups = ("filler", "adverb", "discourse", f"act{e}", f"val{v}", "neutral")
            tokens = []
            for g in rng.choice(len(groups), size=n_tok, p=probs):
                ws = vocab[groups[g]]
                tokens.append(ws[int(rng.integers(len(ws)))])

            duration = round(float(rng.uniform(3.0, 12.0)), 3)
            if cfg.confound_kind == "stress":
                raw_conf = 17.0 + 4.0 * (c - 1) + round(float(rng.uniform(-1, 1)), 3)
                session = f"{spk}-s{c}"
            else:
                raw_conf = "improvised" if c == IMPROVISED else "scripted"
                session = f"{spk}-{raw_conf}"
            out.append(
                Utterance(
                    id=f"{cfg.corpus}-{spk}-{j:04d}",
                    speaker_id=spk,
                    session_id=session,
                    duration_s=duration,
                    tokens=tokens,
                    activation=_rating_for_class(rng, e),
                    valence=_rating_for_class(rng, v),
                    rating_scale=9,
                    confound=raw_conf,
                    corpus=cfg.corpus,
                    acoustic=frames,
                    labels={"activation": e, "valence": v, "confound": c},
                )
            )
    return out


def class_counts(utterances, key, n_classes):
    counts = np.zeros(n_classes, dtype=np.int64)
    for u in utterances:
        counts[u.labels[key]] += 1
    return counts


def chi_square_independence(utterances, a="activation", b="confound"):
    """Pearson chi-square statistic, dof and upper-tail p for two label columns."""
    ka = max(u.labels[a] for u in utterances) + 1
    kb = max(u.labels[b] for u in utterances) + 1
    table = np.zeros((ka, kb))
    for u in utterances:
        table[u.labels[a], u.labels[b]] += 1
    expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
    stat = float(((table - expected) ** 2 / expected).sum())
    dof = (ka - 1) * (kb - 1)
    from .evaluation import chi2_sf

    return stat, dof, chi2_sf(stat, dof)

