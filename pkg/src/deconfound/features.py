"""Acoustic and lexical input representations."""

from __future__ import annotations

import os
import string
import wave
from dataclasses import dataclass

import numpy as np

N_MELS = 40
WIN_S = 0.025
HOP_S = 0.010
LOG_FLOOR = 1e-10
UNK = "<unk>"

CATEGORIES = ("adverb", "pronoun", "social", "negate", "posemo", "negemo", "insight", "tentat", "certain")
FILLER = "filler"
DISCOURSE = "discourse"
FEATURE_NAMES = CATEGORIES + ("filler", "discourse", "content_rate")

_RESOURCES = os.path.join(os.path.dirname(__file__), "resources")


class FeatureError(ValueError):
    pass


# ---------------------------------------------------------------- acoustic


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise FeatureError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def read_wav(path) -> Waveform:
    """Mono PCM WAV via the standard library; multi-channel input is averaged."""
    with wave.open(str(path), "rb") as w:
        sr, ch, width, n = w.getframerate(), w.getnchannels(), w.getsampwidth(), w.getnframes()
        raw = w.readframes(n)
    if width == 1:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128) / 128
    elif width == 2:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768
    elif width == 4:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2**31
    else:
        raise FeatureError(f"{path}: unsupported sample width {width}")
    if ch > 1:
        x = x.reshape(-1, ch).mean(axis=1)
    return Waveform(x, sr)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def next_pow2(n):
    return 1 << (int(n) - 1).bit_length()


def mel_filterbank(sample_rate, n_fft, n_mels=N_MELS):
    """Triangular filters on the HTK mel scale from 0 Hz to Nyquist.

    Returns ``(weights (n_mels, n_fft//2 + 1), centre_hz (n_mels,))``.
    """
    n_bins = n_fft // 2 + 1
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bin_hz = np.arange(n_bins) * sample_rate / n_fft
    weights = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        weights[m] = np.maximum(0.0, np.minimum(up, down))
    return weights, edges_hz[1:-1]


def frame_count(n_samples, sample_rate):
    win = int(round(WIN_S * sample_rate))
    hop = int(round(HOP_S * sample_rate))
    if n_samples < win:
        raise FeatureError(f"signal of {n_samples} samples shorter than one {win}-sample window")
    return (n_samples - win) // hop + 1


def compute_mfb(w: Waveform) -> np.ndarray:
    """40 log mel filterbank energies per 25 ms Hamming frame, 10 ms hop."""
    sr = w.sample_rate
    win = int(round(WIN_S * sr))
    hop = int(round(HOP_S * sr))
    t = frame_count(len(w.samples), sr)
    n_fft = next_pow2(win)
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    frames = w.samples[idx] * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb, _ = mel_filterbank(sr, n_fft)
    return np.log(np.maximum(power @ fb.T, LOG_FLOOR))


def znormalize(groups):
    """Standardise every coefficient over all frames pooled within each session.

    ``groups`` maps session id to a list of ``(T, D)`` arrays; the result has
    the same structure. Coefficients with zero spread become 0.
    """
    out = {}
    for sid, seqs in groups.items():
        if not seqs:
            raise FeatureError(f"session {sid!r} has no sequences")
        pooled = np.concatenate(seqs, axis=0)
        mu = pooled.mean(axis=0)
        sd = pooled.std(axis=0)
        safe = np.where(sd > 0, sd, 1.0)
        out[sid] = [np.where(sd > 0, (s - mu) / safe, 0.0) for s in seqs]
    return out


def znormalize_utterances(utterances):
    """In-place per-session normalisation of ``u.acoustic`` (speaker sessions are distinct ids)."""
    groups = {}
    for u in utterances:
        if u.acoustic is not None:
            groups.setdefault((u.speaker_id, u.session_id), []).append(u)
    normed = znormalize({k: [u.acoustic for u in us] for k, us in groups.items()})
    for k, us in groups.items():
        for u, a in zip(us, normed[k]):
            u.acoustic = a
    return utterances


# ---------------------------------------------------------------- lexical


def tokenize(text: str):
    """Lowercase, split on whitespace, strip surrounding punctuation."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(string.punctuation)
        if tok:
            out.append(tok)
    return out


class EmbeddingTable:
    def __init__(self, vectors: dict, unk=None):
        if not vectors and unk is None:
            raise FeatureError("empty embedding table")
        dims = {len(v) for v in vectors.values()}
        if unk is not None:
            dims.add(len(unk))
        if len(dims) != 1:
            raise FeatureError(f"embedding vectors have mixed dimensions {sorted(dims)}")
        self.dim = dims.pop()
        self.vectors = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items() if k != UNK}
        if unk is None:
            unk = vectors.get(UNK, np.zeros(self.dim))
        self.unk = np.asarray(unk, dtype=np.float64)

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, token):
        return token in self.vectors

    def lookup(self, token):
        return self.vectors.get(token, self.unk)

    @classmethod
    def load(cls, path):
        """Text format: header ``count dim`` then ``token v1 ... vdim`` per line."""
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise FeatureError(f"{path}: expected 'count dim' header")
            count, dim = int(header[0]), int(header[1])
            for lineno, line in enumerate(fh, 2):
                parts = line.rstrip("\n").split(" ")
                if not parts or not parts[0]:
                    continue
                if len(parts) != dim + 1:
                    raise FeatureError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
                vectors[parts[0]] = np.array(parts[1:], dtype=np.float64)
        if len(vectors) != count:
            raise FeatureError(f"{path}: header says {count} rows, found {len(vectors)}")
        return cls(vectors)

    def save(self, path):
        rows = [(UNK, self.unk)] + sorted(self.vectors.items())
        lines = [f"{len(rows)} {self.dim}"]
        lines += [tok + " " + " ".join(repr(float(x)) for x in vec) for tok, vec in rows]
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)


def embed_tokens(tokens, table: EmbeddingTable) -> np.ndarray:
    """Stack word vectors; out-of-vocabulary tokens get the ``<unk>`` vector."""
    if not tokens:
        raise FeatureError("cannot embed an empty token list")
    return np.stack([table.lookup(t) for t in tokens])


@dataclass
class CategoryLexicon:
    categories: dict  # name -> frozenset of words

    def __post_init__(self):
        unknown = set(self.categories) - set(CATEGORIES) - {FILLER, DISCOURSE}
        if unknown:
            raise FeatureError(f"unknown lexicon categories {sorted(unknown)}")
        self.categories = {k: frozenset(v) for k, v in self.categories.items()}

    def words(self, name):
        return self.categories.get(name, frozenset())

    @classmethod
    def empty(cls):
        return cls({})

    @classmethod
    def load(cls, path):
        """Sections ``[category]`` each followed by one word per line.

        A ``[hesitation]`` section is folded into the filler set.
        """
        cats: dict[str, set] = {}
        current = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if line.startswith("[") and line.endswith("]"):
                    current = line[1:-1].strip().lower()
                    if current == "hesitation":
                        current = FILLER
                    cats.setdefault(current, set())
                    continue
                if current is None:
                    raise FeatureError(f"{path}:{lineno}: word outside a [category] section")
                cats[current].add(line.lower())
        return cls(cats)

    @classmethod
    def default(cls):
        return cls.load(os.path.join(_RESOURCES, "lexicon.txt"))


def lexical_category_vector(tokens, lexicon: CategoryLexicon, duration_s: float) -> np.ndarray:
    """Nine category rates, filler rate, discourse-marker rate and words per second."""
    if duration_s < 0:
        raise FeatureError(f"negative duration {duration_s}")
    n = len(tokens)
    vec = np.zeros(len(FEATURE_NAMES))
    if n == 0:
        return vec
    if not duration_s > 0:
        raise FeatureError("duration must be positive for a non-empty utterance")
    for i, name in enumerate(CATEGORIES + (FILLER, DISCOURSE)):
        ws = lexicon.words(name)
        vec[i] = sum(1 for t in tokens if t in ws) / n
    vec[-1] = n / duration_s
    return vec
