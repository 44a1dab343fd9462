"""Network variants: embedding sub-network, emotion head, optional adversarial confound head."""

from __future__ import annotations

import hashlib
import io
import itertools
import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import netcore as nc
from .netcore import GruParams, GrlConfig, Tensor

TRAINING_MODES = ("normal", "adversarial")
EMOTION_TARGETS = ("activation", "valence")
MODALITIES = ("acoustic", "lexical", "multimodal")

GRID = {
    "conv_layers": (3, 4),
    "kernel_width": (2, 3),
    "conv_width": (32, 64, 128),
    "pool_width": (2,),
    "gru_layers": (2, 3),
    "gru_width": (32,),
    "dense_layers": (1, 2),
    "dense_width": (32, 64),
    "lam": (0.3, 0.6, 0.8),
}

MAGIC = b"DCFD0001"


class SpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BranchHyper:
    conv_layers: int = 3
    kernel_width: int = 2
    conv_width: int = 32
    pool_width: int = 2
    gru_layers: int = 2
    gru_width: int = 32

    @property
    def min_length(self):
        """Shortest input sequence the conv stack accepts."""
        return self.conv_layers * (self.kernel_width - 1) + 1


@dataclass(frozen=True)
class HeadHyper:
    dense_layers: int = 1
    dense_width: int = 32


@dataclass(frozen=True)
class VariantSpec:
    training_mode: str
    emotion_target: str
    modality: str
    acoustic: BranchHyper | None = None
    lexical: BranchHyper | None = None
    head: HeadHyper = field(default_factory=HeadHyper)
    lam: float | None = None
    confound_classes: int = 3
    acoustic_dim: int = 40
    lexical_dim: int = 300

    def __post_init__(self):
        self.validate()

    @classmethod
    def create(cls, training_mode="normal", emotion_target="activation", modality="multimodal",
               branch: BranchHyper | None = None, head: HeadHyper | None = None, lam=None, **kw):
        """Fill in default branch hyperparameters for the chosen modality."""
        branch = branch or BranchHyper()
        if training_mode == "adversarial" and lam is None:
            lam = 0.6
        return cls(
            training_mode=training_mode,
            emotion_target=emotion_target,
            modality=modality,
            acoustic=branch if modality in ("acoustic", "multimodal") else None,
            lexical=branch if modality in ("lexical", "multimodal") else None,
            head=head or HeadHyper(),
            lam=lam,
            **kw,
        )

    @property
    def adversarial(self):
        return self.training_mode == "adversarial"

    @property
    def streams(self):
        return tuple(s for s in ("acoustic", "lexical") if getattr(self, s) is not None)

    @property
    def embedding_dim(self):
        return sum(getattr(self, s).gru_width for s in self.streams)

    def validate(self, grid=False):
        if self.training_mode not in TRAINING_MODES:
            raise SpecError(f"training_mode must be one of {TRAINING_MODES}")
        if self.emotion_target not in EMOTION_TARGETS:
            raise SpecError(f"emotion_target must be one of {EMOTION_TARGETS}")
        if self.modality not in MODALITIES:
            raise SpecError(f"modality must be one of {MODALITIES}")
        want = {"acoustic": ("acoustic",), "lexical": ("lexical",), "multimodal": ("acoustic", "lexical")}
        if self.streams != want[self.modality]:
            raise SpecError(f"modality {self.modality} needs branches {want[self.modality]}, got {self.streams}")
        if (self.lam is not None) != self.adversarial:
            raise SpecError("lambda must be set exactly when training_mode is adversarial")
        if self.lam is not None and not self.lam >= 0:
            raise SpecError(f"lambda must be >= 0, got {self.lam}")
        if self.confound_classes not in (2, 3):
            raise SpecError("confound head supports 2 or 3 classes")
        for name in self.streams:
            b = getattr(self, name)
            for key in ("conv_layers", "kernel_width", "conv_width", "pool_width", "gru_layers", "gru_width"):
                v = getattr(b, key)
                if not isinstance(v, int) or v < 1:
                    raise SpecError(f"{name}.{key} must be a positive integer, got {v!r}")
                if grid and v not in GRID[key]:
                    raise SpecError(f"{name}.{key}={v} outside grid {GRID[key]}")
        for key in ("dense_layers", "dense_width"):
            v = getattr(self.head, key)
            if not isinstance(v, int) or v < 1:
                raise SpecError(f"head.{key} must be a positive integer, got {v!r}")
            if grid and v not in GRID[key]:
                raise SpecError(f"head.{key}={v} outside grid {GRID[key]}")
        if grid and self.lam is not None and self.lam not in GRID["lam"]:
            raise SpecError(f"lambda {self.lam} outside grid {GRID['lam']}")
        if self.acoustic_dim < 1 or self.lexical_dim < 1:
            raise SpecError("input dims must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for s in ("acoustic", "lexical"):
            if d.get(s) is not None:
                d[s] = BranchHyper(**d[s])
        d["head"] = HeadHyper(**d.get("head", {}))
        return cls(**d)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def enumerate_variants(branch=None, head=None, lam=0.6, **kw):
    """The 2 x 2 x 3 cross product of mode, emotion target and modality."""
    out = []
    for mode, target, modality in itertools.product(TRAINING_MODES, EMOTION_TARGETS, MODALITIES):
        out.append(VariantSpec.create(mode, target, modality, branch=branch, head=head,
                                      lam=lam if mode == "adversarial" else None, **kw))
    return out


class NetworkParams:
    """Named parameter tensors plus the spec that shaped them."""

    def __init__(self, spec: VariantSpec, tensors: dict[str, Tensor]):
        self.spec = spec
        self.tensors = tensors
        self.fingerprint = spec.fingerprint()

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def copy(self):
        return NetworkParams(self.spec, {k: Tensor(v.value.copy(), requires_grad=True, name=k)
                                         for k, v in self.tensors.items()})

    def values(self):
        return {k: v.value for k, v in self.tensors.items()}

    def num_parameters(self):
        return int(sum(v.value.size for v in self.tensors.values()))


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _branch_params(rng, prefix, hp: BranchHyper, in_dim):
    t = {}
    d = in_dim
    for i in range(hp.conv_layers):
        k = hp.kernel_width
        t[f"{prefix}/conv{i}/kernels"] = _glorot(rng, (k, d, hp.conv_width), k * d, k * hp.conv_width)
        t[f"{prefix}/conv{i}/bias"] = np.zeros(hp.conv_width)
        d = hp.conv_width
    for i in range(hp.gru_layers):
        h = hp.gru_width
        t[f"{prefix}/gru{i}/W"] = _glorot(rng, (d, 3 * h), d, 3 * h)
        t[f"{prefix}/gru{i}/U"] = _glorot(rng, (h, 3 * h), h, 3 * h)
        t[f"{prefix}/gru{i}/b"] = np.zeros(3 * h)
        d = h
    return t


def head_params(rng, prefix, hp: HeadHyper, in_dim, n_out):
    t = {}
    d = in_dim
    for i in range(hp.dense_layers):
        t[f"{prefix}/dense{i}/W"] = _glorot(rng, (d, hp.dense_width), d, hp.dense_width)
        t[f"{prefix}/dense{i}/b"] = np.zeros(hp.dense_width)
        d = hp.dense_width
    t[f"{prefix}/out/W"] = _glorot(rng, (d, n_out), d, n_out)
    t[f"{prefix}/out/b"] = np.zeros(n_out)
    return t


def build_variant(spec: VariantSpec, seed: int) -> NetworkParams:
    """Initialise parameters with seeded Glorot-uniform weights and zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    raw = {}
    if spec.acoustic is not None:
        raw.update(_branch_params(rng, "acoustic", spec.acoustic, spec.acoustic_dim))
    if spec.lexical is not None:
        raw.update(_branch_params(rng, "lexical", spec.lexical, spec.lexical_dim))
    raw.update(head_params(rng, "emotion", spec.head, spec.embedding_dim, 3))
    if spec.adversarial:
        raw.update(head_params(rng, "confound", spec.head, spec.embedding_dim, spec.confound_classes))
    return NetworkParams(spec, {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()})


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    """Zero-padded sequences with their true lengths."""

    acoustic: np.ndarray | None = None
    acoustic_lengths: np.ndarray | None = None
    lexical: np.ndarray | None = None
    lexical_lengths: np.ndarray | None = None

    @property
    def size(self):
        for arr in (self.acoustic, self.lexical):
            if arr is not None:
                return arr.shape[0]
        return 0


def pad_sequences(seqs):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    dim = seqs[0].shape[1]
    out = np.zeros((len(seqs), int(lengths.max()), dim))
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def make_batch(acoustic=None, lexical=None) -> Batch:
    b = Batch()
    if acoustic is not None:
        b.acoustic, b.acoustic_lengths = pad_sequences(acoustic)
    if lexical is not None:
        b.lexical, b.lexical_lengths = pad_sequences(lexical)
    return b


# ---------------------------------------------------------------- forward


@dataclass
class ForwardOutput:
    emotion_probs: Tensor
    confound_probs: Tensor | None
    embedding: Tensor


def _branch(params: NetworkParams, prefix, hp: BranchHyper, x: np.ndarray, lengths):
    lengths = np.asarray(lengths, dtype=np.int64)
    short = lengths < hp.min_length
    if short.any():
        raise nc.SequenceTooShortError(
            f"{prefix} sequence of length {int(lengths[short].min())} shorter than receptive field {hp.min_length}"
        )
    h = Tensor(x)
    for i in range(hp.conv_layers):
        h = nc.relu(nc.conv1d(h, params[f"{prefix}/conv{i}/kernels"], params[f"{prefix}/conv{i}/bias"]))
        lengths = lengths - (hp.kernel_width - 1)
    h = nc.maxpool1d(h, hp.pool_width, lengths)
    lengths = np.array(nc.pooled_lengths(lengths, hp.pool_width))
    for i in range(hp.gru_layers):
        p = GruParams(params[f"{prefix}/gru{i}/W"], params[f"{prefix}/gru{i}/U"], params[f"{prefix}/gru{i}/b"])
        h = nc.gru_sequence(h, p, lengths)
    return nc.last_step(h)


def embed(params: NetworkParams, batch: Batch) -> Tensor:
    spec = params.spec
    parts = []
    for stream in spec.streams:
        x = getattr(batch, stream)
        if x is None:
            raise SpecError(f"{spec.modality} model needs a {stream} stream")
        dim = spec.acoustic_dim if stream == "acoustic" else spec.lexical_dim
        if x.shape[-1] != dim:
            raise SpecError(f"{stream} features have dim {x.shape[-1]}, model expects {dim}")
        parts.append(_branch(params, stream, getattr(spec, stream), x, getattr(batch, f"{stream}_lengths")))
    return parts[0] if len(parts) == 1 else nc.concat(parts, axis=-1)


def head_forward(params, prefix, hp: HeadHyper, x: Tensor) -> Tensor:
    for i in range(hp.dense_layers):
        x = nc.dense(x, params[f"{prefix}/dense{i}/W"], params[f"{prefix}/dense{i}/b"], "relu")
    return nc.dense(x, params[f"{prefix}/out/W"], params[f"{prefix}/out/b"], "softmax")


def forward(params: NetworkParams, acoustic=None, lexical=None) -> ForwardOutput:
    """Run the network.

    ``acoustic``/``lexical`` are either single sequences ``(T, D)`` or a
    :class:`Batch` passed as ``acoustic``. Single-sequence calls return
    unbatched outputs.
    """
    if isinstance(acoustic, Batch):
        batch, single = acoustic, False
    else:
        single = True
        batch = Batch()
        if acoustic is not None:
            batch.acoustic = np.asarray(acoustic, dtype=np.float64)[None]
            batch.acoustic_lengths = np.array([len(acoustic)])
        if lexical is not None:
            batch.lexical = np.asarray(lexical, dtype=np.float64)[None]
            batch.lexical_lengths = np.array([len(lexical)])
    spec = params.spec
    emb = embed(params, batch)
    emo = head_forward(params, "emotion", spec.head, emb)
    conf = None
    if spec.adversarial:
        conf = head_forward(params, "confound", spec.head, nc.grad_reverse(emb, GrlConfig(spec.lam)))
    if single:
        emo = nc.reshape(emo, (emo.shape[-1],))
        emb = nc.reshape(emb, (emb.shape[-1],))
        if conf is not None:
            conf = nc.reshape(conf, (conf.shape[-1],))
    return ForwardOutput(emo, conf, emb)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: NetworkParams, path):
    """Write ``MAGIC | u64 header length | JSON header | little-endian float64 payloads``.

    The header holds the spec, its fingerprint and a directory of
    ``{name, shape, offset}`` with offsets in bytes from the payload start.
    """
    directory = []
    offset = 0
    for name, t in params.tensors.items():
        directory.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.value.size * 8
    header = json.dumps(
        {"fingerprint": params.fingerprint, "spec": params.spec.to_dict(), "tensors": directory},
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    for t in params.tensors.values():
        buf.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path, spec: VariantSpec | None = None) -> NetworkParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(blob[16 : 16 + hlen])
    stored = VariantSpec.from_dict(header["spec"])
    if stored.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: header fingerprint does not match stored spec")
    if spec is not None and spec.fingerprint() != header["fingerprint"]:
        raise CheckpointError(
            f"{path}: fingerprint {header['fingerprint']} does not match requested spec {spec.fingerprint()}"
        )
    payload = blob[16 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"]))
        start, end = entry["offset"], entry["offset"] + 8 * n
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(payload[start:end], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        tensors[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
    expected = build_variant_shapes(stored)
    if {k: tuple(v) for k, v in expected.items()} != {k: t.shape for k, t in tensors.items()}:
        raise CheckpointError(f"{path}: tensor directory inconsistent with spec")
    return NetworkParams(stored, tensors)


def build_variant_shapes(spec: VariantSpec):
    return {k: v.shape for k, v in build_variant(spec, 0).tensors.items()}


def with_mode(spec: VariantSpec, training_mode, lam=None):
    """Same architecture, different training mode."""
    if training_mode == "adversarial" and lam is None:
        lam = spec.lam if spec.lam is not None else 0.6
    return replace(spec, training_mode=training_mode, lam=lam if training_mode == "adversarial" else None)
