"""Training recipe, checkpoint selection, ensembling and the frozen-representation probe."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from . import netcore as nc
from .evaluation import ConfusionMatrix, uar
from .features import embed_tokens

log = logging.getLogger(__name__)

CE_EPS = 1e-12


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


class SelectionError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    patience: int = 5
    lr: float = 1e-3
    decay: float = 0.9
    eps: float = 1e-8
    batch_size: int = 16
    eval_batch_size: int = 64
    seeds: tuple = (0, 1, 2)
    lambda_grid: tuple = (0.3, 0.6, 0.8)
    chance_tol: float = 0.05

    def __post_init__(self):
        if not 0 < self.patience < self.max_epochs:
            raise ValueError("need 0 < patience < max_epochs")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")

    def to_dict(self):
        d = self.__dict__.copy()
        d["seeds"] = list(self.seeds)
        d["lambda_grid"] = list(self.lambda_grid)
        return d

    def fingerprint(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- examples


@dataclass
class Examples:
    """Model-ready inputs and integer labels for a list of utterances."""

    ids: list
    speakers: list
    acoustic: list | None
    lexical: list | None
    labels: dict

    def __len__(self):
        return len(self.ids)

    def has(self, stream):
        return getattr(self, stream) is not None

    def subset(self, idx):
        idx = list(idx)
        return Examples(
            [self.ids[i] for i in idx],
            [self.speakers[i] for i in idx],
            None if self.acoustic is None else [self.acoustic[i] for i in idx],
            None if self.lexical is None else [self.lexical[i] for i in idx],
            {k: v[idx] for k, v in self.labels.items()},
        )

    def lengths(self):
        parts = [np.array([len(s) for s in seqs]) for seqs in (self.acoustic, self.lexical) if seqs is not None]
        return np.maximum.reduce(parts) if parts else np.zeros(len(self), dtype=int)

    def batch(self, idx) -> M.Batch:
        return M.make_batch(
            None if self.acoustic is None else [self.acoustic[i] for i in idx],
            None if self.lexical is None else [self.lexical[i] for i in idx],
        )


def prepare_examples(utterances, emotion_target="activation", table=None, streams=("acoustic", "lexical")):
    """Collect feature sequences and labels; a stream is ``None`` unless every utterance has it."""
    ac = None
    if "acoustic" in streams and all(u.acoustic is not None for u in utterances):
        ac = [u.acoustic for u in utterances]
    lx = None
    if "lexical" in streams:
        if all(u.lexical is not None for u in utterances):
            lx = [u.lexical for u in utterances]
        elif table is not None and all(u.tokens for u in utterances):
            lx = [embed_tokens(u.tokens, table) for u in utterances]
    labels = {
        "emotion": np.array([u.labels[emotion_target] for u in utterances], dtype=np.int64),
        "confound": np.array([u.labels.get("confound", -1) for u in utterances], dtype=np.int64),
    }
    for key in ("activation", "valence"):
        if all(key in u.labels for u in utterances):
            labels[key] = np.array([u.labels[key] for u in utterances], dtype=np.int64)
    return Examples([u.id for u in utterances], [u.speaker_id for u in utterances], ac, lx, labels)


@dataclass
class DataSplits:
    train: Examples
    validation: Examples
    test: Examples | None = None


def splits_from_plan(utterances, plan, emotion_target="activation", table=None, streams=("acoustic", "lexical")):
    parts = [plan.select(utterances, role) for role in ("train", "validation", "test")]
    ex = [prepare_examples(p, emotion_target, table, streams) if p else None for p in parts]
    return DataSplits(*ex)


# ---------------------------------------------------------------- optimiser / losses


def rmsprop_step(param, grad, state, lr=1e-3, decay=0.9, eps=1e-8):
    """Return ``(param', state')`` after one RMSProp update."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or np.shape(state) != param.shape:
        raise ValueError("param, grad and state shapes differ")
    state = decay * np.asarray(state, dtype=np.float64) + (1.0 - decay) * grad * grad
    return param - lr * grad / np.sqrt(state + eps), state


def class_weights(labels, n_classes):
    """Inverse training frequency, scaled to mean 1 over the classes present."""
    counts = np.bincount(labels[labels >= 0], minlength=n_classes).astype(np.float64)
    w = np.zeros(n_classes)
    present = counts > 0
    w[present] = 1.0 / counts[present]
    w[present] /= w[present].mean()
    w[~present] = 1.0
    return w


def weighted_ce_numpy(probs, targets, weights):
    p = probs[np.arange(len(targets)), targets]
    return float(np.mean(-weights[targets] * np.log(np.maximum(p, CE_EPS))))


class EarlyStopping:
    """Patience counter on a loss that should decrease (epochs are 1-based)."""

    def __init__(self, patience=5, max_epochs=50):
        self.patience = patience
        self.max_epochs = max_epochs
        self.best_loss = np.inf
        self.best_epoch = 0
        self.epoch = 0

    def step(self, loss) -> bool:
        """Record one epoch; True means stop now."""
        self.epoch += 1
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = self.epoch
        if self.epoch >= self.max_epochs:
            return True
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self):
        return self.best_epoch == self.epoch


def run_trace(losses, patience=5, max_epochs=50):
    """Replay a loss trace through :class:`EarlyStopping`; returns ``(epochs_run, best_epoch)``."""
    es = EarlyStopping(patience, max_epochs)
    for loss in losses:
        if es.step(loss):
            break
    return es.epoch, es.best_epoch


# ---------------------------------------------------------------- run records


@dataclass
class RunRecord:
    seed: int
    trace: list
    best_epoch: int
    params: M.NetworkParams | None = None
    spec: M.VariantSpec | None = None
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)
    val_probs: dict = field(default_factory=dict)
    test_probs: dict = field(default_factory=dict)
    confound_chance: float = 1 / 3

    @property
    def best(self):
        return self.trace[self.best_epoch - 1]

    @property
    def val_emotion_loss(self):
        return self.best["val_emotion_loss"]

    @property
    def val_emotion_uar(self):
        return self.best["val_emotion_uar"]

    @property
    def val_confound_uar(self):
        return self.best.get("val_confound_uar")

    @property
    def epochs_run(self):
        return len(self.trace)

    def metric_lines(self):
        """Deterministic text form of the per-epoch metrics."""
        return [json.dumps({"epoch": i + 1, **m}, sort_keys=True) for i, m in enumerate(self.trace)]


def predict_probs(params: M.NetworkParams, examples: Examples, batch_size=64):
    """Class probabilities for every example, in example order."""
    out = {"emotion": [], "confound": []}
    n = len(examples)
    for start in range(0, n, batch_size):
        idx = list(range(start, min(n, start + batch_size)))
        fo = M.forward(params, examples.batch(idx))
        out["emotion"].append(fo.emotion_probs.value)
        if fo.confound_probs is not None:
            out["confound"].append(fo.confound_probs.value)
    return {k: np.concatenate(v) for k, v in out.items() if v}


def embeddings(params: M.NetworkParams, examples: Examples, batch_size=64):
    parts = []
    for start in range(0, len(examples), batch_size):
        idx = list(range(start, min(len(examples), start + batch_size)))
        parts.append(M.embed(params, examples.batch(idx)).value)
    return np.concatenate(parts)


def _uar(y, probs, n_classes):
    return uar(ConfusionMatrix.from_labels(y, probs.argmax(axis=1), n_classes), present_only=True)


def evaluate(params, examples: Examples, w_emotion, w_confound=None, batch_size=64):
    probs = predict_probs(params, examples, batch_size)
    y = examples.labels["emotion"]
    m = {
        "val_emotion_loss": weighted_ce_numpy(probs["emotion"], y, w_emotion),
        "val_emotion_uar": _uar(y, probs["emotion"], 3),
    }
    if "confound" in probs:
        yc = examples.labels["confound"]
        c = probs["confound"].shape[1]
        m["val_confound_loss"] = weighted_ce_numpy(probs["confound"], yc, w_confound)
        m["val_confound_uar"] = _uar(yc, probs["confound"], c)
    return m, probs


def _batches(lengths, batch_size, rng):
    """Shuffle, bucket neighbouring lengths together, shuffle bucket order."""
    order = rng.permutation(len(lengths))
    chunk = batch_size * 8
    batches = []
    for s in range(0, len(order), chunk):
        block = sorted(order[s : s + chunk], key=lambda i: (lengths[i], i))
        batches += [block[j : j + batch_size] for j in range(0, len(block), batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def train_run(spec: M.VariantSpec, splits: DataSplits, cfg: TrainConfig, seed: int,
              params: M.NetworkParams | None = None) -> RunRecord:
    """Train one seed with early stopping on the emotion validation loss.

    Total loss is emotion CE plus confound CE in adversarial mode; the
    gradient reversal node supplies the sign flip. The weights from the
    epoch with the lowest emotion validation loss are restored at the end.
    """
    tr, va = splits.train, splits.validation
    if set(tr.speakers) & set(va.speakers):
        raise TrainingError("train and validation share speakers")
    if splits.test is not None and set(splits.test.speakers) & (set(tr.speakers) | set(va.speakers)):
        raise TrainingError("test speakers overlap train/validation")
    params = params or M.build_variant(spec, seed)
    names = params.names()
    state = {k: np.zeros_like(params[k].value) for k in names}
    n_conf = spec.confound_classes
    w_emo = class_weights(tr.labels["emotion"], 3)
    w_conf = class_weights(tr.labels["confound"], n_conf) if spec.adversarial else None
    if spec.adversarial and (tr.labels["confound"] < 0).any():
        raise TrainingError("adversarial training needs confound labels on every training example")
    rng = np.random.default_rng([seed, 104729])
    lengths = tr.lengths()
    es = EarlyStopping(cfg.patience, cfg.max_epochs)
    trace = []
    best_values = None
    while True:
        for bi, idx in enumerate(_batches(lengths, cfg.batch_size, rng)):
            batch = tr.batch(idx)
            try:
                with nc.Tape() as tape:
                    out = M.forward(params, batch)
                    loss = nc.weighted_cross_entropy(out.emotion_probs, tr.labels["emotion"][idx], w_emo)
                    if spec.adversarial:
                        closs = nc.weighted_cross_entropy(out.confound_probs, tr.labels["confound"][idx], w_conf)
                        loss = nc.add(loss, closs)
                grads = nc.backprop(tape, loss, params.tensors)
            except nc.NumericError as exc:
                raise DivergenceError(f"seed {seed} epoch {es.epoch + 1} batch {bi}: {exc}") from exc
            if not np.isfinite(loss.value):
                raise DivergenceError(f"seed {seed} epoch {es.epoch + 1} batch {bi}: non-finite loss")
            for k in names:
                g = grads[k]
                s = state[k]
                s *= cfg.decay
                s += (1.0 - cfg.decay) * g * g
                params[k].value -= cfg.lr * g / np.sqrt(s + cfg.eps)
                params[k].grad = None
        metrics, _ = evaluate(params, va, w_emo, w_conf, cfg.eval_batch_size)
        trace.append(metrics)
        stop = es.step(metrics["val_emotion_loss"])
        if es.improved:
            best_values = {k: params[k].value.copy() for k in names}
        if stop:
            break
    for k in names:
        params[k].value = best_values[k]
    rec = RunRecord(
        seed=seed, trace=trace, best_epoch=es.best_epoch, params=params, spec=spec,
        train_ids=list(tr.ids), val_ids=list(va.ids),
        confound_chance=1.0 / max(1, len(np.unique(va.labels["confound"][va.labels["confound"] >= 0]))),
    )
    _, rec.val_probs = evaluate(params, va, w_emo, w_conf, cfg.eval_batch_size)
    if splits.test is not None:
        rec.test_ids = list(splits.test.ids)
        rec.test_probs = predict_probs(params, splits.test, cfg.eval_batch_size)
    return rec


def train_seeds(spec, splits, cfg, seeds=None):
    return [train_run(spec, splits, cfg, s) for s in (seeds if seeds is not None else cfg.seeds)]


# ---------------------------------------------------------------- selection / ensembling


def select_adversarial_checkpoint(records, tol=0.05):
    """Lowest emotion validation loss among runs whose confound UAR is at chance."""
    if not records:
        raise SelectionError("no records to choose from")
    ok = [r for r in records if abs(r.val_confound_uar - r.confound_chance) <= tol + 1e-12]
    if not ok:
        near = min(records, key=lambda r: abs(r.val_confound_uar - r.confound_chance))
        raise SelectionError(
            f"no run has chance-level confound UAR (|UAR - chance| <= {tol}); nearest miss: seed {near.seed}, "
            f"UAR {near.val_confound_uar:.4f} vs chance {near.confound_chance:.4f}"
        )
    return min(ok, key=lambda r: r.val_emotion_loss)


def average_argmax(prob_list):
    """Mean of the probability arrays, argmax with ties to the lower class index."""
    mean = np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in prob_list]), axis=0)
    return mean.argmax(axis=-1)


def ensemble_predict(records, which="test", head="emotion"):
    """Average per-class probabilities over runs, then argmax."""
    if not records:
        raise SelectionError("no records")
    ids = getattr(records[0], f"{which}_ids")
    for r in records[1:]:
        if getattr(r, f"{which}_ids") != ids:
            raise SelectionError("records were evaluated on different samples")
    return average_argmax([getattr(r, f"{which}_probs")[head] for r in records])


def enumerate_grid(base: M.VariantSpec, grid=None):
    """Every grid point for ``base``: branch hyperparameters shared per stream, head, lambda."""
    grid = grid or M.GRID
    bkeys = ("conv_layers", "kernel_width", "conv_width", "pool_width", "gru_layers", "gru_width")
    branches = [M.BranchHyper(**dict(zip(bkeys, vals))) for vals in itertools.product(*(grid[k] for k in bkeys))]
    heads = [M.HeadHyper(a, b) for a, b in itertools.product(grid["dense_layers"], grid["dense_width"])]
    lams = grid["lam"] if base.adversarial else (None,)
    per_stream = [branches] * len(base.streams)
    out = []
    for combo in itertools.product(*per_stream, heads, lams):
        *bs, head, lam = combo
        kw = dict(zip(base.streams, bs))
        out.append(replace(base, head=head, lam=lam, **kw))
    return out


def grid_search(base: M.VariantSpec, grid, splits: DataSplits, cfg: TrainConfig):
    """Pick the grid point with the best validation emotion UAR.

    Adversarial points must first have a mean validation confound UAR within
    ``cfg.chance_tol`` of chance. Returns ``(best_spec, table)`` where the
    table lists every point's mean metrics.
    """
    specs = enumerate_grid(base, grid)
    if not specs:
        raise SelectionError("empty grid")
    table = []
    for spec in specs:
        recs = train_seeds(spec, splits, cfg)
        row = {
            "spec": spec,
            "emotion_uar": float(np.mean([r.val_emotion_uar for r in recs])),
            "emotion_loss": float(np.mean([r.val_emotion_loss for r in recs])),
        }
        if spec.adversarial:
            cu = float(np.mean([r.val_confound_uar for r in recs]))
            row["confound_uar"] = cu
            row["admissible"] = abs(cu - recs[0].confound_chance) <= cfg.chance_tol + 1e-12
        table.append(row)
    pool = [r for r in table if r.get("admissible", True)]
    if not pool:
        raise SelectionError("no adversarial grid point reached chance-level confound UAR")
    best = max(pool, key=lambda r: (r["emotion_uar"], -r["emotion_loss"]))
    return best["spec"], table


# ---------------------------------------------------------------- probe


@dataclass
class ProbeResult:
    test_uar: float
    val_uar: float
    trace: list
    best_epoch: int
    test_pred: np.ndarray


def probe_confound(params: M.NetworkParams, splits: DataSplits, cfg: TrainConfig, seed=0) -> ProbeResult:
    """Train a fresh confound head on frozen embeddings and report its test UAR."""
    spec = params.spec
    n_conf = spec.confound_classes
    e_tr = embeddings(params, splits.train)
    e_va = embeddings(params, splits.validation)
    e_te = embeddings(params, splits.test)
    y_tr = splits.train.labels["confound"]
    y_va = splits.validation.labels["confound"]
    y_te = splits.test.labels["confound"]
    if (y_tr < 0).any() or (y_va < 0).any() or (y_te < 0).any():
        raise TrainingError("probe needs confound labels on every example")
    rng = np.random.default_rng([seed, 7])
    raw = M.head_params(rng, "probe", spec.head, e_tr.shape[1], n_conf)
    head = {k: nc.Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
    state = {k: np.zeros_like(v.value) for k, v in head.items()}
    w = class_weights(y_tr, n_conf)

    def run(x):
        return M.head_forward(head, "probe", spec.head, nc.Tensor(x))

    es = EarlyStopping(cfg.patience, cfg.max_epochs)
    trace, best = [], None
    while True:
        order = rng.permutation(len(y_tr))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            with nc.Tape() as tape:
                loss = nc.weighted_cross_entropy(run(e_tr[idx]), y_tr[idx], w)
            grads = nc.backprop(tape, loss, head)
            for k, t in head.items():
                st = state[k]
                st *= cfg.decay
                st += (1.0 - cfg.decay) * grads[k] ** 2
                t.value -= cfg.lr * grads[k] / np.sqrt(st + cfg.eps)
                t.grad = None
        pv = run(e_va).value
        m = {"val_loss": weighted_ce_numpy(pv, y_va, w), "val_uar": _uar(y_va, pv, n_conf)}
        trace.append(m)
        stop = es.step(m["val_loss"])
        if es.improved:
            best = {k: t.value.copy() for k, t in head.items()}
        if stop:
            break
    for k, t in head.items():
        t.value = best[k]
    pt = run(e_te).value
    return ProbeResult(_uar(y_te, pt, n_conf), trace[es.best_epoch - 1]["val_uar"], trace, es.best_epoch,
                       pt.argmax(axis=1))


def joint_confound_uar(spec: M.VariantSpec, splits: DataSplits, cfg: TrainConfig, seed=0):
    """Alternative probe: a confound head trained jointly behind a zero-lambda reversal.

    With lambda 0 the head learns from the shared embedding without pushing
    back on it, so the embedding is trained for emotion alone.
    """
    joint = M.with_mode(spec, "adversarial", lam=0.0)
    rec = train_run(joint, splits, cfg, seed)
    y = splits.test.labels["confound"]
    return _uar(y, rec.test_probs["confound"], spec.confound_classes), rec


# ---------------------------------------------------------------- ledger


def ledger_entry(rec: RunRecord, checkpoint=None, config_hash=None, tag=None):
    return {
        "tag": tag,
        "fingerprint": rec.spec.fingerprint() if rec.spec else None,
        "spec": rec.spec.to_dict() if rec.spec else None,
        "seed": rec.seed,
        "best_epoch": rec.best_epoch,
        "epochs_run": rec.epochs_run,
        "trace": rec.trace,
        "checkpoint": checkpoint,
        "config_hash": config_hash,
    }


def append_ledger(path, entries):
    with open(path, "a", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_ledger(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
