"""Command line front end: synthesize, featurize, train, evaluate, analyze.

Every command reads an optional JSON config; flags override config keys.
Failures print one JSON line to stderr and exit with 2 (config), 3 (data)
or 4 (numeric/training failure).
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import hashlib
import json
import logging
import multiprocessing as mp
import os
import sys
from dataclasses import fields

import numpy as np

from . import data as D
from . import evaluation as E
from . import features as F
from . import model as M
from . import netcore as nc
from . import train as T

log = logging.getLogger("deconfound")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
APS_MIN_RUNS = 15
QUESTIONS = ("q1", "q2", "q3", "q4", "q5", "q6")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


def config_hash(cfg: dict) -> str:
    """Hash of everything that can change results (``out`` and ``jobs`` excluded)."""
    keep = {k: v for k, v in cfg.items() if k not in ("out", "jobs")}
    return hashlib.sha256(json.dumps(keep, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def load_config(args) -> dict:
    cfg = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        base = os.path.dirname(os.path.abspath(args.config))
        for key in ("manifest", "target_manifest", "embeddings", "lexicon"):
            if isinstance(cfg.get(key), str) and not os.path.isabs(cfg[key]):
                cfg[key] = os.path.join(base, cfg[key])
    for key in ("manifest", "target_manifest", "embeddings", "lexicon", "question", "ledgers"):
        v = getattr(args, key, None)
        if v:
            cfg[key] = v
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["out"] = args.out
    cfg["jobs"] = args.jobs if args.jobs is not None else cfg.get("jobs", 1)
    if not cfg.get("out"):
        raise ConfigError("no output directory (use --out or the 'out' key)")
    return cfg


def _require_paths(cfg, *keys):
    for key in keys:
        path = cfg.get(key)
        if not path:
            raise ConfigError(f"missing required key {key!r}")
        paths = path if isinstance(path, list) else [path]
        for p in paths:
            if not os.path.exists(p):
                raise ConfigError(f"{key}: file not found: {p}")


def _dataclass_kwargs(cls, d, what):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {what} keys {sorted(unknown)}")
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _seeds(cfg):
    seeds = cfg.get("seeds", [0, 1, 2])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("'seeds' must be a non-empty list of integers")
    if "seed" in cfg:
        seeds = [cfg["seed"] + i for i in range(len(seeds))]
    return seeds


def _train_config(cfg):
    try:
        tc = T.TrainConfig(**_dataclass_kwargs(T.TrainConfig, cfg.get("train", {}), "train"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train config: {exc}") from None
    return tc


def _spec(cfg, lexical_dim=300):
    d = dict(cfg.get("spec") or {})
    try:
        if "acoustic" in d or "lexical" in d or "head" in d:
            d.setdefault("lexical_dim", lexical_dim)
            spec = M.VariantSpec.from_dict(d)
        else:
            d.setdefault("lexical_dim", lexical_dim)
            spec = M.VariantSpec.create(**d)
        spec.validate()
    except (TypeError, M.SpecError) as exc:
        raise ConfigError(f"spec: {exc}") from None
    return spec


# ---------------------------------------------------------------- io helpers


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_jsonl(path, rows):
    _atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _write_json(path, obj):
    _atomic_write(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


class EventLog:
    """Line-delimited events; no timestamps so reruns compare equal."""

    def __init__(self, path, chash):
        self.path, self.chash, self.rows = path, chash, []

    def __call__(self, event, **kw):
        row = {"event": event, "config_hash": self.chash, **kw}
        self.rows.append(row)
        log.info(json.dumps(row, sort_keys=True))

    def flush(self):
        _write_jsonl(self.path, self.rows)


def _embedding_table(cfg):
    if cfg.get("embeddings"):
        return F.EmbeddingTable.load(cfg["embeddings"])
    return None


# ---------------------------------------------------------------- synthesize


def cmd_synthesize(cfg) -> dict:
    """Write a synthetic manifest, acoustic feature files and the word vectors."""
    sd = dict(cfg.get("synthetic", {}))
    if "seed" in cfg:
        sd["seed"] = cfg["seed"]
    try:
        scfg = D.SyntheticConfig(**_dataclass_kwargs(D.SyntheticConfig, sd, "synthetic"))
    except D.DataError as exc:
        raise ConfigError(str(exc)) from None
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    chash = config_hash(cfg)
    utts = D.generate_synthetic_corpus(scfg)
    D.write_manifest(utts, os.path.join(out, "manifest.jsonl"), feature_dir=os.path.join(out, "features"))
    D.synthetic_embedding_table(scfg).save(os.path.join(out, "embeddings.txt"))
    chi2, dof, p = D.chi_square_independence(utts, "activation", "confound")
    meta = {"config_hash": chash, "synthetic": sd, "utterances": len(utts),
            "activation_confound_chi2": chi2, "activation_confound_dof": dof,
            "activation_confound_p": p}
    _write_json(os.path.join(out, "synthesize.json"), meta)
    return meta


# ---------------------------------------------------------------- featurize


def cmd_featurize(cfg) -> dict:
    """Acoustic MFBs (session z-normalised) from audio, lexical category vectors from tokens."""
    _require_paths(cfg, "manifest")
    for key in ("embeddings", "lexicon"):
        if cfg.get(key):
            _require_paths(cfg, key)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    chash = config_hash(cfg)
    base = os.path.dirname(os.path.abspath(cfg["manifest"]))
    utts = D.read_manifest(cfg["manifest"])
    n_audio = 0
    for u in utts:
        if u.audio_path:
            wav = F.read_wav(os.path.join(base, u.audio_path))
            u.acoustic = F.compute_mfb(wav)
            n_audio += 1
    if n_audio:
        F.znormalize_utterances([u for u in utts if u.audio_path])
    lexicon = F.CategoryLexicon.load(cfg["lexicon"]) if cfg.get("lexicon") else F.CategoryLexicon.default()
    table = _embedding_table(cfg)
    lex_rows, oov, total = [], 0, 0
    for u in utts:
        if u.tokens is None:
            continue
        vec = F.lexical_category_vector(u.tokens, lexicon, u.duration_s)
        lex_rows.append({"id": u.id, "features": vec.tolist()})
        if table is not None:
            total += len(u.tokens)
            oov += sum(1 for t in u.tokens if t not in table)
    for u in utts:
        if u.audio_path:
            u.audio_path = os.path.relpath(os.path.join(base, u.audio_path), os.path.abspath(out))
    D.write_manifest(utts, os.path.join(out, "manifest.jsonl"), feature_dir=os.path.join(out, "features"))
    _write_jsonl(os.path.join(out, "lexical_features.jsonl"), lex_rows)
    meta = {"config_hash": chash, "utterances": len(utts), "acoustic_extracted": n_audio,
            "lexical_rows": len(lex_rows), "feature_names": list(F.FEATURE_NAMES),
            "oov_rate": (oov / total) if total else None}
    _write_json(os.path.join(out, "featurize.json"), meta)
    return meta


# ---------------------------------------------------------------- train

_WORK = {}  # shared with forked workers


def _run_one(job):
    spec_d, seed = job
    spec = M.VariantSpec.from_dict(spec_d)
    splits, tc, probe = _WORK["splits"], _WORK["tc"], _WORK["probe"]
    rec = T.train_run(spec, splits, tc, seed)
    probe_uar = T.probe_confound(rec.params, splits, tc, seed).test_uar if probe else None
    return rec, probe_uar


def _map(jobs, n_workers):
    if n_workers <= 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    try:
        ctx = mp.get_context("fork")
    except ValueError:
        return [_run_one(j) for j in jobs]
    with cf.ProcessPoolExecutor(max_workers=n_workers, mp_context=ctx) as pool:
        return list(pool.map(_run_one, jobs))


def _load_training_data(cfg, spec):
    _require_paths(cfg, "manifest")
    utts = D.read_manifest(cfg["manifest"])
    utts = [u for u in utts if u.labels.get(spec.emotion_target) is not None
            or getattr(u, spec.emotion_target) is not None]
    if cfg.get("duration_filter", False):
        utts = D.filter_by_duration(utts)
    if not utts:
        raise D.DataError("no usable utterances in manifest")
    plans = D.make_speaker_independent_folds(utts, cfg.get("folds", 5), seed=cfg.get("split_seed", 0))
    fold = cfg.get("fold", 0)
    if not 0 <= fold < len(plans):
        raise ConfigError(f"fold {fold} outside 0..{len(plans) - 1}")
    plan = plans[fold]
    D.assign_labels(utts, plan.select(utts, "train"))
    table = _embedding_table(cfg)
    if "lexical" in spec.streams and table is None and any(u.lexical is None for u in utts):
        raise ConfigError(f"{spec.modality} model needs an 'embeddings' file")
    splits = T.splits_from_plan(utts, plan, spec.emotion_target, table, spec.streams)
    for part in (splits.train, splits.validation, splits.test):
        for s in spec.streams:
            if not part.has(s):
                raise D.DataError(f"modality mismatch: {spec.modality} model needs {s} inputs for every utterance")
    return utts, splits, table


def _entry(rec, ckpt, chash, probe_uar, splits, admissible):
    e = T.ledger_entry(rec, checkpoint=ckpt, config_hash=chash, tag=rec.spec.training_mode)
    te = splits.test
    e.update({
        "val_confound_uar": rec.val_confound_uar,
        "confound_chance": rec.confound_chance,
        "admissible": admissible,
        "probe_uar": probe_uar,
        "train_ids": list(rec.train_ids),
        "test_ids": list(te.ids),
        "test_speakers": list(te.speakers),
        "test_labels": te.labels["emotion"].tolist(),
        "test_confound": te.labels["confound"].tolist(),
        "test_probs": rec.test_probs["emotion"].tolist(),
        "test_uar": T._uar(te.labels["emotion"], rec.test_probs["emotion"], 3),
    })
    return e


def cmd_train(cfg) -> dict:
    """Train the configured spec (or grid winner) for every seed; write ledger and checkpoints."""
    if ("spec" in cfg) == bool(cfg.get("grid")):
        raise ConfigError("set exactly one of 'spec' and 'grid'")
    tc = _train_config(cfg)
    seeds = _seeds(cfg)
    table = _embedding_table(cfg)
    lexical_dim = table.dim if table is not None else 300
    base = _spec(cfg if "spec" in cfg else {"spec": cfg.get("grid_base", {})}, lexical_dim)
    utts, splits, table = _load_training_data(cfg, base)
    out = cfg["out"]
    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    chash = config_hash(cfg)
    events = EventLog(os.path.join(out, "events.jsonl"), chash)
    events("start", command="train", seeds=seeds, train=len(splits.train), validation=len(splits.validation),
           test=len(splits.test))
    spec = base
    if cfg.get("grid"):
        grid = M.GRID if cfg["grid"] is True else {**M.GRID, **cfg["grid"]}
        spec, rows = T.grid_search(base, grid, splits, tc)
        _write_jsonl(os.path.join(out, "grid.jsonl"),
                     [{**{k: v for k, v in r.items() if k != "spec"}, "spec": r["spec"].to_dict(),
                       "fingerprint": r["spec"].fingerprint()} for r in rows])
        events("grid_done", points=len(rows), chosen=spec.fingerprint())
    lams = cfg.get("lams") if spec.adversarial else None
    variants = [M.with_mode(spec, "adversarial", l) for l in lams] if lams else [spec]
    _WORK.update(splits=splits, tc=tc, probe=bool(cfg.get("probe")))
    jobs = [(v.to_dict(), s) for s in seeds for v in variants]
    results = _map(jobs, int(cfg.get("jobs", 1)))
    entries = []
    for i, seed in enumerate(seeds):
        group = results[i * len(variants) : (i + 1) * len(variants)]
        recs = [r for r, _ in group]
        if spec.adversarial:
            chosen = T.select_adversarial_checkpoint(recs, tc.chance_tol) if lams else recs[0]
        else:
            chosen = recs[0]
        probe_uar = group[recs.index(chosen)][1]
        admissible = None
        if spec.adversarial:
            admissible = abs(chosen.val_confound_uar - chosen.confound_chance) <= tc.chance_tol + 1e-12
        name = f"{chosen.spec.fingerprint()}-s{seed}.ckpt"
        M.save_checkpoint(chosen.params, os.path.join(out, "checkpoints", name))
        entries.append(_entry(chosen, os.path.join("checkpoints", name), chash, probe_uar, splits, admissible))
        events("run_done", fingerprint=chosen.spec.fingerprint(), seed=seed, best_epoch=chosen.best_epoch,
               epochs=chosen.epochs_run, test_uar=entries[-1]["test_uar"])
    _write_jsonl(os.path.join(out, "runs.jsonl"), entries)
    ens = T.average_argmax([np.asarray(e["test_probs"]) for e in entries])
    summary = {
        "config_hash": chash,
        "fingerprint": spec.fingerprint(),
        "runs": len(entries),
        "ensemble_test_uar": E.uar_from_labels(splits.test.labels["emotion"], ens, 3, present_only=True),
        "mean_probe_uar": (float(np.mean([e["probe_uar"] for e in entries])) if cfg.get("probe") else None),
    }
    _write_json(os.path.join(out, "train_summary.json"), summary)
    events("done", **{k: v for k, v in summary.items() if k != "config_hash"})
    events.flush()
    return summary


# ---------------------------------------------------------------- evaluate


def _ledger_paths(cfg):
    paths = cfg.get("ledgers") or []
    if isinstance(paths, str):
        paths = [paths]
    if not paths:
        raise ConfigError("no run ledgers given")
    for p in paths:
        if not os.path.exists(p):
            raise ConfigError(f"ledger not found: {p}")
    return paths


def _read_ledgers(paths):
    entries = []
    for p in paths:
        for e in T.read_ledger(p):
            e["_ledger_dir"] = os.path.dirname(os.path.abspath(p))
            entries.append(e)
    if not entries:
        raise D.DataError("ledgers contain no runs")
    return entries


def cmd_evaluate(cfg) -> dict:
    """Score ledger checkpoints on a target manifest; compare modes when both are present."""
    _require_paths(cfg, "target_manifest")
    entries = _read_ledgers(_ledger_paths(cfg))
    table = _embedding_table(cfg)
    target_utts = D.read_manifest(cfg["target_manifest"])
    D.assign_labels(target_utts)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    chash = config_hash(cfg)
    label = cfg.get("target_name", os.path.basename(cfg["target_manifest"]))
    rows, by_mode = [], {"normal": [], "adversarial": []}
    examples = None
    for e in entries:
        params = M.load_checkpoint(os.path.join(e["_ledger_dir"], e["checkpoint"]))
        spec = params.spec
        if examples is None:
            examples = T.prepare_examples(target_utts, spec.emotion_target, table, ("acoustic", "lexical"))
        try:
            E._check_modality(spec, examples)
        except E.EvaluationError as exc:
            raise D.DataError(str(exc)) from None
        overlap = set(examples.ids) & set(e.get("train_ids", []))
        if overlap:
            raise D.DataError(f"{len(overlap)} target utterances were used in training")
        probs = T.predict_probs(params, examples)["emotion"]
        y = examples.labels["emotion"]
        rows.append({"fingerprint": e["fingerprint"], "mode": spec.training_mode, "seed": e["seed"],
                     "target": label, "ids": list(examples.ids), "speakers": list(examples.speakers),
                     "labels": y.tolist(), "confound": examples.labels["confound"].tolist(),
                     "probs": probs.tolist(), "uar": T._uar(y, probs, 3), "config_hash": chash})
        by_mode[spec.training_mode].append(probs)
    _write_jsonl(os.path.join(out, "evaluation.jsonl"), rows)
    report = {"config_hash": chash, "target": label,
              "runs": [{k: r[k] for k in ("fingerprint", "mode", "seed", "uar")} for r in rows]}
    if by_mode["normal"] and by_mode["adversarial"]:
        cmp = E.compare_on_target(by_mode["normal"], by_mode["adversarial"], examples.labels["emotion"],
                                  examples.speakers, label)
        report["comparison"] = cmp.to_dict()
    _write_json(os.path.join(out, "evaluation_report.json"), report)
    return report


# ---------------------------------------------------------------- analyze


def _split_modes(entries, key="tag"):
    groups = {"normal": [], "adversarial": []}
    for e in entries:
        mode = e.get("mode") or e.get(key) or (e.get("spec") or {}).get("training_mode")
        if mode not in groups:
            raise D.DataError(f"ledger row with unknown training mode {mode!r}")
        groups[mode].append(e)
    return groups


def _same_samples(rows, key):
    ids = rows[0][key]
    for r in rows[1:]:
        if r[key] != ids:
            raise D.DataError("runs were scored on different samples")
    return ids


def _analyze_q1(entries, cfg):
    g = _split_modes(entries)
    out = {}
    for mode, rows in g.items():
        vals = [r["probe_uar"] for r in rows if r.get("probe_uar") is not None]
        out[mode] = {"runs": len(vals), "mean_probe_uar": float(np.mean(vals)) if vals else None}
    if not any(v["runs"] for v in out.values()):
        raise D.DataError("no probe results in ledgers (train with \"probe\": true)")
    both = [out[m]["mean_probe_uar"] for m in ("normal", "adversarial")]
    out["delta"] = None if None in both else both[1] - both[0]
    return out


def _analyze_q2(entries, cfg):
    g = _split_modes(entries)
    if not g["normal"] or not g["adversarial"]:
        raise D.DataError("q2 needs both normal and adversarial runs")
    res = {}
    for mode, rows in g.items():
        _same_samples(rows, "test_ids")
        ens = T.average_argmax([np.asarray(r["test_probs"]) for r in rows])
        res[mode] = {"runs": len(rows), "mean_seed_uar": float(np.mean([r["test_uar"] for r in rows])),
                     "ensemble_uar": E.uar_from_labels(rows[0]["test_labels"], ens, 3, present_only=True)}
    res["delta"] = res["adversarial"]["ensemble_uar"] - res["normal"]["ensemble_uar"]
    return res


def _analyze_q3(entries, cfg):
    g = _split_modes(entries)
    if not g["normal"] or not g["adversarial"]:
        raise D.DataError("q3 needs both normal and adversarial runs")
    ids = _same_samples(g["normal"] + g["adversarial"], "test_ids")
    preds = {m: T.average_argmax([np.asarray(r["test_probs"]) for r in rows]) for m, rows in g.items()}
    ref = g["normal"][0]
    deltas = E.confusion_delta_by_group(ref["test_labels"], preds["normal"], preds["adversarial"],
                                        ref["test_confound"])
    return {"samples": len(ids), "by_confound": {str(k): v.round(6).tolist() for k, v in deltas.items()}}


def _analyze_transfer(entries, cfg):
    g = _split_modes(entries)
    if not g["normal"] or not g["adversarial"]:
        raise D.DataError("transfer analysis needs evaluation rows for both modes")
    rows = g["normal"] + g["adversarial"]
    _same_samples(rows, "ids")
    rep = E.compare_on_target([np.asarray(r["probs"]) for r in g["normal"]],
                              [np.asarray(r["probs"]) for r in g["adversarial"]],
                              rows[0]["labels"], rows[0]["speakers"], rows[0].get("target", "target"))
    d = rep.to_dict()
    sig = rep.test is not None and rep.test.p < 0.05
    d["table"] = E.format_transfer_table([(d["target"], d["normal_uar"], d["adversarial_uar"], sig)])
    return d


def _analyze_q6(entries, cfg):
    g = _split_modes(entries)
    for mode, rows in g.items():
        if len(rows) < APS_MIN_RUNS:
            raise ConfigError(f"run-count error: q6 needs at least {APS_MIN_RUNS} {mode} runs, ledgers hold {len(rows)}")
    ids = _same_samples(g["normal"] + g["adversarial"], "test_ids")
    y = np.asarray(g["normal"][0]["test_labels"])
    pa = np.stack([np.asarray(r["test_probs"]).argmax(axis=1) for r in g["adversarial"]])
    pn = np.stack([np.asarray(r["test_probs"]).argmax(axis=1) for r in g["normal"]])
    k = min(len(pa), len(pn))
    records = E.aps_from_predictions(y, pa[:k], pn[:k], ids)
    _require_paths(cfg, "manifest")
    lexicon = F.CategoryLexicon.load(cfg["lexicon"]) if cfg.get("lexicon") else F.CategoryLexicon.default()
    utts = {u.id: u for u in D.read_manifest(cfg["manifest"], load_features=False)}
    missing = [i for i in ids if i not in utts or utts[i].tokens is None]
    if missing:
        raise D.DataError(f"{len(missing)} scored utterances have no transcript in the manifest")
    feats = {i: F.lexical_category_vector(utts[i].tokens, lexicon, utts[i].duration_s) for i in ids}
    res = E.aps_correlation_report(records, feats, list(F.FEATURE_NAMES))
    return {
        "runs_per_model": k,
        "rows": [{"feature": c.feature, "r": c.r, "p": c.p_raw, "p_adjusted": c.p_adjusted, "code": c.code,
                  "defined": c.defined} for c in res],
        "table": E.format_correlation_table(res),
    }


_ANALYSES = {"q1": _analyze_q1, "q2": _analyze_q2, "q3": _analyze_q3, "q4": _analyze_transfer,
             "q5": _analyze_transfer, "q6": _analyze_q6}


def cmd_analyze(cfg) -> dict:
    q = cfg.get("question")
    if q not in QUESTIONS:
        raise ConfigError(f"question must be one of {', '.join(QUESTIONS)}, got {q!r}")
    entries = _read_ledgers(_ledger_paths(cfg))
    res = _ANALYSES[q](entries, cfg)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    res = {"question": q, "config_hash": config_hash(cfg), **res}
    _write_json(os.path.join(out, f"analysis_{q}.json"), res)
    return res


# ---------------------------------------------------------------- entry point


COMMANDS = {"synthesize": cmd_synthesize, "featurize": cmd_featurize, "train": cmd_train,
            "evaluate": cmd_evaluate, "analyze": cmd_analyze}


def build_parser():
    p = argparse.ArgumentParser(prog="deconfound", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="base seed (overrides config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="worker processes for independent runs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synthesize", parents=[common], help="generate a synthetic confounded corpus")
    f = sub.add_parser("featurize", parents=[common], help="extract MFB and lexical features")
    f.add_argument("--manifest")
    f.add_argument("--embeddings")
    f.add_argument("--lexicon")
    t = sub.add_parser("train", parents=[common], help="train runs and write a ledger")
    t.add_argument("--manifest")
    t.add_argument("--embeddings")
    e = sub.add_parser("evaluate", parents=[common], help="score trained runs on a target manifest")
    e.add_argument("--ledgers", nargs="+")
    e.add_argument("--target-manifest", dest="target_manifest")
    e.add_argument("--embeddings")
    a = sub.add_parser("analyze", parents=[common], help="research-question reports")
    a.add_argument("question", choices=QUESTIONS)
    a.add_argument("--ledgers", nargs="+")
    a.add_argument("--manifest")
    a.add_argument("--lexicon")
    return p


def _fail(kind, code, exc):
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        result = COMMANDS[args.command](cfg)
    except (ConfigError, M.SpecError) as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except (D.DataError, F.FeatureError, M.CheckpointError, E.EvaluationError, FileNotFoundError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except (T.TrainingError, nc.NumericError) as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    print(json.dumps({"command": args.command, "ok": True, "config_hash": result.get("config_hash"),
                      "out": cfg["out"]}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
