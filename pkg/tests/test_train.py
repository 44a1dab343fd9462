import numpy as np
import pytest

from deconfound import data as D
from deconfound import model as M
from deconfound import train as T

SMALL = M.BranchHyper(conv_layers=2, kernel_width=2, conv_width=4, pool_width=2, gru_layers=1, gru_width=4)


def test_epoch_cap_on_ever_improving_trace():
    losses = list(np.linspace(2.0, 0.1, 120))
    assert T.run_trace(losses) == (50, 50)


def test_patience_stops_five_epochs_after_best():
    losses = [1.0, 0.9, 0.8, 0.85, 0.81, 0.8, 0.9, 0.95, 0.5]
    # epoch 6 ties the best and does not count as an improvement
    assert T.run_trace(losses) == (8, 3)


def test_patience_resets_on_improvement():
    losses = [1.0, 1.1, 1.2, 1.3, 1.4, 0.9, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1]
    assert T.run_trace(losses) == (11, 6)


def test_trace_shorter_than_patience():
    assert T.run_trace([1.0, 2.0]) == (2, 1)


def test_class_weights():
    w = T.class_weights(np.array([0, 0, 1, 2]), 3)
    assert np.allclose(w, [0.6, 1.2, 1.2], rtol=0, atol=1e-15)
    w = T.class_weights(np.array([0, 0, 1, -1]), 3)
    assert np.allclose(w, [2 / 3, 4 / 3, 1.0], rtol=0, atol=1e-15)


def test_rmsprop_step_by_hand():
    p, s = T.rmsprop_step(np.array([1.0]), np.array([2.0]), np.array([0.0]))
    # s = 0.1 * 4 = 0.4; step = 1e-3 * 2 / sqrt(0.4 + 1e-8)
    assert s[0] == pytest.approx(0.4, abs=1e-15)
    assert p[0] == pytest.approx(1.0 - 2e-3 / np.sqrt(0.4 + 1e-8), abs=1e-15)


def fake(seed, loss, conf_uar, chance=1 / 3):
    return T.RunRecord(seed=seed, trace=[{"val_emotion_loss": loss, "val_emotion_uar": 0.5,
                                          "val_confound_uar": conf_uar}], best_epoch=1, confound_chance=chance)


def test_admissibility_rejects_far_from_chance():
    with pytest.raises(T.SelectionError, match="nearest miss"):
        T.select_adversarial_checkpoint([fake(0, 0.1, 0.45), fake(1, 0.2, 0.60)])


@pytest.mark.parametrize("conf_uar", [1 / 3 - 0.05, 1 / 3, 1 / 3 + 0.05, 0.30, 0.37])
def test_admissibility_accepts_band(conf_uar):
    best = T.select_adversarial_checkpoint([fake(0, 0.05, 0.45), fake(1, 0.3, conf_uar), fake(2, 0.4, 1 / 3)])
    assert best.seed == 1


def test_admissibility_two_class_chance():
    assert T.select_adversarial_checkpoint([fake(0, 0.1, 0.53, chance=0.5)]).seed == 0
    with pytest.raises(T.SelectionError):
        T.select_adversarial_checkpoint([fake(0, 0.1, 0.33, chance=0.5)])


def test_average_argmax_and_tie_break():
    a = np.array([[0.5, 0.3, 0.2], [0.2, 0.2, 0.6]])
    b = np.array([[0.1, 0.5, 0.4], [0.4, 0.4, 0.2]])
    c = np.array([[0.3, 0.4, 0.3], [0.3, 0.3, 0.4]])
    # row 0: means (0.3, 0.4, 0.3) -> 1; row 1: (0.3, 0.3, 0.4) -> 2
    assert T.average_argmax([a, b, c]).tolist() == [1, 2]
    tie = np.array([[0.4, 0.4, 0.2], [0.2, 0.4, 0.4], [1 / 3, 1 / 3, 1 / 3]])
    assert T.average_argmax([tie, tie, tie]).tolist() == [0, 1, 0]


def test_ensemble_predict_requires_same_samples():
    r1, r2 = fake(0, 0.1, 0.3), fake(1, 0.1, 0.3)
    r1.test_ids, r2.test_ids = ["a", "b"], ["a", "c"]
    r1.test_probs = r2.test_probs = {"emotion": np.eye(3)[:2]}
    with pytest.raises(T.SelectionError):
        T.ensemble_predict([r1, r2])
    r2.test_ids = ["a", "b"]
    assert T.ensemble_predict([r1, r2]).tolist() == [0, 1]


@pytest.fixture(scope="module")
def tiny():
    cfg = D.SyntheticConfig(n_speakers=6, utterances_per_speaker=10, frame_range=(12, 16), emotion_strength=1.0)
    utts = D.generate_synthetic_corpus(cfg)
    plan = D.make_speaker_independent_folds(utts, 3, seed=0)[0]
    splits = T.splits_from_plan(utts, plan, "activation", None, ("acoustic",))
    spec = M.VariantSpec.create("adversarial", "activation", "acoustic", branch=SMALL,
                                head=M.HeadHyper(1, 8), lam=0.6)
    return spec, splits, T.TrainConfig(max_epochs=6, patience=2, batch_size=8)


def test_best_weights_restored(tiny):
    spec, splits, tc = tiny
    rec = T.train_run(spec, splits, tc, seed=1)
    assert 1 <= rec.best_epoch <= rec.epochs_run <= 6
    w_emo = T.class_weights(splits.train.labels["emotion"], 3)
    w_conf = T.class_weights(splits.train.labels["confound"], 3)
    again, _ = T.evaluate(rec.params, splits.validation, w_emo, w_conf)
    for k, v in rec.best.items():
        assert abs(again[k] - v) <= 1e-12, k
    assert rec.val_emotion_loss == min(m["val_emotion_loss"] for m in rec.trace)
    assert rec.test_probs["emotion"].shape == (len(splits.test), 3)


def test_training_is_deterministic(tiny):
    spec, splits, tc = tiny
    a, b = T.train_run(spec, splits, tc, seed=2), T.train_run(spec, splits, tc, seed=2)
    assert a.metric_lines() == b.metric_lines()
    for k in a.params.names():
        assert np.array_equal(a.params[k].value, b.params[k].value)


def test_speaker_overlap_rejected(tiny):
    spec, splits, tc = tiny
    bad = T.DataSplits(splits.train, splits.train, None)
    with pytest.raises(T.TrainingError):
        T.train_run(spec, bad, tc, seed=0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(patience=50)
    with pytest.raises(ValueError):
        T.TrainConfig(lr=0)
