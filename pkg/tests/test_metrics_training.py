import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from leukonet.data import AugmentConfig, ImageSet
from leukonet.exceptions import ConfigError, ContractError, DivergenceError
from leukonet.metrics import MetricsReport, f1_parts, f1_score, predict_labels
from leukonet.models import StageConfig, StageModel, build_stage, parameter_digest
from leukonet.nn import Linear, Module
from leukonet.tensor import Rng
from leukonet.training import LOG_HEADER, TrainConfig, _Plateau, evaluate, split_indices, train, train_hybrid


def sk_f1(tp, fp, fn):
    from sklearn.metrics import f1_score as sk

    y_true = [1] * tp + [0] * fp + [1] * fn
    y_pred = [1] * tp + [1] * fp + [0] * fn
    return sk(y_true, y_pred, zero_division=0.0)


# metrics

def test_f1_examples():
    assert f1_score(10, 0, 0) == 1.0
    assert f1_parts(0, 5, 7) == (0.0, True)
    assert f1_parts(0, 0, 0) == (0.0, True)
    # precision 0.8, recall 0.5
    assert f1_score(8, 2, 8) == pytest.approx(8 / 13, abs=1e-15)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_matches_sklearn(tp, fp, fn):
    if tp + fp + fn == 0:
        return
    assert f1_score(tp, fp, fn) == pytest.approx(sk_f1(tp, fp, fn), abs=1e-12)


def test_f1_rejects_negative_counts():
    with pytest.raises(ContractError):
        f1_score(-1, 0, 0)


def test_ties_go_to_normal_and_are_counted():
    labels, ties = predict_labels(np.array([[1.0, 1.0], [0.0, 2.0], [3.0, -1.0]]))
    assert labels.tolist() == [0, 1, 0] and ties == 1


def test_all_cancer_predictor_on_two_to_one_set():
    y = np.array([1, 1, 0] * 10)
    rep = MetricsReport.from_predictions(y, np.ones_like(y))
    assert 100 * rep.accuracy == pytest.approx(66.6667, abs=1e-4)
    assert rep.f1_normal == 0.0 and rep.degenerate["f1_n"]
    assert rep.f1_cancer == pytest.approx(0.8)


def test_perfect_report():
    y = np.array([0, 1, 1, 0, 1])
    rep = MetricsReport.from_predictions(y, y)
    assert (rep.accuracy, rep.f1_normal, rep.f1_cancer) == (1.0, 1.0, 1.0)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_report_text_recomputes_from_counts(pairs):
    y_true, y_pred = map(np.array, zip(*pairs))
    rep = MetricsReport.from_predictions(y_true, y_pred, loss=0.25)
    back = MetricsReport.from_text(rep.to_text())
    assert (back.tp, back.fp, back.tn, back.fn) == (rep.tp, rep.fp, rep.tn, rep.fn)
    assert back.total == len(pairs)
    fields = MetricsReport.parse_text(rep.to_text())
    assert float(fields["exact.accuracy"]) == (back.tp + back.tn) / back.total
    assert abs(float(fields["exact.f1_c"]) - back.f1_cancer) <= 1e-12
    assert abs(float(fields["exact.f1_n"]) - back.f1_normal) <= 1e-12


def test_empty_report_rejected():
    with pytest.raises(ContractError):
        MetricsReport.from_predictions([], [])


# plateau schedule

def test_plateau_decays_at_half_patience_and_stops_at_patience():
    p = _Plateau(6)
    p.update(0.5, 1)
    events = []
    for epoch in range(2, 9):
        p.update(0.4, epoch)
        events.append((p.stale, p.decay_now, p.stop))
    assert events[2] == (3, True, False)
    assert events[5] == (6, False, True)
    assert [e[1] for e in events[:5]] == [False, False, True, False, False]


# evaluate

def fixed_model():
    return StageModel(StageConfig("S1", input_size=32), Rng(0)).eval()


def test_evaluate_is_pure(tiny_data):
    data, _ = tiny_data
    model = fixed_model()
    before = parameter_digest(model)
    a, b = evaluate(model, data, 16), evaluate(model, data, 16)
    assert a.to_text() == b.to_text()
    assert parameter_digest(model) == before


def test_evaluate_batch_size_does_not_matter(tiny_data):
    data, _ = tiny_data
    model = fixed_model()
    a, b = evaluate(model, data, 7), evaluate(model, data, 64)
    assert (a.tp, a.fp, a.tn, a.fn) == (b.tp, b.fp, b.tn, b.fn)


def test_evaluate_contract(tiny_data):
    data, _ = tiny_data
    with pytest.raises(ContractError, match="eval-mode"):
        evaluate(fixed_model().train(), data)
    with pytest.raises(ContractError, match="empty"):
        evaluate(fixed_model(), data.subset([]))


class _Constant(Module):
    """Predicts Cancer for every input."""

    def __init__(self):
        super().__init__()
        self.bias = Linear(1, 2, rng=Rng(0))
        self.bias.weight.data[:] = 0
        self.bias.bias.data[:] = [0.0, 1.0]

    def forward(self, x):
        from leukonet.tensor import Tensor

        return self.bias(Tensor(np.zeros((x.shape[0], 1))))


def test_evaluate_all_cancer_predictor():
    data = ImageSet(np.zeros((30, 3, 4, 4), np.uint8), [1, 1, 0] * 10, ["s"] * 30)
    rep = evaluate(_Constant().eval(), data)
    assert round(100 * rep.accuracy, 2) == 66.67 and rep.f1_normal == 0.0


# training

SMALL = dict(batch_size=8, max_epochs=3, patience=3, eval_batch_size=32, precision="float64")


def test_split_indices_validation(tiny_data):
    data, folds = tiny_data
    tr, va = split_indices(data, folds, 0)
    assert set(data.subjects[tr]).isdisjoint(data.subjects[va])
    with pytest.raises(ConfigError):
        split_indices(data, folds, 4)


def test_zero_learning_rate_keeps_everything(tiny_data):
    data, folds = tiny_data
    cfg = StageConfig("S1", input_size=32)
    model = build_stage(cfg, rng=Rng(0))
    res = train(cfg, TrainConfig(learning_rate=0.0, **SMALL), data, folds, 0, model=model)
    vals = [r for r in res.log if r.split == "val"]
    assert len({(r.accuracy, r.loss) for r in vals}) == 1
    trainable = [n for n, p in model.named_parameters() if p.requires_grad]
    state0 = build_stage(cfg, rng=Rng(0)).state_dict()
    final = res.checkpoint.state
    assert all(np.array_equal(final[n], state0[n]) for n in trainable)


def test_training_is_deterministic_and_selects_best(tiny_data, tmp_path):
    data, folds = tiny_data
    cfg = StageConfig("S1", input_size=32)
    a = train(cfg, TrainConfig(**SMALL), data, folds, 0, log_path=tmp_path / "a.log")
    b = train(cfg, TrainConfig(**SMALL), data, folds, 0, log_path=tmp_path / "b.log")
    assert (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes()
    assert a.log_text() == (tmp_path / "a.log").read_text()
    assert a.log_text().splitlines()[0] == LOG_HEADER
    assert a.checkpoint.meta["val_accuracy"] == max(a.val_accuracies())
    assert a.checkpoint.meta["best_epoch"] == 1 + a.val_accuracies().index(max(a.val_accuracies()))
    # the stored weights reproduce the recorded validation accuracy
    _, va = split_indices(data, folds, 0)
    rep = evaluate(a.checkpoint.build_model(), data.subset(va), precision="float64")
    assert rep.accuracy == a.checkpoint.meta["val_accuracy"]


def test_first_epoch_loss_descends(tiny_data):
    data, folds = tiny_data
    res = train(StageConfig("S1", input_size=32), TrainConfig(**{**SMALL, "max_epochs": 1}), data, folds, 0)
    losses = res.batch_losses
    half = len(losses) // 2
    assert np.mean(losses[half:]) < np.mean(losses[:half])


def test_augmented_training_runs(tiny_data):
    data, folds = tiny_data
    cfg = StageConfig("S1", input_size=32, augmentation_mode="normal_only")
    res = train(cfg, TrainConfig(**{**SMALL, "max_epochs": 1}), data, folds, 1)
    assert [r.split for r in res.log] == ["train", "val"]


def test_divergence_names_epoch_and_rate(tiny_data):
    data, folds = tiny_data
    with pytest.raises(DivergenceError, match=r"epoch 1 .*learning rate 1e\+30"):
        train(StageConfig("S1", input_size=32), TrainConfig(**{**SMALL, "learning_rate": 1e30, "precision": "float32"}), data, folds, 0)


def test_train_rejects_hybrid_stage(tiny_data):
    data, folds = tiny_data
    with pytest.raises(ConfigError):
        train(StageConfig("S3"), TrainConfig(**SMALL), data, folds, 0)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ConfigError):
        TrainConfig(precision="float16")


@pytest.mark.parametrize("mode", ["none", "full"])
def test_hybrid_freeze_audit(tiny_data, mode):
    data, folds = tiny_data
    a = train(StageConfig("S1", input_size=32), TrainConfig(**{**SMALL, "max_epochs": 1}), data, folds, 0)
    b = train(StageConfig("S2C", input_size=32), TrainConfig(**{**SMALL, "max_epochs": 1}), data, folds, 0)
    cfg = StageConfig("S3C", input_size=32, augmentation_mode=mode)
    res = train_hybrid(cfg, [a.checkpoint, b.checkpoint], TrainConfig(**{**SMALL, "max_epochs": 2}), data, folds, 0)
    audit = res.audit
    assert audit["first_before"] == audit["first_after"]
    assert audit["second_before"] == audit["second_after"]
    assert audit["fusion_before"] != audit["fusion_after"]
    # component weights in the hybrid checkpoint equal the inputs bit for bit
    for name, value in a.checkpoint.state.items():
        assert np.array_equal(res.checkpoint.state["first." + name], value)
    assert res.checkpoint.meta["val_accuracy"] == max(res.val_accuracies())


def test_hybrid_rejects_wrong_components(tiny_data):
    data, folds = tiny_data
    a = StageModel(StageConfig("S1", input_size=32), Rng(0))
    from leukonet.checkpoint import Checkpoint

    ck = Checkpoint.from_model(a)
    with pytest.raises(ConfigError):
        train_hybrid(StageConfig("S3C"), [ck, ck], TrainConfig(**SMALL), data, folds, 0)
