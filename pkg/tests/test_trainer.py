import numpy as np
import pytest

from awp_lab import trainer as tr
from awp_lab.attacks import ThreatModel
from awp_lab.data import synth_blobs
from awp_lab.errors import FormatError, ShapeError
from awp_lab.losses import LossSpec
from awp_lab.network import build_model, dense, preset
from awp_lab.trainer import (AWPConfig, BestTracker, EpochMetrics, OptimizerState, RunMetrics, ScheduleSpec,
                             TrainConfig, best_epoch, evaluate, fit, load_checkpoint, lr_at, pseudo_label,
                             save_checkpoint, train_step)
from conftest import logistic_net, tiny_cnn

NO_ATTACK = ThreatModel("linf", 0.0, 1.0, 1, False)


def test_schedule_examples():
    assert lr_at(ScheduleSpec("piecewise", (100, 150), 0.1), 120, 200, 0.1) == pytest.approx(0.01)
    assert lr_at(ScheduleSpec("piecewise", (100, 150), 0.1), 99, 200, 0.1) == 0.1
    assert lr_at(ScheduleSpec("cosine"), 200, 200, 0.1) == pytest.approx(0.0, abs=1e-18)
    assert lr_at(ScheduleSpec("cosine"), 100, 200, 0.1) == pytest.approx(0.05)
    cyc = ScheduleSpec("cyclic", peak_epoch=80, peak_lr=0.2)
    assert lr_at(cyc, 40, 200) == pytest.approx(0.1)
    assert lr_at(cyc, 80, 200) == pytest.approx(0.2)
    assert lr_at(cyc, 200, 200) == 0.0
    with pytest.raises(ValueError):
        lr_at(cyc, 0, 200)
    with pytest.raises(ValueError):
        ScheduleSpec("piecewise", (5, 5))


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def test_scalar_hand_trace_of_the_commit():
    # logits [a x, w x] with a = 0, w = 2; y = 1, x = 0.5, no input attack
    gamma, lr, x = 0.1, 0.5, 0.5
    net = logistic_net(2.0)
    cfg = TrainConfig(lr=lr, momentum=0.0, weight_decay=0.0, threat=NO_ATTACK, awp=AWPConfig(gamma))
    new, _ = train_step(net, np.array([[x]]), np.array([1]), cfg, OptimizerState(), lr, seed=0)
    # the AWP step moves along g / |g| = [1, -1] / sqrt 2 by gamma * |W| = 2 gamma
    v = gamma * 2.0 * np.array([1.0, -1.0]) / np.sqrt(2.0)
    wp = np.array([0.0, 2.0]) + v
    p0 = _softmax(wp * x)[0]
    g = p0 * x * np.array([1.0, -1.0])
    want = np.array([0.0, 2.0]) - lr * g
    np.testing.assert_allclose(new.params["dense1.weight"][:, 0], want, atol=1e-14)


def test_plain_at_step_matches_sgd():
    net = logistic_net(2.0)
    cfg = TrainConfig(lr=0.3, momentum=0.0, weight_decay=0.0, threat=NO_ATTACK)
    new, _ = train_step(net, np.array([[0.5]]), np.array([1]), cfg, OptimizerState(), 0.3, seed=0)
    p0 = _softmax(np.array([0.0, 1.0]))[0]
    want = np.array([0.0, 2.0]) - 0.3 * p0 * 0.5 * np.array([1.0, -1.0])
    np.testing.assert_allclose(new.params["dense1.weight"][:, 0], want, atol=1e-15)


def test_restore_discipline_against_instrumented_oracle():
    from awp_lab import tensor as T
    from awp_lab.attacks import pgd
    from awp_lab.awp import PerturbationState, compute_awp, perturbed
    from awp_lab.losses import at_loss

    net = tiny_cnn(0)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(8, 1, 6, 6))
    y = rng.integers(0, 3, 8)
    tm = ThreatModel("linf", 0.03, 0.01, 3)
    cfg = TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0, threat=tm, awp=AWPConfig(0.01))
    new, _ = train_step(net, x, y, cfg, OptimizerState(), 0.1, seed=5)
    # oracle: add v, step, subtract v by hand
    ps = PerturbationState.zeros(net, 0.01)
    x_adv = pgd(net, x, y, tm, "ce", seed=tr.batch_seed(5, 0), x_nat=x)
    ps = compute_awp(net, x_adv, y, LossSpec("at"), ps, x_nat=x)
    centre = perturbed(net, ps.v)
    leaves = centre.leaves()
    T.backward(at_loss(centre, x_adv, y, leaves))
    for k in net.params:
        added = centre.params[k] - 0.1 * leaves[k].grad
        restored = added - ps.v.get(k, 0.0)
        assert np.max(np.abs(new.params[k] - restored)) < 1e-12


def test_alternations_and_trades_attack(monkeypatch):
    calls = []
    real = tr.pgd

    def spy(net, x, y, tm, loss="ce", seed=0, x_nat=None):
        calls.append(loss)
        return real(net, x, y, tm, loss, seed, x_nat)

    monkeypatch.setattr(tr, "pgd", spy)
    net = tiny_cnn(0)
    x = np.random.default_rng(0).uniform(size=(4, 1, 6, 6))
    y = np.array([0, 1, 2, 0])
    tm = ThreatModel("linf", 0.03, 0.01, 2)
    train_step(net, x, y, TrainConfig(threat=tm, awp=AWPConfig(0.01, alternations=2)), OptimizerState(), 0.1, 0)
    assert calls == ["ce", "ce"]
    calls.clear()
    train_step(net, x, y, TrainConfig(threat=tm, loss=LossSpec("trades"), awp=AWPConfig(0.01)),
               OptimizerState(), 0.1, 0)
    assert calls == ["kl"]


def _small_run(**kw):
    train = synth_blobs(96, 3, (1, 6, 6), margin=3.0, seed=2, image=True, split="train")
    test = synth_blobs(60, 3, (1, 6, 6), margin=3.0, seed=2, image=True, split="test")
    net = tiny_cnn(1)
    base = dict(epochs=2, batch_size=32, lr=0.05, threat=ThreatModel("linf", 0.03, 0.01, 3),
                eval_attack=ThreatModel("linf", 0.03, 0.01, 5), schedule=ScheduleSpec("constant"))
    base.update(kw)
    return fit(net, train, test, TrainConfig(**base))


def test_gamma_zero_collapse_and_determinism():
    a = _small_run()
    b = _small_run(awp=AWPConfig(0.0))
    c = _small_run()
    for k in a.last.params:
        assert np.array_equal(a.last.params[k], b.last.params[k])
        assert np.array_equal(a.last.params[k], c.last.params[k])
    assert a.metrics.epochs == c.metrics.epochs


def test_gap_bookkeeping_and_metrics_roundtrip(tmp_path):
    r = _small_run(awp=AWPConfig(0.01))
    for m in r.metrics.epochs:
        assert m.gap == m.train_rob - m.test_rob
        assert 0 <= m.test_rob <= m.nat_acc <= 100
    path = tmp_path / "metrics.csv"
    r.metrics.write_csv(path)
    assert path.read_text().splitlines()[0] == "epoch,lr,train_rob,test_rob,nat_acc,gap,adv_loss"
    back = RunMetrics.read_csv(path)
    assert back.epochs == r.metrics.epochs
    path.write_text("epoch,lr\n1,0.1\n")
    with pytest.raises(FormatError):
        RunMetrics.read_csv(path)


@pytest.mark.parametrize("kind", ["trades", "mart"])
def test_other_objectives_train(kind):
    r = _small_run(loss=LossSpec(kind), awp=AWPConfig(0.01))
    assert np.isfinite(r.metrics.last.adv_loss)


def test_rwp_trains():
    r = _small_run(awp=AWPConfig(0.01), rwp=True)
    assert np.isfinite(r.metrics.last.adv_loss)


def test_evaluate_examples():
    data = synth_blobs(1000, 4, 6, margin=3.0, seed=0)
    net = build_model(preset("mlp-small", (6,), 4), (6,), 0)
    e0 = evaluate(net, data, ThreatModel("linf", 0.0))
    assert e0.robustness == e0.natural_accuracy
    assert abs(e0.natural_accuracy - 25.0) <= 5.0
    e = evaluate(net, data, ThreatModel("linf", 0.1, 0.025, 5))
    assert e.robustness <= e.natural_accuracy


def test_best_tracker_examples():
    assert best_epoch([50, 55, 52]) == 2
    assert best_epoch([55, 55]) == 1
    assert best_epoch([1, 2, 3]) == 3
    t = BestTracker()
    t.update(3, 40.0)
    assert t.tag == "epoch-3"
    ms = [EpochMetrics(e, 0.1, 0, r, 0, 0, 0) for e, r in [(10, 1.0), (20, 5.0), (30, 5.0)]]
    assert best_epoch(ms) == 20


def test_pseudo_label_rules():
    net = build_model([dense(1, 3, False)], (1,), 0)
    onehot = net.with_params({"dense1.weight": np.array([[0.0], [50.0], [0.0]])})
    assert pseudo_label(onehot, np.ones((2, 1))).tolist() == [1, 1]
    flat = net.with_params({"dense1.weight": np.zeros((3, 1))})
    assert pseudo_label(flat, np.ones((3, 1))).tolist() == [0, 0, 0]


def test_prepare_ssl_mask():
    train = synth_blobs(60, 3, (1, 6, 6), margin=3.0, seed=2, image=True)
    cfg = TrainConfig(batch_size=16, lr=0.05)
    ds, mask = tr.prepare_ssl(tiny_cnn(0), train, 0.25, 1, cfg)
    assert len(ds) == 60 and mask.sum() == 45
    assert ds.y.min() >= 0 and ds.y.max() < 3


def test_checkpoint_roundtrip_and_errors(tmp_path):
    net = tiny_cnn(4)
    path = tmp_path / "a.ckpt"
    save_checkpoint(net, path, 3, {"lr": 0.1}, {"key": 1, "counter": 2})
    back, head = load_checkpoint(path, expect=net)
    assert head["epoch"] == 3 and head["rng"] == {"key": 1, "counter": 2}
    for k in net.params:
        assert net.params[k].tobytes() == back.params[k].tobytes()
    x = np.random.default_rng(0).uniform(size=(3, 1, 6, 6))
    assert np.array_equal(net.logits(x), back.logits(x))

    lines = path.read_text().splitlines()
    (tmp_path / "cut.ckpt").write_text("\n".join(lines[:3]) + "\n")
    with pytest.raises(FormatError, match="record 3"):
        load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "junk.ckpt").write_text(lines[0] + "\n{not json\n")
    with pytest.raises(FormatError, match="record 1"):
        load_checkpoint(tmp_path / "junk.ckpt")
    (tmp_path / "v2.ckpt").write_text("\n".join([lines[0].replace('"version": 1', '"version": 2')] + lines[1:]))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(tmp_path / "v2.ckpt")
    with pytest.raises(ShapeError):
        load_checkpoint(path, expect=build_model([dense(36, 3)], (36,), 0))
