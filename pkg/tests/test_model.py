import math

import numpy as np
import pytest

from gradcheck import check
from o2cta.dataset import SampleSeq
from o2cta.errors import EmptySequence, IncompatibleCheckpoint, InvalidValue, ShapeError
from o2cta.model import (
    CNN_ONLY,
    ModelConfig,
    O2CTANet,
    TrainConfig,
    ce_loss,
    collate,
    evaluate,
    load_model,
    predict,
    train_fold,
)
from o2cta.nn import Tensor
from o2cta.synth import DatasetSpec, gen_dataset, phantom_sequence

TOY = dict(n=4, d=5, d_model=8, heads=2, encoder_layers=1, cnn_channels=(2, 3), d_ff=16, dropout=0.0)


def toy_seqs(rng, lengths, n=4, d=5, classes=6, prefix="S"):
    return [
        SampleSeq(f"{prefix}{i}", rng.random((length, n, d, d)), rng.integers(0, classes, length))
        for i, length in enumerate(lengths)
    ]


@pytest.fixture(scope="module")
def synth_pair():
    ids, bundles = gen_dataset(2, DatasetSpec(), 5)
    return [phantom_sequence(b, pid) for pid, b in zip(ids, bundles)]


def test_forward_shapes():
    model = O2CTANet(ModelConfig(**TOY, seed=1))
    rng = np.random.default_rng(0)
    vols = rng.random((2, 3, 4, 5, 5))
    mask = np.array([[True, True, True], [True, True, False]])
    assert model(vols, mask).shape == (2, 3, 6)
    assert model.phi_forward(vols).shape == (2, 3, 8)


def test_identical_windows_identical_features():
    model = O2CTANet(ModelConfig(seed=2))
    w = np.random.default_rng(1).random((12, 21, 21))
    feats = model.phi_forward(np.stack([w, w, w])[None]).data
    assert feats.shape == (1, 3, 64)
    assert np.array_equal(feats[0, 0], feats[0, 1]) and np.array_equal(feats[0, 0], feats[0, 2])


@pytest.mark.parametrize("n", [6, 9, 12])
def test_ablation_window_sizes(n):
    model = O2CTANet(ModelConfig(n=n, seed=0))
    out = model(np.zeros((1, 2, n, 21, 21)), np.ones((1, 2), bool))
    assert out.shape == (1, 2, 6)


def test_single_window_sequence():
    model = O2CTANet(ModelConfig(**TOY))
    out = model(np.ones((1, 1, 4, 5, 5)), np.ones((1, 1), bool))
    assert out.shape == (1, 1, 6) and np.all(np.isfinite(out.data))


def test_wrong_window_shape():
    model = O2CTANet(ModelConfig(**TOY))
    with pytest.raises(ShapeError):
        model(np.zeros((1, 2, 5, 5, 5)), np.ones((1, 2), bool))


def test_empty_sequence():
    model = O2CTANet(ModelConfig(**TOY))
    with pytest.raises(EmptySequence):
        model(np.zeros((2, 2, 4, 5, 5)), np.array([[True, False], [False, False]]))


def test_permutation_equivariance_without_positions():
    model = O2CTANet(ModelConfig(**TOY, positional_encoding=False, seed=3)).eval()
    rng = np.random.default_rng(4)
    vols = rng.random((1, 5, 4, 5, 5))
    mask = np.ones((1, 5), bool)
    perm = rng.permutation(5)
    a = model(vols, mask).data
    b = model(vols[:, perm], mask).data
    assert np.abs(a[:, perm] - b).max() < 1e-12


def test_positions_break_equivariance():
    model = O2CTANet(ModelConfig(**TOY, seed=3)).eval()
    rng = np.random.default_rng(4)
    vols = rng.random((1, 5, 4, 5, 5))
    mask = np.ones((1, 5), bool)
    perm = np.array([4, 3, 2, 1, 0])
    a = model(vols, mask).data
    b = model(vols[:, perm], mask).data
    assert np.abs(a[:, perm] - b).max() > 1e-6


def test_cnn_only_is_per_window():
    model = O2CTANet(ModelConfig(**TOY, seed=5), CNN_ONLY)
    rng = np.random.default_rng(5)
    vols = rng.random((1, 3, 4, 5, 5))
    full = model(vols, np.ones((1, 3), bool)).data
    alone = model(vols[:, 1:2], np.ones((1, 1), bool)).data
    assert np.abs(full[0, 1] - alone[0, 0]).max() < 1e-12


def test_ce_loss_examples():
    labels = np.array([[0, 3]])
    mask = np.ones((1, 2), bool)
    assert float(ce_loss(Tensor(np.zeros((1, 2, 6))), labels, mask).data) == pytest.approx(math.log(6), abs=1e-12)
    z = np.full((1, 2, 6), -50.0)
    z[0, 0, 0] = z[0, 1, 3] = 50.0
    assert float(ce_loss(Tensor(z), labels, mask).data) < 1e-30
    # masked positions contribute nothing whatever their label
    z[0, 1] = 0.0
    assert float(ce_loss(Tensor(z), np.array([[0, 5]]), np.array([[True, False]])).data) < 1e-30


def test_padding_neutrality():
    rng = np.random.default_rng(6)
    model = O2CTANet(ModelConfig(**TOY, seed=6)).eval()
    short, long_ = toy_seqs(rng, [3, 5])
    alone = model(*[collate([short])[i] for i in (0, 2)]).data
    vols, _, mask = collate([short, long_])
    vols[0, 3:] = rng.random(vols[0, 3:].shape) * 100.0  # garbage under the mask
    batched = model(vols, mask).data
    assert np.abs(batched[0, :3] - alone[0]).max() <= 1e-8


def test_loss_finite_with_padded_batch():
    rng = np.random.default_rng(7)
    model = O2CTANet(ModelConfig(**TOY, seed=7))
    vols, labels, mask = collate(toy_seqs(rng, [2, 4]))
    loss = ce_loss(model(vols, mask), labels, mask)
    assert np.isfinite(float(loss.data))


def test_composed_gradient_check():
    rng = np.random.default_rng(8)
    model = O2CTANet(ModelConfig(n=4, d=5, d_model=8, heads=2, encoder_layers=1, cnn_channels=(2, 2), d_ff=8, dropout=0.0, seed=8))
    vols, labels, mask = collate(toy_seqs(rng, [3, 2]))
    err = check(lambda: ce_loss(model(vols, mask), labels, mask), model.parameters(), max_entries=40, rng=rng)
    assert err < 1e-4


def test_training_is_deterministic():
    rng = np.random.default_rng(9)
    seqs = toy_seqs(rng, [3, 4, 2])
    mc, tc = ModelConfig(**TOY, seed=1), TrainConfig(epochs=3, batch_sequences=2, eval_every=1)
    a = train_fold(seqs[:2], seqs[2:], mc, tc)
    b = train_fold(seqs[:2], seqs[2:], mc, tc)
    for (na, pa), (nb, pb) in zip(a.model.state(), b.model.state()):
        assert na == nb and np.array_equal(pa, pb)
    assert a.history == b.history


def test_train_rejects_leakage():
    rng = np.random.default_rng(10)
    seqs = toy_seqs(rng, [3, 3])
    with pytest.raises(InvalidValue):
        train_fold(seqs, seqs[:1], ModelConfig(**TOY), TrainConfig(epochs=1))


def test_predict_probabilities_and_checkpoint(tmp_path):
    rng = np.random.default_rng(11)
    seqs = toy_seqs(rng, [3, 5])
    res = train_fold(seqs, [], ModelConfig(**TOY, seed=2), TrainConfig(epochs=2))
    path = res.save(tmp_path / "ck")
    probs = predict(path, seqs)
    assert [p.shape for p in probs] == [(3, 6), (5, 6)]
    assert all(np.allclose(p.sum(axis=1), 1.0, atol=1e-12) for p in probs)
    direct = predict(res.model, seqs)
    assert all(np.array_equal(a, b) for a, b in zip(probs, direct))
    assert (tmp_path / "ck_history.csv").is_file()


def test_incompatible_checkpoint(tmp_path):
    rng = np.random.default_rng(12)
    res = train_fold(toy_seqs(rng, [2]), [], ModelConfig(**TOY), TrainConfig(epochs=1))
    path = res.save(tmp_path / "ck")
    with pytest.raises(IncompatibleCheckpoint):
        predict(path, toy_seqs(rng, [2], n=6))
    model = load_model(path)
    arrays = dict(model.state())
    arrays.pop(next(iter(arrays)))
    with pytest.raises(IncompatibleCheckpoint):
        model.load_state(arrays)


@pytest.mark.slow
def test_overfit_two_sequences(synth_pair):
    res = train_fold(synth_pair, [], ModelConfig(seed=0), TrainConfig(epochs=300, lr_peak=1e-3))
    assert res.history[-1]["train_loss"] < 0.01
    probs = predict(res.model, synth_pair)
    for s, p in zip(synth_pair, probs):
        assert np.array_equal(p.argmax(axis=1), s.labels)


@pytest.mark.slow
def test_shuffled_labels_do_not_generalise():
    # windows keep their images but labels are drawn independently and uniformly
    rng = np.random.default_rng(13)
    ids, bundles = gen_dataset(8, DatasetSpec(), 17)
    seqs = [phantom_sequence(b, pid) for pid, b in zip(ids, bundles)]
    seqs = [SampleSeq(s.patient_id, s.volumes, rng.integers(0, 6, len(s))) for s in seqs]
    res = train_fold(seqs[:6], seqs[6:], ModelConfig(seed=0), TrainConfig(epochs=60, eval_every=60))
    ev = evaluate(res.model, seqs[6:])
    assert ev["loss"] >= 0.9 * math.log(6)
