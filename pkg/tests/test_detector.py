import numpy as np
import pytest

from amishield import corpus, detector
from amishield.bytevis import render
from amishield.detector import (
    BadQuadrantSplit,
    DegenerateDataset,
    EmptyDataset,
    Hyper,
    classify,
    evaluate,
    featurize,
    load_model,
    mlp_init,
    mlp_loss_and_grad,
    predict_scores,
    save_model,
    train,
    update,
)


def separable_split(seed=0, n_train=800, n_test=200):
    X, y = corpus.labeled_features(
        (n_train + n_test) // 2, (n_train + n_test) // 2, seed=seed
    )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    X, y = X[order], y[order]
    return X[:n_train], y[:n_train], X[n_train:], y[n_train:]


def test_featurize_all_blue():
    img = render(b"\x41" * 1024, order=5)[0]
    vec = featurize(img, quadrants=4)
    assert vec.shape == (25,)
    assert np.allclose(vec[:5], [0, 0, 1, 0, 0])


def test_featurize_half_blue_half_red():
    img = render(b"\x41" * 512 + b"\x90" * 512, order=5)[0]
    vec = featurize(img)
    assert np.allclose(vec[:5], [0, 0, 0.5, 0, 0.5])


def test_featurize_all_padding_every_quadrant_black():
    img = render(b"", order=5)[0]
    vec = featurize(img, quadrants=4)
    for q in range(5):
        assert np.allclose(vec[q * 5 : q * 5 + 5], [1, 0, 0, 0, 0])


def test_featurize_groups_sum_to_one():
    img = render(bytes(range(256)) * 4, order=5)[0]
    vec = featurize(img, quadrants=16)
    assert len(vec) == 5 * 17
    sums = vec.reshape(-1, 5).sum(axis=1)
    assert np.allclose(sums, 1.0, atol=1e-9)


def test_featurize_bad_quadrant_split():
    img = render(b"", order=2)[0]  # side 4
    with pytest.raises(BadQuadrantSplit):
        featurize(img, quadrants=64)  # grid 8 > side 4
    with pytest.raises(BadQuadrantSplit):
        featurize(img, quadrants=3)


def test_train_requires_both_classes():
    X = np.random.default_rng(0).random((10, 25))
    with pytest.raises(DegenerateDataset):
        train(X, np.ones(10), Hyper(kind="mlp"))


def test_train_is_deterministic():
    Xtr, ytr, _, _ = separable_split(seed=3, n_train=200, n_test=10)
    hy = Hyper(kind="mlp", epochs=5, seed=11)
    a = train(Xtr, ytr, hy)
    b = train(Xtr, ytr, hy)
    assert np.array_equal(a.theta, b.theta)
    assert a.training_log == b.training_log


def test_mlp_loss_decreases_and_accuracy_high():
    Xtr, ytr, Xte, yte = separable_split(seed=1)
    model = train(Xtr, ytr, Hyper(kind="mlp", epochs=30, seed=5))
    assert model.training_log[-1] <= model.training_log[0]
    m = evaluate(model, Xtr, ytr)
    assert m.accuracy >= 0.95
    test_m = evaluate(model, Xte, yte)
    assert test_m.accuracy >= 0.90
    assert test_m.false_positive_rate <= 0.10


def test_mlp_epoch_loss_mostly_monotone():
    Xtr, ytr, _, _ = separable_split(seed=2, n_train=400, n_test=10)
    model = train(Xtr, ytr, Hyper(kind="mlp", epochs=10, seed=0))
    increases = sum(
        1
        for a, b in zip(model.training_log, model.training_log[1:])
        if b > a + 1e-12
    )
    assert increases <= 1


def test_knn_memorizes_exact_set():
    Xtr, ytr, _, _ = separable_split(seed=4, n_train=100, n_test=10)
    model = train(Xtr, ytr, Hyper(kind="knn", k=1))
    m = evaluate(model, Xtr, ytr)
    assert m.accuracy == 1.0
    scores = predict_scores(model, Xtr[:20])
    assert set(np.unique(scores)) <= {0.0, 1.0}


def test_knn_k1_verdict_scores_are_extreme():
    Xtr, ytr, _, _ = separable_split(seed=5, n_train=50, n_test=10)
    model = train(Xtr, ytr, Hyper(kind="knn", k=1))
    img = render(b"\x41" * 1024)[0]
    v = classify(model, img)
    assert v.score in (0.0, 1.0)
    assert v.label in (detector.NORMAL, detector.MALWARE)


def test_classify_total_on_padding_image():
    Xtr, ytr, _, _ = separable_split(seed=6, n_train=100, n_test=10)
    model = train(Xtr, ytr, Hyper(kind="mlp", epochs=5))
    v = classify(model, render(b"", order=5)[0])
    assert 0.0 <= v.score <= 1.0


def test_constant_normal_model_metrics():
    # an untrained-looking model that always answers "normal"
    X = np.vstack([np.eye(5), np.eye(5)])[:, :5]
    X = np.hstack([X, np.zeros((10, 20))])
    y = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1], dtype=float)
    model = train(X, y, Hyper(kind="mlp", epochs=0, threshold=1.1))
    m = evaluate(model, X, y)
    assert m.accuracy == 0.5
    assert m.false_positive_rate == 0.0
    assert m.false_negative_rate == 1.0


def test_evaluate_empty_raises():
    Xtr, ytr, _, _ = separable_split(seed=7, n_train=60, n_test=10)
    model = train(Xtr, ytr, Hyper(kind="knn"))
    with pytest.raises(EmptyDataset):
        evaluate(model, np.zeros((0, 25)), np.zeros(0))


def test_update_empty_is_identity():
    Xtr, ytr, _, _ = separable_split(seed=8, n_train=60, n_test=10)
    model = train(Xtr, ytr, Hyper(kind="mlp", epochs=3))
    before = model.theta.copy()
    update(model, np.zeros((0, 25)), [])
    assert np.array_equal(model.theta, before)


def test_update_knn_dedups_exact_matches():
    Xtr, ytr, _, _ = separable_split(seed=9, n_train=60, n_test=10)
    model = train(Xtr, ytr, Hyper(kind="knn"))
    n0 = len(model.exemplar_labels)
    batch_X, batch_y = Xtr[:5] + 100.0, ytr[:5]
    update(model, batch_X, batch_y)
    n1 = len(model.exemplar_labels)
    assert n1 == n0 + 5
    update(model, batch_X, batch_y)
    assert len(model.exemplar_labels) == n1


def test_update_improves_on_new_pattern():
    Xtr, ytr, _, _ = separable_split(seed=10, n_train=400, n_test=10)
    model = train(Xtr, ytr, Hyper(kind="mlp", epochs=20, seed=1))
    # unseen red-dominant pattern, but extreme: nearly all extended bytes
    pool = corpus.synthetic_corpus(0, 50, seed=99, min_size=900, max_size=1000)
    Xnew = corpus.features_for_payloads(pool.malware)
    ynew = np.ones(len(Xnew))
    before = evaluate(model, Xnew, ynew).accuracy
    update(model, Xnew, ynew)
    after = evaluate(model, Xnew, ynew).accuracy
    assert after >= before


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(20):
        d = int(rng.integers(3, 8))
        h = int(rng.integers(2, 6))
        n = int(rng.integers(4, 10))
        X = rng.normal(size=(n, d))
        y = (rng.random(n) < 0.5).astype(float)
        theta = mlp_init(d, h, rng) + rng.normal(0, 0.3, size=mlp_param_count_like(d, h))
        _, grad = mlp_loss_and_grad(theta, X, y, d, h)
        eps = 1e-5
        fd = np.zeros_like(theta)
        for i in range(len(theta)):
            up = theta.copy()
            up[i] += eps
            down = theta.copy()
            down[i] -= eps
            lu, _ = mlp_loss_and_grad(up, X, y, d, h)
            ld, _ = mlp_loss_and_grad(down, X, y, d, h)
            fd[i] = (lu - ld) / (2 * eps)
        rel = np.linalg.norm(grad - fd) / max(1e-12, np.linalg.norm(grad) + np.linalg.norm(fd))
        worst = max(worst, rel)
    assert worst < 1e-4


def mlp_param_count_like(d, h):
    return d * h + h + h + 1


def test_scores_bounded_for_arbitrary_inputs():
    Xtr, ytr, _, _ = separable_split(seed=11, n_train=60, n_test=10)
    model = train(Xtr, ytr, Hyper(kind="mlp", epochs=3))
    wild = np.array([[1e6] * 25, [-1e6] * 25, [0.0] * 25])
    s = predict_scores(model, wild)
    assert ((s >= 0) & (s <= 1)).all()


def test_model_json_round_trip(tmp_path):
    Xtr, ytr, Xte, yte = separable_split(seed=12, n_train=100, n_test=40)
    for kind in ("mlp", "knn"):
        model = train(Xtr, ytr, Hyper(kind=kind, epochs=4))
        path = tmp_path / f"{kind}.json"
        save_model(model, path)
        back = load_model(path)
        assert back.kind == kind
        assert np.allclose(predict_scores(back, Xte), predict_scores(model, Xte))


def test_model_format_version_checked(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format_version": 999}')
    with pytest.raises(ValueError):
        load_model(path)
