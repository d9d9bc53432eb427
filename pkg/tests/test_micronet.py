import numpy as np
import pytest

from conftest import conv_naive
from freqprune import micronet, pipeline
from freqprune.errors import (
    DivergedLoss,
    InvariantViolation,
    PlanMismatch,
    ShapeMismatch,
)
from freqprune.micronet import (
    Dataset,
    MicroNet,
    TrainConfig,
    apply_plan,
    conv,
    evaluate,
    fgsm,
    flatten,
    forward,
    gen_dataset,
    linear,
    load_weights,
    maxpool,
    pgd,
    relu,
    save_weights,
    softmax_cross_entropy,
    train,
)
from freqprune.planner import PlanConfig, PruneSpec, make_random_plan

TINY_SPECS = (conv(4, 3), relu(), maxpool(), conv(6, 3), relu(), maxpool(),
              flatten(), linear(4))


# --- dataset -------------------------------------------------------------------

def test_gen_dataset_deterministic():
    a = gen_dataset(7, 400)
    b = gen_dataset(7, 400)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert a.images.tobytes() == b.images.tobytes()


def test_gen_dataset_balanced():
    data = gen_dataset(7, 400)
    assert np.bincount(data.labels, minlength=4).tolist() == [100, 100, 100, 100]


def test_gen_dataset_range_and_shape():
    data = gen_dataset(3, 40)
    assert data.images.shape == (40, 1, 16, 16)
    assert data.images.dtype == np.float32
    assert float(data.images.min()) >= 0.0 and float(data.images.max()) <= 1.0


def test_gen_dataset_zero_noise_gives_templates():
    data = gen_dataset(1, 8, noise=0.0)
    assert np.array_equal(data.images[0], data.images[4])
    assert np.array_equal(data.images[1], data.images[5])
    assert not np.array_equal(data.images[0], data.images[1])
    assert set(np.unique(data.images)) == {np.float32(0.25), np.float32(0.75)}


def test_gen_dataset_needs_enough_samples():
    with pytest.raises(InvariantViolation):
        gen_dataset(0, 3)


# --- forward -------------------------------------------------------------------

def test_identity_conv_passthrough():
    net = MicroNet((conv(1, 1),), in_shape=(1, 4, 4), seed=0)
    net.layers[0].weight[...] = 1.0
    net.layers[0].bias[...] = 0.0
    x = np.random.default_rng(0).normal(size=(2, 1, 4, 4)).astype(np.float32)
    out, _ = net._forward(x)
    assert np.allclose(out, x, atol=1e-7)


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(100)
    for _ in range(1000):
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        h = int(rng.integers(2, 7))
        w = int(rng.integers(2, 7))
        b = int(rng.integers(1, 3))
        net = MicroNet((conv(c_out, k),), in_shape=(c_in, h, w), seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=(b, c_in, h, w)).astype(np.float32)
        got, _ = net._forward(x)
        want = conv_naive(x, net.layers[0].weight, net.layers[0].bias)
        assert np.max(np.abs(got - want)) < 1e-5


def test_all_zero_weights_give_bias_logits():
    net = MicroNet(TINY_SPECS, in_shape=(1, 8, 8), seed=0)
    for layer, name in net.parameters():
        getattr(layer, name)[...] = 0.0
    net.layers[-1].bias[...] = np.array([0.1, 0.2, 0.3, 0.4], dtype=np.float32)
    x = np.random.default_rng(1).uniform(size=(5, 1, 8, 8)).astype(np.float32)
    logits, _ = net._forward(x)
    assert np.allclose(logits, [0.1, 0.2, 0.3, 0.4], atol=1e-7)


def test_forward_shape_mismatch():
    net = MicroNet(TINY_SPECS, in_shape=(1, 8, 8), seed=0)
    with pytest.raises(ShapeMismatch):
        net._forward(np.zeros((1, 2, 8, 8), dtype=np.float32))


def test_forward_capture_pre_and_post():
    net = pipeline.default_net(0)
    x = gen_dataset(0, 8).images
    logits, pre = forward(net, x, capture=True, capture_mode="pre")
    _, post = forward(net, x, capture=True, capture_mode="post")
    assert set(pre) == {0, 1} and set(post) == {0, 1}
    assert pre[0].data.shape == (8, 16, 16, 16)
    assert pre[1].data.shape == (8, 32, 8, 8)
    # post is relu(pre): non-negative, and equal wherever pre is positive
    assert float(post[0].data.min()) >= 0.0
    mask = pre[0].data > 0
    assert np.array_equal(post[0].data[mask], pre[0].data[mask])


# --- gradients -------------------------------------------------------------------

def _loss_of(net, x, labels) -> float:
    logits, _ = net._forward(x)
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(200)
    net = MicroNet(TINY_SPECS, in_shape=(1, 8, 8), seed=5).astype(np.float64)
    x = rng.uniform(size=(8, 1, 8, 8))
    labels = rng.integers(0, 4, size=8)

    logits, _ = net._forward(x)
    _, dlogits = softmax_cross_entropy(logits, labels)
    net._backward(dlogits)

    h = 1e-3
    worst = 0.0
    for layer, name in net.parameters():
        p = getattr(layer, name)
        analytic = getattr(layer, "d" + name)
        for _ in range(5):
            idx = tuple(int(rng.integers(d)) for d in p.shape)
            orig = p[idx]
            p[idx] = orig + h
            lp = _loss_of(net, x, labels)
            p[idx] = orig - h
            lm = _loss_of(net, x, labels)
            p[idx] = orig
            numeric = (lp - lm) / (2 * h)
            rel = abs(analytic[idx] - numeric) / max(abs(analytic[idx]), abs(numeric), 1e-6)
            worst = max(worst, rel)
    assert worst < 1e-2


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(201)
    net = MicroNet(TINY_SPECS, in_shape=(1, 8, 8), seed=6).astype(np.float64)
    x = rng.uniform(size=(4, 1, 8, 8))
    labels = rng.integers(0, 4, size=4)
    logits, _ = net._forward(x)
    _, dlogits = softmax_cross_entropy(logits, labels)
    dx = net._backward(dlogits)
    h = 1e-4
    for _ in range(10):
        idx = tuple(int(rng.integers(d)) for d in x.shape)
        orig = x[idx]
        x[idx] = orig + h
        lp = _loss_of(net, x, labels)
        x[idx] = orig - h
        lm = _loss_of(net, x, labels)
        x[idx] = orig
        numeric = (lp - lm) / (2 * h)
        assert abs(dx[idx] - numeric) / max(abs(dx[idx]), abs(numeric), 1e-6) < 1e-2


# --- training --------------------------------------------------------------------

def test_train_lr_zero_keeps_weights():
    net = MicroNet(TINY_SPECS, in_shape=(1, 8, 8), seed=3)
    data = Dataset(
        images=gen_dataset(2, 32).images[:, :, ::2, ::2].copy(),
        labels=gen_dataset(2, 32).labels,
    )
    cfg = TrainConfig(learning_rate=0.0, weight_decay=0.0, epochs=1, batch_size=8, seed=0)
    trained, _ = train(net, data, cfg)
    for (l1, n1), (l2, n2) in zip(net.parameters(), trained.parameters()):
        assert np.array_equal(getattr(l1, n1), getattr(l2, n2))


def test_train_is_reproducible():
    data = gen_dataset(4, 64)
    cfg = TrainConfig(epochs=2, batch_size=16, seed=9)
    net = pipeline.default_net(9)
    t1, c1 = train(net, data, cfg)
    t2, c2 = train(net, data, cfg)
    for (l1, n1), (l2, n2) in zip(t1.parameters(), t2.parameters()):
        assert np.array_equal(getattr(l1, n1), getattr(l2, n2))
    assert c1 == c2


def test_train_reaches_high_accuracy(seed7_run):
    # 30 epochs on gen_dataset(7, 400); observed final train accuracy 1.0
    assert seed7_run["curve"][-1].train_acc >= 0.95


def test_train_curve_schema(seed7_run, tmp_path):
    path = tmp_path / "curve.csv"
    micronet.write_curve(seed7_run["curve"], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,loss,train_acc,test_acc"
    assert len(lines) == 31


def test_diverged_loss_raises():
    net = MicroNet(TINY_SPECS, in_shape=(1, 8, 8), seed=3)
    for layer, name in net.parameters():  # positive weights keep features positive
        getattr(layer, name)[...] = 1.0
    net.layers[-1].weight[...] = 1e38  # logits overflow to inf, loss goes NaN
    data = Dataset(
        images=np.full((8, 1, 8, 8), 1.0, dtype=np.float32),
        labels=np.zeros(8, dtype=np.int64),
    )
    cfg = TrainConfig(epochs=1, batch_size=8, seed=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergedLoss):
            train(net, data, cfg)


# --- evaluation ------------------------------------------------------------------

def test_evaluate_zero_net_predicts_class_zero():
    net = pipeline.default_net(0)
    for layer, name in net.parameters():
        getattr(layer, name)[...] = 0.0
    data = gen_dataset(5, 100)
    assert evaluate(net, data) == 0.25


def test_evaluate_perfect_net(seed7_run):
    assert evaluate(seed7_run["net"], seed7_run["train_data"]) == 1.0


# --- surgery ---------------------------------------------------------------------

def test_identity_plan_preserves_logits(seed7_run):
    net = seed7_run["net"]
    plan = make_random_plan(net.conv_channels(), PruneSpec(ratio=0.0), PlanConfig(), seed=0)
    same = apply_plan(net, plan)
    x = seed7_run["test_data"].images[:16]
    l1, _ = net._forward(x)
    l2, _ = same._forward(x)
    assert np.array_equal(l1, l2)
    for (a, an), (b, bn) in zip(net.parameters(), same.parameters()):
        assert np.array_equal(getattr(a, an), getattr(b, bn))


def test_pruning_zero_weight_channel_is_output_invariant():
    net = pipeline.default_net(11)
    victim = 5
    # kill channel 5 of conv 0: its outgoing filters and its own weights
    net.layers[0].weight[victim] = 0.0
    net.layers[0].bias[victim] = 0.0
    net.layers[3].weight[:, victim] = 0.0  # conv 1 input slices
    plan_doc = {
        0: sorted(set(range(16)) - {victim}),
        1: list(range(32)),
    }
    from freqprune.planner import LayerPlan, ModelPlan

    layers = tuple(
        LayerPlan(
            layer_index=i,
            channels=len(plan_doc[i]) + (1 if i == 0 else 0),
            threshold=1 if i == 0 else 0,
            saved=tuple(plan_doc[i]),
            pruned=(victim,) if i == 0 else (),
        )
        for i in (0, 1)
    )
    plan = ModelPlan(layers=layers, config=PlanConfig(), created_from="trained")
    pruned = apply_plan(net, plan)
    x = gen_dataset(12, 32).images
    l1, _ = net._forward(x)
    l2, _ = pruned._forward(x)
    assert np.max(np.abs(l1 - l2)) < 1e-6


def test_surgery_keeps_surviving_weights_bit_exact(seed7_run):
    net, plan = seed7_run["net"], seed7_run["plan"]
    pruned = apply_plan(net, plan)
    saved0 = list(plan.layers[0].saved)
    saved1 = list(plan.layers[1].saved)
    assert np.array_equal(pruned.layers[0].weight, net.layers[0].weight[saved0])
    assert np.array_equal(pruned.layers[0].bias, net.layers[0].bias[saved0])
    assert np.array_equal(
        pruned.layers[3].weight, net.layers[3].weight[saved1][:, saved0]
    )
    lin_old = net.layers[7].weight.reshape(4, 32, 4, 4)
    assert np.array_equal(
        pruned.layers[7].weight, lin_old[:, saved1].reshape(4, -1)
    )


def test_surgery_parameter_count(seed7_run):
    pruned = apply_plan(seed7_run["net"], seed7_run["plan"])
    # conv 8x1x3x3+8, conv 16x8x3x3+16, linear 4x(16*4*4)+4
    assert pruned.num_params() == (8 * 9 + 8) + (16 * 8 * 9 + 16) + (4 * 256 + 4)
    assert seed7_run["net"].num_params() == (16 * 9 + 16) + (32 * 16 * 9 + 32) + (4 * 512 + 4)


def test_plan_mismatch_detected(seed7_run):
    bad = make_random_plan({0: 16, 1: 31}, PruneSpec(ratio=0.5), PlanConfig(), seed=0)
    with pytest.raises(PlanMismatch):
        apply_plan(seed7_run["net"], bad)
    missing = make_random_plan({0: 16}, PruneSpec(ratio=0.5), PlanConfig(), seed=0)
    with pytest.raises(PlanMismatch):
        apply_plan(seed7_run["net"], missing)


# --- attacks ---------------------------------------------------------------------

def test_fgsm_zero_epsilon_is_identity(seed7_run):
    data = seed7_run["test_data"]
    adv = fgsm(seed7_run["net"], data.images[:8], data.labels[:8], 0.0)
    assert np.array_equal(adv, data.images[:8])


def test_attacks_respect_epsilon_ball(seed7_run):
    data = seed7_run["test_data"]
    net = seed7_run["net"]
    for eps in (0.05, 0.1, 0.3):
        for attack in (fgsm, pgd):
            adv = attack(net, data.images[:32], data.labels[:32], eps)
            assert float(np.max(np.abs(adv - data.images[:32]))) <= eps + 1e-7
            assert float(adv.min()) >= 0.0 and float(adv.max()) <= 1.0


def test_fgsm_degrades_accuracy(seed7_run):
    net, data = seed7_run["net"], seed7_run["test_data"]
    adv = fgsm(net, data.images, data.labels, 0.3)
    adv_acc = evaluate(net, Dataset(images=adv, labels=data.labels))
    assert adv_acc < seed7_run["clean_test_acc"]


def test_pgd_at_least_as_strong_as_fgsm(seed7_run):
    net, data = seed7_run["net"], seed7_run["test_data"]
    fg = evaluate(net, Dataset(fgsm(net, data.images, data.labels, 0.2), data.labels))
    pg = evaluate(net, Dataset(pgd(net, data.images, data.labels, 0.2), data.labels))
    assert pg <= fg + 0.05


# --- weight store ----------------------------------------------------------------

def test_weight_store_roundtrip(tmp_path, seed7_run):
    net = seed7_run["net"]
    save_weights(net, tmp_path / "w")
    loaded = load_weights(tmp_path / "w")
    assert loaded.specs == net.specs
    for (a, an), (b, bn) in zip(net.parameters(), loaded.parameters()):
        assert np.array_equal(getattr(a, an), getattr(b, bn))
    x = seed7_run["test_data"].images[:8]
    assert np.array_equal(net._forward(x)[0], loaded._forward(x)[0])


def test_weight_store_files(tmp_path):
    net = pipeline.default_net(0)
    save_weights(net, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [
        "arch.json",
        "conv0_bias.cfd", "conv0_weight.cfd",
        "conv1_bias.cfd", "conv1_weight.cfd",
        "linear0_bias.cfd", "linear0_weight.cfd",
    ]


def test_weight_store_rejects_shape_mismatch(tmp_path):
    net = pipeline.default_net(0)
    save_weights(net, tmp_path)
    other = MicroNet((conv(8, 3), relu(), maxpool(), conv(32, 3), relu(), maxpool(),
                      flatten(), linear(4)), seed=0)
    save_weights(other, tmp_path / "other")
    import shutil

    shutil.copy(tmp_path / "other" / "conv0_weight.cfd", tmp_path / "conv0_weight.cfd")
    with pytest.raises(ShapeMismatch):
        load_weights(tmp_path)
