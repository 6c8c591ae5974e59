import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import grad_rel_error, whiten
from sklearn.metrics import average_precision_score

from sar2opt.backbone import EncoderConfig, FeatureBundle, ViTEncoder
from sar2opt.distill import (
    DistillWeights,
    EncoderTrainConfig,
    attn_loss,
    average_precision,
    class_weight,
    classification_metrics,
    cls_loss,
    distill_student,
    logit_loss,
    task_loss,
    total_student_loss,
    train_teacher,
    vicreg_loss,
    vicreg_terms,
)
from sar2opt.distill.losses import attention_kl
from sar2opt.errors import ConfigError, ShapeError, ValidationError
from sar2opt.synthdata import DatasetConfig, build_dataset

LAYERS = (1, 3)
SMALL = dict(depth=4, embed_dim=32, heads=4, aligned_layers=(0, 1, 2, 3), hier_layers=(0, 1, 2, 3))


def weights_for(counts, total, **kw):
    return DistillWeights(class_counts=list(counts), total=total, **kw)


def rand_simplex(gen, *shape):
    return torch.softmax(torch.randn(*shape, generator=gen, dtype=torch.float64) * 2, dim=-1)


def toy_bundle(gen, b=2, d=6, n=5, c=3):
    return FeatureBundle(
        {l: torch.randn(b, d, generator=gen, dtype=torch.float64) for l in LAYERS},
        {l: rand_simplex(gen, b, n) for l in LAYERS},
        {},
        torch.randn(b, c, generator=gen, dtype=torch.float64),
        torch.randn(b, d, generator=gen, dtype=torch.float64),
    )


# class weights


@pytest.mark.parametrize(
    "n_c,n,expected",
    [(100, 500, 4.0), (250, 500, 1.0), (400, 500, 1.0), (5, 1000, 100.0), (20, 1000, 49.0)],
)
def test_class_weight_examples(n_c, n, expected):
    assert class_weight(0, weights_for([n_c], n)) == expected


def test_class_weight_absent_class_uses_alpha_max():
    assert class_weight(0, weights_for([0], 100)) == 100.0


def test_class_weight_count_exceeds_total():
    with pytest.raises(ValidationError):
        class_weight(0, weights_for([11], 10))


@pytest.mark.parametrize("kw", [dict(alpha_min=5, alpha_max=2), dict(temperature=0), dict(lambda_kd=-1)])
def test_invalid_weights(kw):
    with pytest.raises(ConfigError):
        DistillWeights(**kw)


# task loss


def test_task_loss_unit_weights_is_plain_bce():
    gen = torch.Generator().manual_seed(0)
    z = torch.randn(4, 6, generator=gen, dtype=torch.float64)
    y = (torch.rand(4, 6, generator=gen) > 0.5).double()
    expected = torch.nn.functional.binary_cross_entropy_with_logits(z, y)
    torch.testing.assert_close(task_loss(z, y, torch.ones(6, dtype=torch.float64)), expected)


def test_task_loss_weight_only_on_positive_term():
    z = torch.tensor([[0.3, -1.2]], dtype=torch.float64)
    w = torch.tensor([3.0, 3.0], dtype=torch.float64)
    # a negative label never sees the weight
    neg = task_loss(z, torch.zeros(1, 2, dtype=torch.float64), w)
    expected = -(math.log(1 - 1 / (1 + math.exp(-0.3))) + math.log(1 - 1 / (1 + math.exp(1.2)))) / 2
    assert neg.item() == pytest.approx(expected, rel=1e-12)
    pos = task_loss(z, torch.ones(1, 2, dtype=torch.float64), w)
    expected = -3 * (math.log(1 / (1 + math.exp(-0.3))) + math.log(1 / (1 + math.exp(1.2)))) / 2
    assert pos.item() == pytest.approx(expected, rel=1e-12)


def test_task_loss_rejects_soft_labels():
    with pytest.raises(ValidationError):
        task_loss(torch.zeros(1, 2), torch.full((1, 2), 0.5), torch.ones(2))


def test_task_loss_gradient():
    gen = torch.Generator().manual_seed(1)
    y = (torch.rand(3, 6, generator=gen) > 0.5).double()
    w = torch.rand(6, generator=gen, dtype=torch.float64) * 10 + 1
    z = torch.randn(3, 6, generator=gen, dtype=torch.float64)
    assert grad_rel_error(lambda v: task_loss(v, y, w), z) < 1e-4


# logit loss


def test_logit_loss_example():
    # student logit 0, teacher logit 2, T = 4 -> target sigma(0.5)
    p = 1 / (1 + math.exp(-0.5))
    got = logit_loss(torch.zeros(1, 1, dtype=torch.float64), torch.full((1, 1), 2.0, dtype=torch.float64), 4.0)
    assert got.item() == pytest.approx(math.log(2), rel=1e-12)
    assert p == pytest.approx(0.6225, abs=1e-4)


def test_logit_loss_gradient_closed_form():
    gen = torch.Generator().manual_seed(2)
    zs = torch.randn(3, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    zt = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    logit_loss(zs, zt, 4.0).backward()
    expected = (torch.sigmoid(zs / 4) - torch.sigmoid(zt / 4)) / 4 / zs.numel()
    torch.testing.assert_close(zs.grad, expected.detach())


@settings(max_examples=30, deadline=None)
@given(zt=st.floats(-8, 8), t=st.floats(0.5, 8))
def test_logit_loss_minimiser_matches_teacher(zt, t):
    zt_ = torch.tensor([[zt]], dtype=torch.float64)
    grid = torch.linspace(-20, 20, 4001, dtype=torch.float64)
    losses = torch.stack([logit_loss(g.view(1, 1), zt_, t) for g in grid])
    assert abs(grid[losses.argmin()].item() - zt) <= 0.011


def test_logit_loss_teacher_gets_no_gradient():
    zs = torch.randn(2, 3, requires_grad=True)
    zt = torch.randn(2, 3, requires_grad=True)
    logit_loss(zs, zt).backward()
    assert zt.grad is None


def test_logit_loss_shape_error():
    with pytest.raises(ShapeError):
        logit_loss(torch.zeros(2, 3), torch.zeros(2, 4))


# attention loss


def test_attention_identical_maps_zero():
    gen = torch.Generator().manual_seed(3)
    maps = {l: rand_simplex(gen, 2, 7) for l in LAYERS}
    assert attn_loss(maps, maps, LAYERS).item() == pytest.approx(0.0, abs=1e-15)


def test_attention_uniform_against_one_hot():
    n = 8
    uniform = torch.full((1, n), 1 / n, dtype=torch.float64)
    one_hot = torch.zeros(1, n, dtype=torch.float64)
    one_hot[0, 2] = 1
    assert attention_kl(uniform, one_hot).item() == pytest.approx(math.log(n), rel=1e-12)


def test_attention_unnormalised_rejected():
    bad = {l: torch.full((1, 4), 0.3) for l in LAYERS}
    good = {l: torch.full((1, 4), 0.25) for l in LAYERS}
    with pytest.raises(ValidationError):
        attn_loss(bad, good, LAYERS)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_attention_kl_nonnegative(seed):
    gen = torch.Generator().manual_seed(seed)
    a, b = rand_simplex(gen, 3, 9), rand_simplex(gen, 3, 9)
    assert torch.all(attention_kl(a, b) >= -1e-12)


# cls loss


def test_cls_loss_examples():
    cls_t = {l: torch.zeros(1, 128) for l in LAYERS}
    assert cls_loss(cls_t, cls_t, LAYERS).item() == 0.0
    cls_s = {l: torch.ones(1, 128) for l in LAYERS}
    assert cls_loss(cls_s, cls_t, LAYERS).item() == 128.0


def test_cls_loss_gradient_closed_form():
    gen = torch.Generator().manual_seed(4)
    cls_s = {l: torch.randn(1, 5, generator=gen, dtype=torch.float64, requires_grad=True) for l in LAYERS}
    cls_t = {l: torch.randn(1, 5, generator=gen, dtype=torch.float64) for l in LAYERS}
    cls_loss(cls_s, cls_t, LAYERS).backward()
    for l in LAYERS:
        torch.testing.assert_close(cls_s[l].grad, 2 * (cls_s[l] - cls_t[l]).detach() / len(LAYERS))


def test_cls_loss_shape_error():
    with pytest.raises(ShapeError):
        cls_loss({1: torch.zeros(1, 4)}, {1: torch.zeros(1, 5)}, (1,))


# vicreg


def test_vicreg_invariance_zero_for_equal_inputs():
    z = torch.randn(8, 4)
    assert vicreg_terms(z, z.clone())["inv"].item() == 0.0


def test_vicreg_variance_zero_at_unit_std():
    gen = torch.Generator().manual_seed(5)
    z = torch.randn(16, 4, generator=gen, dtype=torch.float64)
    z = (z - z.mean(0)) / z.std(0) * 1.5
    assert vicreg_terms(z, z, eps=0.0)["var"].item() == 0.0


def test_vicreg_covariance_vanishes_for_whitened_batch():
    rng = np.random.default_rng(6)
    z = torch.from_numpy(whiten(rng.standard_normal((32, 6)) @ rng.standard_normal((6, 6))))
    assert vicreg_terms(z, z)["cov"].item() < 1e-3


def test_vicreg_batch_of_one_rejected():
    with pytest.raises(ValidationError):
        vicreg_terms(torch.zeros(1, 3), torch.zeros(1, 3))


def test_vicreg_weighted_sum():
    gen = torch.Generator().manual_seed(7)
    zs, zt = torch.randn(6, 4, generator=gen), torch.randn(6, 4, generator=gen)
    t = vicreg_terms(zs, zt)
    w = DistillWeights(lambda_inv=2.0, mu_var=3.0, nu_cov=0.5)
    torch.testing.assert_close(vicreg_loss(zs, zt, w), 2 * t["inv"] + 3 * t["var"] + 0.5 * t["cov"])


def test_vicreg_gradient():
    gen = torch.Generator().manual_seed(8)
    zs, zt = torch.randn(5, 4, generator=gen, dtype=torch.float64), torch.randn(5, 4, generator=gen, dtype=torch.float64)
    w = DistillWeights()
    assert grad_rel_error(lambda v: vicreg_loss(v, zt, w), zs) < 1e-4


# total objective


def test_total_matches_breakdown_and_masks():
    gen = torch.Generator().manual_seed(9)
    bs, bt = toy_bundle(gen), toy_bundle(gen)
    y = torch.tensor([[1.0, 0, 1], [0, 1, 0]], dtype=torch.float64)
    w = weights_for([1, 1, 1], 2, lambda_kd=0.7, lambda_attn=1.3)
    total, br = total_student_loss(bs, bt, y, w, LAYERS)
    assert total.item() == pytest.approx(br["task"] + 0.7 * br["logit"] + 1.3 * (br["attn"] + br["cls"]) + br["vicreg"], rel=1e-12)
    assert all(br[k] >= 0 for k in ("task", "logit", "attn", "cls", "vicreg"))

    off = weights_for([1, 1, 1], 2, lambda_kd=0, lambda_attn=0, lambda_inv=0, mu_var=0, nu_cov=0)
    total, br = total_student_loss(bs, bt, y, off, LAYERS)
    assert total.item() == br["task"]


def test_total_gradient_on_toy_batch():
    gen = torch.Generator().manual_seed(10)
    bs, bt = toy_bundle(gen), toy_bundle(gen)
    y = torch.tensor([[1.0, 0, 1], [0, 1, 0]], dtype=torch.float64)
    w = weights_for([1, 1, 1], 2)
    proj = torch.randn(4, 6, generator=gen, dtype=torch.float64)

    def loss(x):
        # every bundle entry of the student is a smooth function of x
        h = x @ proj
        s = FeatureBundle(
            {l: h[:, :6] * (l + 1) for l in LAYERS},
            {l: torch.softmax(h[:, :5] / (l + 1), -1) for l in LAYERS},
            {},
            h[:, :3],
            torch.tanh(h),
        )
        return total_student_loss(s, bt, y, w, LAYERS)[0]

    x = torch.randn(2, 4, generator=gen, dtype=torch.float64)
    assert grad_rel_error(loss, x) < 1e-3


# metrics


def test_average_precision_hand_computed():
    probs = np.array([[0.9, 0.1], [0.8, 0.4], [0.7, 0.35], [0.6, 0.8], [0.5, 0.2]])
    labels = np.array([[1, 0], [0, 0], [1, 1], [0, 1], [1, 0]])
    # class 0 hits at ranks 1, 3, 5; class 1 hits at ranks 1, 3
    assert average_precision(probs[:, 0], labels[:, 0]) == pytest.approx((1 + 2 / 3 + 3 / 5) / 3, rel=1e-12)
    assert average_precision(probs[:, 1], labels[:, 1]) == pytest.approx((1 + 2 / 3) / 2, rel=1e-12)
    m = classification_metrics(probs, labels)
    assert m["ap_macro"] == pytest.approx(((1 + 2 / 3 + 3 / 5) / 3 + (1 + 2 / 3) / 2) / 2, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 40), levels=st.integers(2, 20))
def test_average_precision_matches_sklearn(seed, n, levels):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0] = 1
    s = rng.integers(0, levels, n) / levels  # ties on purpose
    assert average_precision(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)


def test_perfect_predictions():
    labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0]], dtype=float)
    m = classification_metrics(labels, labels)
    assert m == {"ap_macro": 1.0, "ap_micro": 1.0, "f1_macro": 1.0, "f1_micro": 1.0}


def test_class_without_positives_excluded():
    probs = np.array([[0.9, 0.2], [0.1, 0.4]])
    labels = np.array([[1, 0], [0, 0]])
    assert classification_metrics(probs, labels)["ap_macro"] == 1.0


def test_metrics_reject_bad_probs():
    with pytest.raises(ValidationError):
        classification_metrics(np.array([[1.2]]), np.array([[1.0]]))


# training loops


@pytest.fixture(scope="module")
def tiny_data():
    return build_dataset(DatasetConfig(n_scenes=40, seed=3))["train"]


def test_teacher_overfits_small_set(tiny_data):
    data = tiny_data.subset(range(10))
    cfg = EncoderTrainConfig(steps=200, batch_size=10, lr=1e-2, warmup=10, val_fraction=0.0, augment=False, seed=1)
    model, records = train_teacher(data, EncoderConfig(**SMALL), cfg)
    losses = np.array([r["loss"] for r in records])
    assert losses[-1] < 0.05
    blocks = losses.reshape(10, -1).mean(axis=1)
    assert np.all(np.diff(blocks) <= 0)
    base = ViTEncoder(EncoderConfig(**SMALL)).base_state()
    for k, v in model.base_state().items():
        assert torch.equal(v, base[k]), k


def test_distillation_leaves_teacher_untouched(tiny_data):
    cfg = EncoderTrainConfig(steps=4, batch_size=8, warmup=1, eval_every=2, seed=2)
    teacher, _ = train_teacher(tiny_data, EncoderConfig(**SMALL), cfg)
    before = {k: v.clone() for k, v in teacher.state_dict().items()}
    student, records = distill_student(tiny_data, teacher, DistillWeights(), cfg)
    assert all(torch.equal(v, before[k]) for k, v in teacher.state_dict().items())
    assert {"task", "logit", "attn", "cls", "vicreg", "total", "lr"} <= set(records[0])


def test_distillation_rejects_unpaired(tiny_data):
    bad = tiny_data.subset(range(4))
    bad.optical = bad.optical[:3]
    teacher = ViTEncoder(EncoderConfig(**SMALL))
    with pytest.raises(ValidationError):
        distill_student(bad, teacher, DistillWeights(), EncoderTrainConfig(steps=1))
