import math
import warnings

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sartm import tensor as T
from sartm.errors import ConfigError, LossWarning
from sartm.losses import (
    IGNORE_INDEX,
    LossWeights,
    l_cr,
    l_se,
    mask_average_pool,
    nearest_resize,
    ohem_ce,
    total_loss,
)
from sartm.tensor import Tensor


def ohem_oracle(logits, labels, thresh=0.7):
    """Sort / filter / pad reference written with plain Python loops."""
    n, c, h, w = logits.shape
    per_image = []
    for b in range(n):
        ces, probs = [], []
        for i in range(h * w):
            y = int(labels[b].reshape(-1)[i])
            if y == IGNORE_INDEX:
                continue
            z = [float(logits[b, k].reshape(-1)[i]) for k in range(c)]
            m = max(z)
            lse = m + math.log(sum(math.exp(v - m) for v in z))
            ce = lse - z[y]
            ces.append((ce, i))
            probs.append(math.exp(-ce))
        if not ces:
            continue
        total = len(ces)
        hard = [ces[j] for j in range(total) if probs[j] < thresh]
        need = max(1, total // 16)
        if len(hard) < need:
            ranked = sorted(ces, key=lambda t: (-t[0], t[1]))
            chosen = ranked[:need]
        else:
            chosen = hard
        per_image.append(sum(ce for ce, _ in chosen) / len(chosen))
    return sum(per_image) / len(per_image) if per_image else 0.0


def random_instance(rng, kind="mixed"):
    n = int(rng.integers(1, 4))
    c = int(rng.integers(2, 6))
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    labels = rng.integers(0, c, size=(n, h, w))
    scale = rng.choice([0.1, 1.0, 5.0])
    logits = rng.normal(scale=scale, size=(n, c, h, w))
    if kind == "ignored":
        labels[:] = IGNORE_INDEX
    elif kind == "easy":
        onehot = np.eye(c)[labels].transpose(0, 3, 1, 2)
        logits = 20.0 * onehot + rng.normal(scale=0.1, size=logits.shape)
    else:
        labels[rng.random(labels.shape) < rng.random()] = IGNORE_INDEX
        if rng.random() < 0.2:
            labels[0] = IGNORE_INDEX  # one image fully ignored inside a batch
    return logits, labels


class TestOhem:
    def test_oracle_on_200_instances(self):
        rng = np.random.default_rng(2024)
        kinds = ["ignored"] * 10 + ["easy"] * 30 + ["mixed"] * 160
        for kind in kinds:
            logits, labels = random_instance(rng, kind)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LossWarning)
                got = float(ohem_ce(Tensor(logits), labels).data)
            assert abs(got - ohem_oracle(logits, labels)) <= 1e-6, kind

    def test_three_hard_of_sixteen(self):
        # 16 valid pixels, 3 with true-class probability below 0.7
        labels = np.zeros((1, 4, 4), dtype=int)
        logits = np.zeros((1, 2, 4, 4))
        logits[0, 0] = 3.0  # p(true) = 1/(1+e^-3) ≈ 0.95
        hard = [(0, 1), (2, 2), (3, 0)]
        margins = [0.5, -1.0, 0.2]
        for (i, j), m in zip(hard, margins):
            logits[0, 0, i, j] = m
        want = np.mean([math.log1p(math.exp(-m)) for m in margins])
        npt.assert_allclose(float(ohem_ce(Tensor(logits), labels).data), want, atol=1e-12)

    def test_confident_prediction_near_zero(self):
        labels = np.random.default_rng(0).integers(0, 3, size=(1, 8, 8))
        logits = 50.0 * np.eye(3)[labels].transpose(0, 3, 1, 2)
        assert float(ohem_ce(Tensor(logits), labels).data) < 1e-12

    def test_all_ignored_warns_and_returns_zero(self):
        labels = np.full((1, 3, 3), IGNORE_INDEX)
        with pytest.warns(LossWarning):
            out = ohem_ce(Tensor(np.zeros((1, 2, 3, 3))), labels)
        assert float(out.data) == 0.0

    def test_ignored_pixels_carry_no_gradient(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 3, size=(1, 4, 4))
        labels[0, 0, :] = IGNORE_INDEX
        x = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
        T.backward(ohem_ce(x, labels, thresh=1.0))
        assert not np.any(x.grad[0, :, 0, :])


class TestMaskAveragePool:
    def test_two_pixels_mean(self):
        f = np.array([[[1.0, 3.0]], [[2.0, 4.0]]])  # d=2, 1×2 map: pixels (1,2) and (3,4)
        protos, present = mask_average_pool(Tensor(f), np.array([[0, 0]]), 2)
        npt.assert_allclose(protos.data[0], [2, 3])
        assert present.tolist() == [True, False]

    def test_single_class_is_global_average(self):
        f = np.random.default_rng(0).normal(size=(1, 5, 4, 4))
        protos, _ = mask_average_pool(Tensor(f), np.full((1, 4, 4), 2), 3)
        npt.assert_allclose(protos.data[2], f.mean(axis=(0, 2, 3)), atol=1e-12)

    def test_matches_pixel_loop(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(1, 4, 8, 8))
        y = rng.integers(0, 3, size=(1, 8, 8))
        y[0, 0, :3] = IGNORE_INDEX
        protos, present = mask_average_pool(Tensor(f), y, 3)
        for k in range(3):
            acc, cnt = np.zeros(4), 0
            for i in range(8):
                for j in range(8):
                    if y[0, i, j] == k:
                        acc += f[0, :, i, j]
                        cnt += 1
            npt.assert_allclose(protos.data[k], acc / cnt, atol=1e-12)
            assert present[k]

    def test_labels_nearest_downsampled(self):
        y = np.arange(16).reshape(1, 4, 4) % 3
        npt.assert_array_equal(nearest_resize(y, (2, 2)), y[:, 1::2, 1::2])


class TestLcr:
    def test_confident_correct_is_zero(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 3, size=(1, 4, 4))
        f = 1e3 * np.eye(3)[y].transpose(0, 3, 1, 2)
        assert float(l_cr(Tensor(f), y, Tensor(np.eye(3))).data) < 1e-6

    def test_uniform_prediction_is_log_c(self):
        y = np.random.default_rng(0).integers(0, 4, size=(2, 4, 4))
        f = np.random.default_rng(1).normal(size=(2, 6, 4, 4))
        npt.assert_allclose(float(l_cr(Tensor(f), y, Tensor(np.zeros((6, 4)))).data), math.log(4), atol=1e-12)

    def test_ignored_pixel_feature_irrelevant(self):
        rng = np.random.default_rng(2)
        y = rng.integers(0, 3, size=(1, 4, 4))
        y[0, 1, 2] = IGNORE_INDEX
        f = rng.normal(size=(1, 5, 4, 4))
        w = Tensor(rng.normal(size=(5, 3)))
        a = float(l_cr(Tensor(f), y, w).data)
        f[0, :, 1, 2] = -f[0, :, 1, 2] * 7
        assert float(l_cr(Tensor(f), y, w).data) == a


def two_class_kl(ct, cs, tau):
    t = np.array([1.0, math.exp((ct - 1) / tau)])
    s = np.array([1.0, math.exp((cs - 1) / tau)])
    t, s = t / t.sum(), s / s.sum()
    return float(np.sum(t * np.log(t / s)))


class TestLse:
    def test_proportional_features_give_zero(self):
        rng = np.random.default_rng(0)
        teacher = rng.normal(size=(4, 6))
        student = teacher * rng.uniform(0.5, 3, size=(4, 1))
        assert float(l_se(Tensor(student), np.ones(4, bool), teacher).data) < 1e-10

    def test_two_classes_closed_form(self):
        tau = 0.5
        teacher = np.array([[1.0, 0.0], [0.6, 0.8]])  # cosine 0.6
        student = np.array([[1.0, 0.0], [0.0, 1.0]])  # cosine 0
        got = float(l_se(Tensor(student), np.array([True, True]), teacher, tau=tau).data)
        npt.assert_allclose(got, two_class_kl(0.6, 0.0, tau), atol=1e-12)

    def test_absent_classes_dropped(self):
        rng = np.random.default_rng(1)
        teacher, student = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        present = np.array([True, False, True, True])
        a = float(l_se(Tensor(student), present, teacher).data)
        b = float(l_se(Tensor(student[[0, 2, 3]]), np.ones(3, bool), teacher[[0, 2, 3]]).data)
        npt.assert_allclose(a, b, atol=1e-12)

    def test_scaling_by_three(self):
        rng = np.random.default_rng(3)
        teacher, student = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        a = float(l_se(Tensor(student), np.ones(3, bool), teacher).data)
        b = float(l_se(Tensor(3 * student), np.ones(3, bool), teacher).data)
        npt.assert_allclose(a, b, atol=1e-10)

    def test_one_class_warns(self):
        with pytest.warns(LossWarning):
            out = l_se(Tensor(np.ones((3, 2))), np.array([True, False, False]), np.ones((3, 2)))
        assert float(out.data) == 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_invariances(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 6))
        teacher, student = rng.normal(size=(k, 4)), rng.normal(size=(k, 4))
        present = np.ones(k, bool)
        base = float(l_se(Tensor(student), present, teacher).data)
        assert base >= 0
        scaled = student * rng.uniform(0.01, 100, size=(k, 1))
        assert abs(float(l_se(Tensor(scaled), present, teacher).data) - base) <= 1e-6
        perm = rng.permutation(k)
        assert abs(float(l_se(Tensor(student[perm]), present, teacher[perm]).data) - base) <= 1e-6


def loss_inputs(rng, n=2, c=3, d=8, h=8):
    return dict(
        s_main=Tensor(rng.normal(size=(n, c, h, h))),
        s_aux=Tensor(rng.normal(size=(n, c, h, h))),
        labels=rng.integers(0, c, size=(n, h, h)),
        features=Tensor(rng.normal(size=(n, d, h // 4, h // 4))),
        teacher=rng.normal(size=(c, 5)),
        classifier=Tensor(rng.normal(size=(d, c))),
    )


class TestTotalLoss:
    def test_default_weights(self):
        w = LossWeights()
        assert (w.w0, w.w1, w.w2, w.w3) == (1.0, 0.008, 10000.0, 100.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(w1=-1)

    def test_degenerate_weights(self):
        inp = loss_inputs(np.random.default_rng(0))
        total, _ = total_loss(**inp, weights=LossWeights(w0=2.0, w1=0, w2=0, w3=0))
        npt.assert_allclose(float(total.data), 2.0 * float(ohem_ce(inp["s_main"], inp["labels"]).data))

    def test_breakdown_sums_to_total(self):
        inp = loss_inputs(np.random.default_rng(1))
        total, bd = total_loss(**inp)
        parts = sum(bd[f"weighted_{t}"] for t in ("ce_main", "ce_aux", "cr", "se"))
        assert abs(parts - bd["total"]) <= 1e-6 * max(1.0, abs(bd["total"]))
        assert bd["total"] == float(total.data)

    def test_zero_weight_term_not_on_graph(self):
        inp = loss_inputs(np.random.default_rng(2))
        inp["classifier"].requires_grad = True
        inp["s_main"].requires_grad = True
        total, _ = total_loss(**inp, weights=LossWeights(w2=0.0))
        T.backward(total)
        assert inp["classifier"].grad is None
        assert inp["s_main"].grad is not None

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_all_terms_nonnegative(self, seed):
        _, bd = total_loss(**loss_inputs(np.random.default_rng(seed)))
        for t in ("ce_main", "ce_aux", "cr", "se"):
            assert bd[t] >= -1e-12
