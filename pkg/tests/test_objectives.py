import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langadv import autodiff as ad
from langadv import objectives as obj
from langadv.autodiff import Parameter, Tensor
from langadv.encoder import EncoderConfig, EncoderParameters, TokenBatch, encode, mean_pool

# mpmath, 40 digits
LN4 = 1.3862943611198906
SOFTMAX_123 = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
NEG_LN_07 = 0.3566749439387324
LN2_PLUS_LN4 = 2.0794415416798357
THREE_LN9 = 6.591673732008658
SIGMOID_1 = 0.7310585786300049
DISC_08_03 = 0.5798184952529422
GEN_08_03 = 2.8134107167600364
TWO_LN_1E12 = 55.262042231857095


def head(W, b):
    return obj.TaskHead(Parameter("task.weight", W), Parameter("task.bias", b))


def disc(w, b):
    return obj.Discriminator(Parameter("disc.weight", w), Parameter("disc.bias", [b]))


class TestClassifyDoc:
    def test_zero_head_uniform(self):
        p = obj.classify_doc(head(np.zeros((4, 3)), np.zeros(4)), Tensor(np.random.default_rng(0).normal(size=(5, 3))))
        np.testing.assert_array_equal(p.data, np.full((5, 4), 0.25))

    def test_dominant_bias(self):
        p = obj.classify_doc(head(np.zeros((4, 3)), [10.0, 0, 0, 0]), Tensor(np.random.default_rng(1).normal(size=(6, 3))))
        assert np.all(p.data.argmax(-1) == 0)

    def test_logits_123(self):
        # identity weights on a 3-wide input make the logits equal the input
        p = obj.classify_doc(head(np.eye(3), np.zeros(3)), Tensor([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(p.data[0], SOFTMAX_123, rtol=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(ad.ShapeError):
            obj.classify_doc(head(np.zeros((4, 3)), np.zeros(4)), Tensor(np.zeros((2, 5))))


class TestTaskLossDoc:
    def test_uniform(self):
        assert obj.task_loss_doc(Tensor([[0.25] * 4]), [2]).item() == pytest.approx(LN4, abs=1e-15)

    def test_perfect(self):
        loss = obj.task_loss_doc(Tensor([[1.0, 0.0, 0.0, 0.0]]), [0]).item()
        assert 0 <= loss <= -math.log(1 - 1e-12) + 1e-18

    def test_07(self):
        loss = obj.task_loss_doc(Tensor([[0.7, 0.1, 0.1, 0.1]]), [0]).item()
        assert loss == pytest.approx(NEG_LN_07, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            obj.task_loss_doc(Tensor([[0.25] * 4]), [4])

    def test_batch_sum_and_mean(self):
        p = Tensor([[0.7, 0.1, 0.1, 0.1], [0.25] * 4])
        s = obj.task_loss_doc(p, [0, 1]).item()
        assert s == pytest.approx(NEG_LN_07 + LN4, abs=1e-12)
        assert obj.task_loss_doc(p, [0, 1], reduction="mean").item() == pytest.approx(s / 2, abs=1e-12)


class TestTaskLossSeq:
    def test_uniform_tokens(self):
        h = head(np.zeros((9, 4)), np.zeros(9))
        loss = obj.task_loss_seq(Tensor(np.ones((1, 3, 4))), h, [[0, 3, 8]], [[1, 1, 1]])
        assert loss.item() == pytest.approx(THREE_LN9, abs=1e-12)

    def test_no_unmasked_positions(self):
        h = head(np.zeros((9, 4)), np.zeros(9))
        with pytest.raises(ValueError):
            obj.task_loss_seq(Tensor(np.ones((1, 2, 4))), h, [[]], [[0, 0]])

    def test_half_and_quarter(self):
        # two-class head reading a one-hot state: logit gap ln 1 for token 0, ln 3 for token 1
        h = head(np.array([[0.0, 0.0], [0.0, math.log(3.0)]]), np.zeros(2))
        states = Tensor([[[1.0, 0.0], [0.0, 1.0]]])
        # token 0: p = [.5, .5], true class 0; token 1: p = [.25, .75], true class 0
        loss = obj.task_loss_seq(states, h, [[0, 0]], [[1, 1]])
        assert loss.item() == pytest.approx(LN2_PLUS_LN4, abs=1e-12)

    def test_length_mismatch(self):
        h = head(np.zeros((9, 4)), np.zeros(9))
        with pytest.raises(ValueError):
            obj.task_loss_seq(Tensor(np.ones((1, 3, 4))), h, [[0, 1]], [[1, 1, 1]])

    def test_masked_positions_ignored(self):
        rng = np.random.default_rng(2)
        h = head(rng.normal(size=(3, 4)), rng.normal(size=3))
        states = rng.normal(size=(1, 4, 4))
        a = obj.task_loss_seq(Tensor(states), h, [[0, 2]], [[1, 1, 0, 0]]).item()
        states[0, 2:] = 100.0
        b = obj.task_loss_seq(Tensor(states), h, [[0, 2]], [[1, 1, 0, 0]]).item()
        assert a == b

    def test_matches_doc_loss_on_length_one(self):
        rng = np.random.default_rng(5)
        h = head(rng.normal(size=(4, 6)), rng.normal(size=4))
        states = rng.normal(size=(3, 1, 6))
        labels = [1, 3, 0]
        seq = obj.task_loss_seq(Tensor(states), h, [[y] for y in labels], np.ones((3, 1))).item()
        doc = obj.task_loss_doc(obj.classify_doc(h, mean_pool(Tensor(states), np.ones((3, 1)))), labels).item()
        assert seq == pytest.approx(doc, rel=1e-14)


class TestDiscriminate:
    def test_zero(self):
        p = obj.discriminate(disc(np.zeros(3), 0.0), Tensor(np.random.default_rng(0).normal(size=(4, 3))))
        np.testing.assert_array_equal(p.data, 0.5)

    def test_saturation_clamped(self):
        p = obj.discriminate(disc(np.zeros(3), 30.0), Tensor(np.zeros((2, 3))))
        assert np.all(p.data >= 1 - 1e-12) and np.all(p.data < 1)

    def test_sigmoid_one(self):
        p = obj.discriminate(disc(np.array([1.0, 0.0]), 0.5), Tensor([[0.5, 7.0]]))
        assert p.data[0] == pytest.approx(SIGMOID_1, abs=1e-15)

    def test_width_mismatch(self):
        with pytest.raises(ad.ShapeError):
            obj.discriminate(disc(np.zeros(3), 0.0), Tensor(np.zeros((2, 4))))


class TestAdversarialLosses:
    def test_disc_half(self):
        assert obj.discriminator_loss(Tensor([0.5, 0.5]), [1, 0]).item() == pytest.approx(LN4, abs=1e-12)

    def test_disc_perfect(self):
        loss = obj.discriminator_loss(Tensor([1 - 1e-12, 1e-12]), [1, 0]).item()
        assert 0 <= loss < 1e-10

    def test_disc_values(self):
        assert obj.discriminator_loss(Tensor([0.8, 0.3]), [1, 0]).item() == pytest.approx(DISC_08_03, abs=1e-12)

    def test_gen_half(self):
        assert obj.generator_loss(Tensor([0.5, 0.5]), [1, 0]).item() == pytest.approx(LN4, abs=1e-12)

    def test_gen_perfect_discriminator_is_maximal(self):
        loss = obj.generator_loss(Tensor([1 - 1e-12, 1e-12]), [1, 0]).item()
        assert loss == pytest.approx(TWO_LN_1E12, abs=1e-3)

    def test_gen_values(self):
        assert obj.generator_loss(Tensor([0.8, 0.3]), [1, 0]).item() == pytest.approx(GEN_08_03, abs=1e-12)

    def test_bad_language_label(self):
        with pytest.raises(ValueError):
            obj.discriminator_loss(Tensor([0.5]), [2])

    def test_mean_uses_batch_size(self):
        p = Tensor([0.8, 0.7, 0.3, 0.4])
        total = obj.discriminator_loss(p, [1, 1, 0, 0]).item()
        assert obj.discriminator_loss(p, [1, 1, 0, 0], reduction="mean", batch_size=2).item() == pytest.approx(total / 2)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0.0, 1.0), st.integers(0, 1)), min_size=1, max_size=16),
)
def test_label_flip_identity(rows):
    p = Tensor([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    g = obj.generator_loss(p, y).item()
    d = obj.discriminator_loss(p, 1 - y).item()
    assert g == d
    assert math.isfinite(g) and g >= 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=16))
def test_equal_at_half(ys):
    p = Tensor([0.5] * len(ys))
    assert obj.generator_loss(p, ys).item() == obj.discriminator_loss(p, ys).item()


def _tiny_model(seed=0):
    config = EncoderConfig(vocab_size=9, hidden=4, layers=2, heads=2, ffn_width=8, max_len=6, seed=seed)
    params = EncoderParameters.init(config)
    rng = np.random.default_rng(seed + 10)
    for p in params:
        p.data += rng.normal(0.0, 0.3, size=p.shape)
    th = obj.TaskHead(Parameter("task.weight", rng.normal(size=(3, 4))), Parameter("task.bias", rng.normal(size=3)))
    dc = obj.Discriminator(Parameter("disc.weight", rng.normal(size=4)), Parameter("disc.bias", rng.normal(size=1)))
    batch = TokenBatch([[1, 2, 3, 4], [5, 6, 7, 0]], [[1, 1, 1, 1], [1, 1, 1, 0]])
    return params, th, dc, batch


@pytest.mark.parametrize("which", ["doc", "seq", "disc", "gen"])
def test_losses_through_encoder(which):
    params, th, dc, batch = _tiny_model()

    def fn():
        states = encode(params, batch)
        pooled = mean_pool(states, batch.mask)
        if which == "doc":
            return obj.task_loss_doc(obj.classify_doc(th, pooled), [0, 2])
        if which == "seq":
            return obj.task_loss_seq(states, th, [[0, 1, 2, 1], [2, 2, 0]], batch.mask)
        p = obj.discriminate(dc, pooled)
        if which == "disc":
            return obj.discriminator_loss(p, [1, 0])
        return obj.generator_loss(p, [1, 0])

    extra = th.parameters if which in ("doc", "seq") else dc.parameters
    assert ad.gradient_check(fn, list(params) + extra, h=1e-5) <= 1e-4
