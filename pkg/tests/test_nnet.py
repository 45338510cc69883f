import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svrehearsal import nnet
from svrehearsal.errors import InvalidInput, ShapeError
from svrehearsal.nnet import (
    AdamState, Batch, LossTerm, ModelDims, ParamSet, adam_init, adam_step,
    adam_step_params, backward, forward, init_params, loss_ce, loss_kd,
    loss_value, minibatches,
)

SMALL = ModelDims(d_in=5, d_hidden=6, n_classes=3, seq_len=4)


def make_batch(dims, seed, b=3):
    rng = np.random.Generator(np.random.Philox(key=[seed, 1]))
    inputs = rng.standard_normal((b, dims.seq_len, dims.d_in))
    frame_labels = rng.integers(0, dims.n_classes, size=(b, dims.seq_len))
    seq_labels = rng.integers(0, dims.n_classes, size=b)
    return Batch(inputs, frame_labels, seq_labels)


def scalar_forward(params, batch):
    """Straight-line re-implementation with python loops; oracle only."""
    w1, w2, wc, wd = params.weights
    b1, b2, bc, bd = params.biases
    b, l, d = batch.inputs.shape
    h = w1.shape[0]
    n_c = wc.shape[0]
    ctc = np.zeros((b, l, n_c))
    dec = np.zeros((b, n_c))
    for i in range(b):
        h2_frames = []
        for t in range(l):
            h1 = [math.tanh(sum(w1[a, j] * batch.inputs[i, t, j] for j in range(d)) + b1[a])
                  for a in range(h)]
            h2 = [math.tanh(sum(w2[a, j] * h1[j] for j in range(h)) + b2[a])
                  for a in range(h)]
            h2_frames.append(h2)
            logits = [sum(wc[cix, j] * h2[j] for j in range(h)) + bc[cix] for cix in range(n_c)]
            zmax = max(logits)
            exps = [math.exp(z - zmax) for z in logits]
            ctc[i, t] = [e / sum(exps) for e in exps]
        pooled = [sum(fr[j] for fr in h2_frames) / l for j in range(h)]
        logits = [sum(wd[cix, j] * pooled[j] for j in range(h)) + bd[cix] for cix in range(n_c)]
        zmax = max(logits)
        exps = [math.exp(z - zmax) for z in logits]
        dec[i] = [e / sum(exps) for e in exps]
    return ctc, dec


def fd_gradient(loss_fn, params, step=1e-5):
    """Central finite differences over every coordinate of every block."""
    grads = []
    for arr in params.flat():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + step
            up = loss_fn(params)
            arr[ix] = orig - step
            down = loss_fn(params)
            arr[ix] = orig
            g[ix] = (up - down) / (2 * step)
            it.iternext()
        grads.append(g)
    return grads


def rel_block_errors(analytic, numeric):
    errs = []
    for a, b in zip(analytic, numeric):
        denom = max(np.linalg.norm(b), 1e-8)
        errs.append(np.linalg.norm(a - b) / denom)
    return errs


class TestForward:
    def test_zero_params_give_uniform_rows(self):
        params = init_params(SMALL, seed=0)
        for w in params.weights:
            w[:] = 0.0
        out = forward(params, make_batch(SMALL, 3))
        assert np.allclose(out.ctc_probs, 1.0 / SMALL.n_classes, atol=1e-15)
        assert np.allclose(out.dec_probs, 1.0 / SMALL.n_classes, atol=1e-15)

    def test_batch_independence(self):
        params = init_params(SMALL, seed=1)
        one = make_batch(SMALL, 5, b=1)
        rep = Batch(np.repeat(one.inputs, 4, axis=0),
                    np.repeat(one.frame_labels, 4, axis=0),
                    np.repeat(one.seq_labels, 4))
        out = forward(params, rep)
        for i in range(1, 4):
            assert np.array_equal(out.ctc_probs[i], out.ctc_probs[0])
            assert np.array_equal(out.dec_probs[i], out.dec_probs[0])

    def test_matches_scalar_oracle(self):
        params = init_params(SMALL, seed=2)
        batch = make_batch(SMALL, 7)
        out = forward(params, batch)
        ctc, dec = scalar_forward(params, batch)
        assert np.max(np.abs(out.ctc_probs - ctc)) <= 1e-12
        assert np.max(np.abs(out.dec_probs - dec)) <= 1e-12

    def test_shape_mismatch(self):
        params = init_params(SMALL, seed=0)
        bad = make_batch(ModelDims(d_in=7, d_hidden=6, n_classes=3, seq_len=4), 0)
        with pytest.raises(ShapeError):
            forward(params, bad)

    def test_label_out_of_range(self):
        params = init_params(SMALL, seed=0)
        batch = make_batch(SMALL, 1)
        batch.seq_labels[0] = SMALL.n_classes
        with pytest.raises(InvalidInput):
            forward(params, batch)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_probability_rows_sum_to_one(self, seed):
        params = init_params(SMALL, seed=seed)
        out = forward(params, make_batch(SMALL, seed))
        assert np.max(np.abs(out.ctc_probs.sum(axis=-1) - 1.0)) <= 1e-9
        assert np.max(np.abs(out.dec_probs.sum(axis=-1) - 1.0)) <= 1e-9
        assert out.ctc_probs.min() >= 0.0 and out.ctc_probs.max() <= 1.0


class TestLossCe:
    def test_uniform_predictions_give_log_c(self):
        params = init_params(ModelDims(d_in=5, d_hidden=6, n_classes=4, seq_len=4), seed=0)
        for w in params.weights:
            w[:] = 0.0
        batch = make_batch(ModelDims(d_in=5, d_hidden=6, n_classes=4, seq_len=4), 11)
        for c in (0.0, 0.3, 1.0):
            assert loss_ce(params, batch, c) == pytest.approx(math.log(4), abs=1e-12)

    def test_c_zero_is_pure_sequence_branch(self):
        params = init_params(SMALL, seed=4)
        batch = make_batch(SMALL, 9)
        out = forward(params, batch)
        dec_branch = -np.log(out.dec_probs[np.arange(batch.n), batch.seq_labels]).mean()
        assert loss_ce(params, batch, 0.0) == pytest.approx(dec_branch, abs=1e-12)

    def test_matches_scalar_branch_oracle(self):
        params = init_params(SMALL, seed=5)
        batch = make_batch(SMALL, 10)
        ctc, dec = scalar_forward(params, batch)
        b, l = batch.frame_labels.shape
        l_ctc = sum(-math.log(ctc[i, t, batch.frame_labels[i, t]])
                    for i in range(b) for t in range(l)) / (b * l)
        l_dec = sum(-math.log(dec[i, batch.seq_labels[i]]) for i in range(b)) / b
        c = 0.3
        assert loss_ce(params, batch, c) == pytest.approx(c * l_ctc + (1 - c) * l_dec, abs=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
    def test_affine_in_c(self, seed, c):
        params = init_params(SMALL, seed=seed)
        batch = make_batch(SMALL, seed)
        l_ctc = loss_ce(params, batch, 1.0)
        l_dec = loss_ce(params, batch, 0.0)
        assert loss_ce(params, batch, c) == pytest.approx(c * l_ctc + (1 - c) * l_dec, abs=1e-12)


class TestLossKd:
    def test_gradient_zero_at_teacher(self):
        params = init_params(SMALL, seed=6)
        batch = make_batch(SMALL, 12)
        teacher_out = forward(params, batch)
        _, grads = backward(params, LossTerm(batch, 1.0, "kd", 0.3, teacher_out))
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.flat()))
        assert norm <= 1e-10

    def test_uniform_teacher_student_single_branch_is_entropy(self):
        dims = ModelDims(d_in=5, d_hidden=6, n_classes=2, seq_len=4)
        params = init_params(dims, seed=0)
        for w in params.weights:
            w[:] = 0.0
        batch = make_batch(dims, 13)
        teacher_out = forward(params, batch)  # uniform (0.5, 0.5) everywhere
        for c in (0.0, 1.0):
            assert loss_kd(params, teacher_out, batch, c) == pytest.approx(math.log(2), abs=1e-12)

    def test_value_at_teacher_is_teacher_entropy(self):
        params = init_params(SMALL, seed=8)
        batch = make_batch(SMALL, 14)
        out = forward(params, batch)
        c = 0.3
        ent_ctc = -(out.ctc_probs * np.log(out.ctc_probs)).sum(axis=-1).mean()
        ent_dec = -(out.dec_probs * np.log(out.dec_probs)).sum(axis=-1).mean()
        expected = c * ent_ctc + (1 - c) * ent_dec
        assert loss_kd(params, out, batch, c) == pytest.approx(expected, abs=1e-12)

    def test_directional_derivative_matches_finite_differences(self):
        student = init_params(SMALL, seed=9)
        teacher = init_params(SMALL, seed=10)
        batch = make_batch(SMALL, 15)
        teacher_out = forward(teacher, batch)
        term = LossTerm(batch, 1.0, "kd", 0.3, teacher_out)
        _, grads = backward(student, term)
        rng = np.random.Generator(np.random.Philox(key=[16, 0]))
        direction = [rng.standard_normal(a.shape) for a in student.flat()]
        dnorm = math.sqrt(sum(float((d * d).sum()) for d in direction))
        direction = [d / dnorm for d in direction]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads.flat(), direction))
        eps = 1e-5
        shifted = lambda sgn: ParamSet.from_flat(
            [a + sgn * eps * d for a, d in zip(student.flat(), direction)], student.groups)
        numeric = (loss_value(shifted(+1), [term]) - loss_value(shifted(-1), [term])) / (2 * eps)
        assert abs(analytic - numeric) / max(abs(numeric), 1e-8) <= 1e-4


class TestBackward:
    def test_zero_loss_configuration_gives_zero_gradient(self):
        params = init_params(SMALL, seed=11)
        for w in params.weights:
            w[:] = 0.0
        # Huge bias on class 0 drives every softmax row to a one-hot.
        params.biases[2][:] = 0.0
        params.biases[2][0] = 80.0
        params.biases[3][:] = 0.0
        params.biases[3][0] = 80.0
        batch = make_batch(SMALL, 17)
        batch.frame_labels[:] = 0
        batch.seq_labels[:] = 0
        loss, grads = backward(params, LossTerm(batch, 1.0, "ce", 0.3))
        assert loss <= 1e-8
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.flat()))
        assert norm <= 1e-8

    def test_duplicating_batch_leaves_gradient_unchanged(self):
        params = init_params(SMALL, seed=12)
        batch = make_batch(SMALL, 18, b=3)
        dup = Batch(np.concatenate([batch.inputs, batch.inputs]),
                    np.concatenate([batch.frame_labels, batch.frame_labels]),
                    np.concatenate([batch.seq_labels, batch.seq_labels]))
        _, g1 = backward(params, LossTerm(batch, 1.0, "ce", 0.3))
        _, g2 = backward(params, LossTerm(dup, 1.0, "ce", 0.3))
        for a, b in zip(g1.flat(), g2.flat()):
            assert np.allclose(a, b, atol=1e-14)

    @pytest.mark.parametrize("seed", range(20))
    def test_ce_gradient_matches_finite_differences(self, seed):
        params = init_params(SMALL, seed=100 + seed)
        batch = make_batch(SMALL, 200 + seed)
        term = LossTerm(batch, 1.0, "ce", 0.3)
        _, grads = backward(params, term)
        numeric = fd_gradient(lambda p: loss_value(p, [term]), params)
        assert max(rel_block_errors(grads.flat(), numeric)) <= 1e-4

    def test_combined_term_gradient_matches_finite_differences(self):
        params = init_params(SMALL, seed=31)
        teacher = init_params(SMALL, seed=32)
        b1, b2 = make_batch(SMALL, 33), make_batch(SMALL, 34)
        terms = [LossTerm(b1, 1.0, "ce", 0.3),
                 LossTerm(b2, 0.7, "ce", 0.3),
                 LossTerm(b2, 0.7, "kd", 0.3, forward(teacher, b2))]
        _, grads = backward(params, terms)
        numeric = fd_gradient(lambda p: loss_value(p, terms), params)
        assert max(rel_block_errors(grads.flat(), numeric)) <= 1e-4

    def test_loss_value_matches_weighted_sum(self):
        params = init_params(SMALL, seed=35)
        b1, b2 = make_batch(SMALL, 36), make_batch(SMALL, 37)
        terms = [LossTerm(b1, 1.0, "ce", 0.3), LossTerm(b2, 2.5, "ce", 0.3)]
        total, _ = backward(params, terms)
        expected = loss_ce(params, b1, 0.3) + 2.5 * loss_ce(params, b2, 0.3)
        assert total == pytest.approx(expected, abs=1e-12)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        arrays = [np.array([1.0, -2.0]), np.array([[3.0]])]
        state = adam_init(arrays, lr=0.1)
        out = adam_step(arrays, [np.zeros(2), np.zeros((1, 1))], state)
        assert state.step == 1
        for a, b in zip(arrays, out):
            assert np.array_equal(a, b)

    def test_first_step_closed_form(self):
        g = np.array([0.5, -3.0, 1e-4])
        arrays = [np.array([1.0, 1.0, 1.0])]
        lr = 0.05
        state = adam_init(arrays, lr=lr)
        out = adam_step(arrays, [g], state)
        expected = arrays[0] - lr * g / (np.abs(g) + state.eps)
        assert np.allclose(out[0], expected, atol=1e-15)

    def test_hundred_steps_match_scripted_trace(self):
        # Independent scalar trace of Adam on f(x, y) = x^2 + 10 y^2.
        x = np.array([1.5, -2.0])
        arrays = [x.copy()]
        state = adam_init(arrays, lr=0.02)
        for _ in range(100):
            g = np.array([2.0 * arrays[0][0], 20.0 * arrays[0][1]])
            arrays = adam_step(arrays, [g], state)

        px, py = 1.5, -2.0
        mx = my = vx = vy = 0.0
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.02
        for t in range(1, 101):
            gx, gy = 2.0 * px, 20.0 * py
            mx = b1 * mx + (1 - b1) * gx
            my = b1 * my + (1 - b1) * gy
            vx = b2 * vx + (1 - b2) * gx * gx
            vy = b2 * vy + (1 - b2) * gy * gy
            px -= lr * (mx / (1 - b1**t)) / (math.sqrt(vx / (1 - b2**t)) + eps)
            py -= lr * (my / (1 - b1**t)) / (math.sqrt(vy / (1 - b2**t)) + eps)
        assert abs(arrays[0][0] - px) <= 1e-10
        assert abs(arrays[0][1] - py) <= 1e-10

    def test_shape_mismatch(self):
        arrays = [np.zeros(3)]
        state = adam_init(arrays, lr=0.1)
        with pytest.raises(ShapeError):
            adam_step(arrays, [np.zeros(4)], state)

    def test_paramset_wrapper(self):
        params = init_params(SMALL, seed=40)
        grads = nnet.zero_grads(params)
        state = adam_init(params.flat(), lr=0.1)
        out = adam_step_params(params, grads, state)
        for a, b in zip(params.flat(), out.flat()):
            assert np.array_equal(a, b)


class TestMinibatches:
    def test_partition_covers_data(self):
        batch = make_batch(SMALL, 50, b=10)
        rng = np.random.Generator(np.random.Philox(key=[0, 0]))
        seen = [b.n for b in minibatches(batch, 4, rng)]
        assert seen == [4, 4, 2]

    def test_seeded_shuffle_reproducible(self):
        batch = make_batch(SMALL, 51, b=8)
        r1 = np.random.Generator(np.random.Philox(key=[1, 2]))
        r2 = np.random.Generator(np.random.Philox(key=[1, 2]))
        for a, b in zip(minibatches(batch, 3, r1), minibatches(batch, 3, r2)):
            assert np.array_equal(a.inputs, b.inputs)
