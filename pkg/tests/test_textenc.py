import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from journeynet import numerics as nm
from journeynet.errors import ShapeError
from journeynet.textenc import (
    DEFAULT_ALPHABET,
    Alphabet,
    CnnEncoder,
    ConvStage,
    conv1d,
    embed_phrase,
    maxpool1d,
    quantize,
)


def test_default_alphabet_has_42_symbols():
    assert len(Alphabet()) == 42


def test_alphabet_rejects_duplicates():
    with pytest.raises(ValueError):
        Alphabet("aba")


def test_alphabet_lookup_below_size():
    a = Alphabet()
    for c in DEFAULT_ALPHABET:
        assert a.lookup(c) < len(a)


def test_quantize_empty_phrase_is_all_zero():
    a = Alphabet()
    q = quantize("", a, 7)
    assert q.shape == (7, 42)
    assert not q.any()


def test_quantize_two_letters():
    a = Alphabet("abcdefghijklmnopqrstuvwxyz")
    q = quantize("ab", a, 4)
    assert q.shape == (4, 26)
    assert q[0, 0] == 1.0 and q[0].sum() == 1.0
    assert q[1, 1] == 1.0 and q[1].sum() == 1.0
    assert not q[2:].any()


def test_quantize_casefolds_and_zeroes_unknown():
    a = Alphabet("abcdefghijklmnopqrstuvwxyz")
    q = quantize("Ab#", a, 4)
    ref = quantize("ab", a, 4)
    assert q[2].sum() == 0.0
    assert np.array_equal(q[:2], ref[:2])
    assert np.array_equal(q[3], ref[3])


def test_quantize_truncates():
    a = Alphabet()
    q = quantize("abcdef", a, 3)
    assert q.shape == (3, 42)
    assert q[2, a.lookup("c")] == 1.0


def test_quantize_requires_positive_max_len():
    with pytest.raises(ValueError):
        quantize("a", Alphabet(), 0)


@given(st.text(max_size=40))
@settings(max_examples=60, deadline=None)
def test_quantize_idempotent_on_normalised_phrase(phrase):
    a = Alphabet()
    q1 = quantize(phrase, a, 16)
    q2 = quantize(phrase[:16].lower(), a, 16)
    assert np.array_equal(q1, q2)
    assert set(np.unique(q1.sum(axis=1))) <= {0.0, 1.0}


def test_conv1d_zero_kernels_give_zero_output():
    x = nm.constant(np.random.default_rng(0).uniform(0, 1, size=(6, 3)))
    k = nm.constant(np.zeros((2 * 3, 4)))
    b = nm.constant(np.zeros((1, 4)))
    y = conv1d(x, k, b, 2)
    assert y.shape == (5, 4)
    assert not y.data.any()


def test_conv1d_width_one_ones_kernel_sums_rows():
    x = nm.constant([[1.0, -2.0], [3.0, 4.0]])
    k = nm.constant([[1.0], [1.0]])
    b = nm.constant([[0.0]])
    y = conv1d(x, k, b, 1)
    # per-position row sums, negatives clamped by relu
    assert np.array_equal(y.data, [[0.0], [7.0]])


def test_conv1d_hand_sliding_window():
    x = nm.constant([[1.0], [2.0], [3.0]])
    k = nm.constant([[1.0], [-1.0]])
    b = nm.constant([[0.0]])
    y = conv1d(x, k, b, 2)
    assert np.array_equal(y.data, [[0.0], [0.0]])


def test_conv1d_rejects_short_input():
    x = nm.constant(np.zeros((2, 3)))
    k = nm.constant(np.zeros((9, 1)))
    b = nm.constant(np.zeros((1, 1)))
    with pytest.raises(ShapeError):
        conv1d(x, k, b, 3)


def test_maxpool_constant_input():
    x = nm.constant(np.full((7, 2), 3.5))
    y = maxpool1d(x, 3)
    assert y.shape == (3, 2)
    assert np.all(y.data == 3.5)


def test_maxpool_single_window():
    x = nm.constant([[1.0], [3.0], [2.0], [5.0]])
    assert np.array_equal(maxpool1d(x, 4).data, [[5.0]])


def test_maxpool_partial_tail_window():
    x = nm.constant([[1.0], [3.0], [2.0], [5.0], [4.0]])
    assert np.array_equal(maxpool1d(x, 4).data, [[5.0], [4.0]])


def test_maxpool_rejects_bad_window():
    with pytest.raises(ValueError):
        maxpool1d(nm.constant([[1.0]]), 0)


def test_maxpool_matches_bruteforce_oracle():
    rng = np.random.default_rng(17)
    for _ in range(30):
        length = int(rng.integers(1, 20))
        cols = int(rng.integers(1, 5))
        window = int(rng.integers(1, 7))
        x = rng.normal(size=(length, cols))
        got = maxpool1d(nm.constant(x), window).data
        want = np.stack(
            [x[s:s + window].max(axis=0) for s in range(0, length, window)]
        )
        assert np.array_equal(got, want)


def test_conv_pool_gradients_pass_grad_check():
    rng = np.random.default_rng(23)
    for trial in range(5):
        length = int(rng.integers(4, 9))
        channels = int(rng.integers(1, 4))
        filters = int(rng.integers(1, 4))
        width = int(rng.integers(1, 4))
        # keep entries away from tie/kink points so finite differences are valid
        x = nm.parameter(rng.uniform(0.1, 1.0, size=(length, channels)))
        k = nm.parameter(rng.uniform(0.1, 1.0, size=(width * channels, filters)))
        b = nm.parameter(rng.uniform(0.05, 0.2, size=(1, filters)))
        n_out = -(-(length - width + 1) // 2)
        w_out = nm.constant(rng.uniform(0.5, 1.5, size=(filters, 1)))
        w_rows = nm.constant(rng.uniform(0.5, 1.5, size=(1, n_out)))

        def f():
            h = maxpool1d(conv1d(x, k, b, width), 2)
            # fixed random projection to a scalar; linear, so no gradient is
            # structurally zero and finite differences stay meaningful
            return nm.matmul(w_rows, nm.matmul(h, w_out))

        assert nm.grad_check(f, [x, k, b], h=1e-5) < 1e-4, f"trial {trial}"


def _toy_encoder(seed=0, max_len=12):
    rng = np.random.default_rng(seed)
    return CnnEncoder.build(Alphabet(), max_len, [(3, 4, 2), (3, 4, 2)], rng)


def test_embed_length_constant_across_phrases():
    enc = _toy_encoder()
    lengths = {enc.embed(p).cols for p in ["", "a", "hello world", "x" * 50, "éé--üü"]}
    assert lengths == {enc.embedding_dim}


@given(st.text(max_size=30))
@settings(max_examples=40, deadline=None)
def test_embed_length_constant_property(phrase):
    enc = _toy_encoder(seed=3)
    assert enc.embed(phrase).cols == enc.embedding_dim


def test_embed_empty_phrase_zero_bias_gives_zero_vector():
    enc = _toy_encoder(seed=1)
    v = enc.embed("")
    assert not v.data.any()


def test_embed_is_deterministic():
    enc = _toy_encoder(seed=2)
    a = enc.embed("car insurance quote")
    b = enc.embed("car insurance quote")
    assert np.array_equal(a.data, b.data)


def test_embed_phrase_wrapper():
    enc = _toy_encoder(seed=4)
    assert np.array_equal(embed_phrase(enc, "home").data, enc.embed("home").data)


def test_encoder_rejects_too_narrow_stack():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        CnnEncoder.build(Alphabet(), 4, [(3, 4, 4), (3, 4, 4)], rng)


def test_encoder_parameters_are_named_and_trainable():
    enc = _toy_encoder(seed=5)
    names = [n for n, _ in enc.parameters()]
    assert names == ["conv0.kernels", "conv0.bias", "conv1.kernels", "conv1.bias"]
    assert all(p.trainable for _, p in enc.parameters())
