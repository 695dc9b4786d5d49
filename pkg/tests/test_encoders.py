import numpy as np
import pytest

from coft.core import SeededRng, l2_normalize, normalize_rows
from coft.encoders import (
    FrozenProvider,
    adapt_batch,
    adapt_batch_backward,
    adapt_visual,
    compose_text,
    compose_texts,
    compose_texts_backward,
    encode_batch,
    fft_logits,
    init_fft_encoder,
    init_prompt_bank,
    init_visual_adapter,
    logits_batch,
    logits_batch_backward,
)
from coft.errors import DomainError, ShapeError
from coft.grad import check_gradients, param


def make_provider(n=6, c=3, d=5, seed=0, identity_mixer=False):
    rng = np.random.default_rng(seed)
    emb = normalize_rows(rng.normal(size=(n, d)))
    anchors = normalize_rows(rng.normal(size=(c, d)))
    mixer = np.eye(d) if identity_mixer else rng.normal(size=(d, d)) / np.sqrt(d)
    return FrozenProvider(emb, anchors, mixer)


class TestFrozenProvider:
    def test_rejects_unnormalized_rows(self):
        emb = np.array([[1.0, 0.0], [2.0, 0.0]])
        anchors = np.eye(2)
        with pytest.raises(DomainError):
            FrozenProvider(emb, anchors, np.eye(2))

    def test_immutable(self):
        p = make_provider()
        with pytest.raises(ValueError):
            p.image_embeddings[0, 0] = 5.0
        with pytest.raises(ValueError):
            p.class_anchors[0, 0] = 5.0

    def test_unknown_sample(self):
        p = make_provider(n=4)
        with pytest.raises(KeyError):
            p.embedding(4)

    def test_build_mixer_deterministic(self):
        emb = normalize_rows(np.random.default_rng(1).normal(size=(3, 4)))
        anchors = np.eye(4)[:2]
        p1 = FrozenProvider.build(emb, anchors, SeededRng(5))
        p2 = FrozenProvider.build(emb, anchors, SeededRng(5))
        assert p1.mixer.tobytes() == p2.mixer.tobytes()


class TestComposeText:
    def test_zero_context_returns_anchor(self):
        p = make_provider()
        bank = init_prompt_bank(p, SeededRng(1).stream("m1"))
        bank.pos_context.value[:] = 0.0
        for k in range(p.num_classes):
            np.testing.assert_allclose(
                compose_text(bank, p, "positive", k), p.class_anchors[k], atol=1e-12
            )

    def test_identical_contexts_identical_embeddings(self):
        p = make_provider()
        bank = init_prompt_bank(p, SeededRng(2).stream("m1"))
        bank.neg_context.value[:] = bank.pos_context.value
        tp, _ = compose_texts(bank, p, "positive")
        tn, _ = compose_texts(bank, p, "negative")
        np.testing.assert_array_equal(tp, tn)

    def test_one_token_identity_mixer_hand_case(self):
        d = 4
        emb = np.eye(d)[:2]
        anchors = np.eye(d)[:2]  # anchor of class 1 = e2
        p = FrozenProvider(emb, anchors, np.eye(d))
        bank = init_prompt_bank(p, SeededRng(3), context_len=1)
        bank.pos_context.value[:] = 0.0
        bank.pos_context.value[0, 0] = 1.0  # single context token e1
        out = compose_text(bank, p, "positive", 1)
        expected = np.zeros(d)
        expected[0] = expected[1] = 1.0 / np.sqrt(2.0)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_output_normalized_random_contexts(self):
        p = make_provider(seed=4)
        for i in range(20):
            bank = init_prompt_bank(p, SeededRng(10 + i).stream("m1"), sigma=0.5)
            for pol in ("positive", "negative"):
                t, _ = compose_texts(bank, p, pol)
                np.testing.assert_allclose(np.linalg.norm(t, axis=1), 1.0, atol=1e-9)

    def test_distinct_pos_neg_at_init(self):
        p = make_provider()
        bank = init_prompt_bank(p, SeededRng(6).stream("m1"))
        assert not np.array_equal(bank.pos_context.value, bank.neg_context.value)

    def test_class_id_out_of_range(self):
        p = make_provider(c=3)
        bank = init_prompt_bank(p, SeededRng(7))
        with pytest.raises(IndexError):
            compose_text(bank, p, "positive", 3)

    def test_gradient_matches_fd(self):
        p = make_provider(c=4, d=6, seed=8)
        bank = init_prompt_bank(p, SeededRng(9).stream("m1"), context_len=3, sigma=0.3)
        w = np.random.default_rng(0).normal(size=(4, 6))  # fixed projection of texts

        def loss():
            texts, cache = compose_texts(bank, p, "positive")
            compose_texts_backward(cache, w * 2.0 * (texts - 0.1))
            return float(np.sum((texts - 0.1) ** 2 * w))

        report = check_gradients(loss, [bank.pos_context], tol=1e-4)
        assert report.ok, report.summary()


class TestVisualAdapter:
    def test_zero_up_exact_identity(self):
        p = make_provider()
        adapter = init_visual_adapter(p.dim, rank=2, scale=0.1, rng=SeededRng(1))
        base = p.image_embeddings[0]
        out = adapt_visual(adapter, base)
        assert out.tobytes() == base.tobytes()

    def test_zero_scale_exact_identity(self):
        p = make_provider()
        adapter = init_visual_adapter(p.dim, rank=2, scale=0.0, rng=SeededRng(2))
        adapter.up.value[:] = np.random.default_rng(0).normal(size=adapter.up.shape)
        out, _ = adapt_batch(adapter, p.image_embeddings)
        assert out.tobytes() == p.image_embeddings.tobytes()

    def test_nonzero_up_not_identity_and_normalized(self):
        p = make_provider()
        adapter = init_visual_adapter(p.dim, rank=2, scale=0.1, rng=SeededRng(3))
        adapter.up.value[:] = 0.5
        out, _ = adapt_batch(adapter, p.image_embeddings)
        assert not np.array_equal(out, p.image_embeddings)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    def test_rank_one_hand_fixture_matches_direct_arithmetic(self):
        # independent oracle: straight matrix arithmetic on hand-set weights
        d = 3
        base = l2_normalize(np.array([1.0, 2.0, 2.0]))
        down = np.array([[0.5, -0.25, 0.1]])
        up = np.array([[0.2], [-0.3], [0.4]])
        scale = 0.7
        adapter = init_visual_adapter(d, rank=1, scale=scale, rng=SeededRng(4))
        adapter.down.value[:] = down
        adapter.up.value[:] = up

        h = np.tanh(down @ base)
        z = base + scale * (up @ h)
        expected = z / np.linalg.norm(z)
        np.testing.assert_allclose(adapt_visual(adapter, base), expected, atol=1e-14)

    def test_dim_mismatch(self):
        adapter = init_visual_adapter(5, rank=2, scale=0.1, rng=SeededRng(5))
        with pytest.raises(ShapeError):
            adapt_visual(adapter, np.ones(4))

    def test_gradient_matches_fd(self):
        p = make_provider(n=5, d=6, seed=11)
        adapter = init_visual_adapter(6, rank=2, scale=0.3, rng=SeededRng(12))
        adapter.up.value[:] = np.random.default_rng(1).normal(size=adapter.up.shape) * 0.3
        target = normalize_rows(np.random.default_rng(2).normal(size=(5, 6)))

        def loss():
            out, cache = adapt_batch(adapter, p.image_embeddings[:5])
            adapt_batch_backward(cache, 2.0 * (out - target))
            return float(np.sum((out - target) ** 2))

        report = check_gradients(loss, adapter.params(), tol=1e-4)
        assert report.ok, report.summary()

    def test_gradient_at_zero_up_reaches_up(self):
        # signal must reach the zero-initialized up projection
        p = make_provider(n=4, d=6, seed=13)
        adapter = init_visual_adapter(6, rank=2, scale=0.5, rng=SeededRng(14))
        out, cache = adapt_batch(adapter, p.image_embeddings[:4])
        d_down, d_up = adapt_batch_backward(cache, np.ones_like(out))
        assert np.any(d_up != 0.0)
        assert np.all(d_down == 0.0)  # blocked until up moves


class TestFFTEncoder:
    def test_identity_at_init(self):
        rng = np.random.default_rng(3)
        enc = init_fft_encoder(8, num_classes=4, hidden=16, rng=SeededRng(1))
        x = normalize_rows(rng.normal(size=(10, 8)))
        y, _ = encode_batch(enc, x)
        assert float(np.max(np.linalg.norm(y - x, axis=1))) < 1e-6

    def test_constant_head(self):
        enc = init_fft_encoder(5, num_classes=3, hidden=10, rng=SeededRng(2))
        enc.b_fc.value[:] = [0.3, -0.2, 0.9]
        rng = np.random.default_rng(4)
        for _ in range(3):
            v = rng.normal(size=5)
            np.testing.assert_allclose(fft_logits(enc, v), [0.3, -0.2, 0.9], atol=1e-12)

    def test_anchor_head_gives_cosine_scores(self):
        d, c = 6, 4
        anchors = normalize_rows(np.random.default_rng(5).normal(size=(c, d)))
        enc = init_fft_encoder(d, num_classes=c, hidden=12, rng=SeededRng(3))
        enc.w_fc.value[:] = anchors
        v = l2_normalize(np.random.default_rng(6).normal(size=d))
        sims = anchors @ v
        np.testing.assert_allclose(fft_logits(enc, v), sims, atol=1e-5)

    def test_random_fixture_matches_matrix_oracle(self):
        d, c, h = 4, 3, 5
        rng = np.random.default_rng(7)
        enc = init_fft_encoder(d, num_classes=c, hidden=h, rng=SeededRng(4))
        for p in enc.params():
            p.value[:] = rng.normal(size=p.shape)
        x = rng.normal(size=(6, d))
        # straight-line oracle
        hid = np.tanh(x @ enc.w1.value.T + enc.b1.value)
        encd = x + hid @ enc.w2.value.T + enc.b2.value
        expected = encd @ enc.w_fc.value.T + enc.b_fc.value
        got, _ = logits_batch(enc, x)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_gradient_matches_fd(self):
        d, c, h = 5, 3, 8
        rng = np.random.default_rng(8)
        enc = init_fft_encoder(d, num_classes=c, hidden=h, rng=SeededRng(5))
        for p in enc.params():
            p.value[:] = rng.normal(size=p.shape) * 0.5
        x = normalize_rows(rng.normal(size=(4, d)))
        w = rng.normal(size=(4, c))

        def loss():
            logits, cache = logits_batch(enc, x)
            logits_batch_backward(cache, w)
            return float(np.sum(logits * w))

        report = check_gradients(loss, enc.params(), tol=1e-4)
        assert report.ok, report.summary()
