import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenstyle.config import TokenizerConfig
from tokenstyle.errors import DimensionError, TrainingError
from tokenstyle.ndcore import Tensor, grad_check_many, ops, precision
from tokenstyle.toyworld import render, sample_scene
from tokenstyle.vqtok import (TokenGrid, TokenizerModel, detokenize, downsample, kmeans,
                              mix_styles, tokenize, tokenize_batch, train_tokenizer, vq_loss)

TINY = TokenizerConfig(codebook_size=16, code_dim=4, widths=(4, 4, 4), context_blocks=1,
                       epochs=3, batch_size=8, restart_every=5)


@pytest.fixture(scope="module")
def tiny():
    return TokenizerModel(TINY, np.random.default_rng(0))


@pytest.fixture(scope="module")
def images():
    rng = np.random.default_rng(1)
    return np.stack([render(sample_scene(rng)) for _ in range(24)]).astype(np.float32)


def two_code_model():
    model = TokenizerModel(TokenizerConfig(codebook_size=2, code_dim=2, widths=(4, 4, 4),
                                           context_blocks=0), np.random.default_rng(0))
    model.codebook.data = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    return model


class TestQuantize:
    def test_nearest_neighbor(self):
        model = two_code_model()
        assert model.nearest_codes(np.array([[0.9, 0.0]])).tolist() == [0]
        assert model.nearest_codes(np.array([[0.1, 0.8]])).tolist() == [1]

    def test_tie_goes_to_lowest_index(self):
        model = two_code_model()
        assert model.nearest_codes(np.array([[0.5, 0.5]])).tolist() == [0]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nearest_property(self, seed):
        rng = np.random.default_rng(seed)
        model = TokenizerModel(TINY, rng)
        z = rng.normal(size=(10, TINY.code_dim))
        idx = model.nearest_codes(z)
        d = ((z[:, None, :] - model.codebook.data[None].astype(np.float64)) ** 2).sum(-1)
        chosen = d[np.arange(len(z)), idx]
        assert np.all(chosen <= d.min(axis=1) + 1e-9)

    def test_grid_sides(self, tiny, images):
        assert tokenize(tiny, images[0]).indices.shape == (8, 8)
        assert tokenize(tiny, downsample(images[0])).indices.shape == (4, 4)

    def test_indices_in_range(self, tiny, images):
        idx = tokenize_batch(tiny, images)
        assert idx.min() >= 0 and idx.max() < TINY.codebook_size

    def test_wrong_size_rejected(self, tiny):
        with pytest.raises(DimensionError):
            tokenize(tiny, np.zeros((60, 60, 3)))
        with pytest.raises(DimensionError):
            tokenize(tiny, np.zeros((64, 64)))


class TestDetokenize:
    def test_shape_and_range(self, tiny):
        grid = TokenGrid(np.random.default_rng(2).integers(0, 16, (8, 8)))
        out = detokenize(tiny, grid)
        assert out.shape == (64, 64, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic(self, tiny):
        grid = np.random.default_rng(3).integers(0, 16, (8, 8))
        assert np.array_equal(detokenize(tiny, grid), detokenize(tiny, grid.copy()))

    def test_index_out_of_range(self, tiny):
        grid = np.zeros((8, 8), dtype=int)
        grid[2, 3] = TINY.codebook_size
        with pytest.raises(IndexError):
            detokenize(tiny, grid)


class TestDownsample:
    def test_block_mean(self):
        img = np.array([[0.0, 0.0], [1.0, 1.0]])[..., None]
        assert downsample(img).item() == 0.5

    def test_constant(self):
        img = np.full((64, 64, 3), 0.37)
        assert np.allclose(downsample(img), 0.37, atol=1e-15)
        assert downsample(img).shape == (32, 32, 3)

    def test_indivisible(self):
        with pytest.raises(DimensionError):
            downsample(np.zeros((63, 64, 3)))


class TestGradients:
    def test_straight_through_copies_gradient(self, images):
        with precision(np.float64):
            model = TokenizerModel(TINY, np.random.default_rng(4)).astype(np.float64)
            x = Tensor(images[:2].astype(np.float64))
            z = model.encode(x).data
            q = model.codebook.data[model.nearest_codes(z)]
            q_leaf = Tensor(q, requires_grad=True)
            ops.mean(ops.square(ops.sub(model.decode(q_leaf), x))).backward()
            z_leaf = Tensor(z, requires_grad=True)
            st_q = ops.add(z_leaf, Tensor(q - z))
            ops.mean(ops.square(ops.sub(model.decode(st_q), x))).backward()
        # forward values differ only by the rounding of z + (q - z)
        assert np.allclose(z_leaf.grad, q_leaf.grad, rtol=1e-10, atol=0)

    def test_vq_objective_gradcheck_decoder(self, images):
        """Decoder gradients of the full objective (assignments held fixed)."""
        with precision(np.float64):
            model = TokenizerModel(TINY, np.random.default_rng(5)).astype(np.float64)
            batch = images[:2].astype(np.float64)
            params = [model.from_code.weight, model.context[0].weight, model.up[2].weight]
            err = grad_check_many(lambda: vq_loss(model, batch, 0.25)[0], params,
                                  h=1e-6, max_entries=30, rng=np.random.default_rng(0))
        assert err < 1e-4

    def test_codebook_gradient_is_codebook_term_only(self, images):
        # straight-through: reconstruction sends nothing to the codebook
        with precision(np.float64):
            model = TokenizerModel(TINY, np.random.default_rng(5)).astype(np.float64)
            batch = images[:2].astype(np.float64)
            vq_loss(model, batch, 0.25)[0].backward()
            full = model.codebook.grad.copy()
            z = model.encode(Tensor(batch)).data
            idx = model.nearest_codes(z)

            def codebook_term():
                return ops.mean(ops.square(ops.sub(model.lookup(idx), Tensor(z))))

            model.codebook.grad = None
            codebook_term().backward()
            assert np.allclose(full, model.codebook.grad, rtol=1e-10, atol=1e-14)
            err = grad_check_many(codebook_term, [model.codebook], h=1e-6, max_entries=30,
                                  rng=np.random.default_rng(0))
        assert err < 1e-4

    def test_commitment_gradcheck_encoder(self, images):
        with precision(np.float64):
            model = TokenizerModel(TINY, np.random.default_rng(6)).astype(np.float64)
            x = Tensor(images[:2].astype(np.float64))

            def commitment():
                z = model.encode(x)
                q = model.lookup(model.nearest_codes(z.data))
                return ops.mean(ops.square(ops.sub(z, ops.stop_gradient(q))))

            err = grad_check_many(commitment, [model.down[0].weight, model.to_code.weight],
                                  h=1e-6, max_entries=30, rng=np.random.default_rng(1))
        assert err < 1e-4


class TestTraining:
    def test_too_few_images(self, images):
        with pytest.raises(ValueError):
            train_tokenizer(images, TINY)

    def test_loss_decreases(self, images):
        cfg = TokenizerConfig(codebook_size=16, code_dim=8, widths=(8, 8, 8), context_blocks=1,
                              epochs=6, batch_size=8, lr=5e-3, restart_every=5)
        _, history = train_tokenizer(images, cfg, seed=0, min_images=1)
        assert history[-1] < history[1]

    def test_divergence_reported(self, images):
        bad = images.copy()
        bad[:] = np.nan
        with pytest.raises(TrainingError, match="diverged"):
            train_tokenizer(bad, TINY, min_images=1)

    def test_deterministic(self, images):
        a, ha = train_tokenizer(images, TINY, seed=3, min_images=1)
        b, hb = train_tokenizer(images, TINY, seed=3, min_images=1)
        assert ha == hb
        for k, v in a.state_dict().items():
            assert np.array_equal(v, b.state_dict()[k])

    def test_kmeans_recovers_clusters(self):
        rng = np.random.default_rng(8)
        centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        pts = np.concatenate([c + rng.normal(0, 0.1, (50, 2)) for c in centers])
        found = kmeans(pts, 3, rng)
        for c in centers:
            assert np.min(np.linalg.norm(found - c, axis=1)) < 0.1

    def test_mix_styles_fraction(self, images):
        out = mix_styles(images, np.random.default_rng(0), 0.0)
        assert np.array_equal(out, images)
        out = mix_styles(images, np.random.default_rng(0), 1.0)
        assert not any(np.array_equal(a, b) for a, b in zip(out, images))
