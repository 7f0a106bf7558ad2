import math

import numpy as np
import pytest

from tokenstyle.config import ScorerConfig
from tokenstyle.errors import NumericError, VocabularyError
from tokenstyle.ndcore import grad_check_many, no_grad, precision
from tokenstyle.scorer import (PLAIN_STYLE, ScorerModel, build_prompt, contrastive_loss, cosine,
                               default_vocabulary, make_pairs, similarities, similarity,
                               similarity_matrix, style_retrieval, train_contrastive)
from tokenstyle.toyworld import STYLES

SMALL = ScorerConfig(embed_dim=8, widths=(4, 8, 8), epochs=2, batch_size=32, train_pairs=64)


@pytest.fixture(scope="module")
def pairs():
    return make_pairs(40, np.random.default_rng(0), 0.3)


@pytest.fixture(scope="module")
def model():
    return ScorerModel(SMALL, np.random.default_rng(1))


class TestPrompts:
    def test_templates(self):
        assert build_prompt("sketch", "a red circle on a blue background").text == \
            "a sketch of a red circle on a blue background"
        assert build_prompt("Pixelate").text == "pixelate"

    def test_empty_style(self):
        with pytest.raises(ValueError):
            build_prompt("  ")

    def test_unknown_word(self):
        with pytest.raises(VocabularyError) as info:
            build_prompt("cubism", None, default_vocabulary())
        assert info.value.words == ["cubism"]

    def test_vocabulary_covers_all_prompts(self, pairs):
        vocab = set(default_vocabulary())
        assert PLAIN_STYLE in vocab and set(STYLES) <= vocab
        for p in pairs.prompts:
            assert set(p.words) <= vocab


class TestPairs:
    def test_reproducible(self):
        a = make_pairs(10, np.random.default_rng(4), 0.3)
        b = make_pairs(10, np.random.default_rng(4), 0.3)
        assert np.array_equal(a.images, b.images)
        assert [p.text for p in a.prompts] == [p.text for p in b.prompts]

    def test_caption_free_share(self):
        ps = make_pairs(400, np.random.default_rng(5), 0.3)
        share = np.mean([p.caption is None for p in ps.prompts])
        assert abs(share - 0.3) < 0.07

    def test_prompt_matches_style(self, pairs):
        for p, s in zip(pairs.prompts, pairs.styles):
            assert p.style == s


class TestSimilarity:
    def test_cosine_worked_example(self):
        assert cosine(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(1 / math.sqrt(2))

    def test_cosine_zero_vector(self):
        with pytest.raises(NumericError):
            cosine(np.zeros(3), np.ones(3))

    def test_range_and_consistency(self, model, pairs):
        sims = similarities(model, pairs.images[:6], pairs.prompts[:6])
        assert np.all(np.abs(sims) <= 1.0)
        matrix = similarity_matrix(model, pairs.images[:6], pairs.prompts[:6])
        assert np.allclose(np.diag(matrix), sims, atol=1e-5)
        assert similarity(model, pairs.images[0], pairs.prompts[0]) == pytest.approx(sims[0], abs=1e-5)

    def test_padding_does_not_change_embedding(self, model):
        short = build_prompt("sketch")
        long = build_prompt("sketch", "a red circle on a blue background")
        with no_grad():
            alone = model.text_features([short]).data[0]
            batched = model.text_features([long, short]).data[1]
        assert np.allclose(alone, batched, atol=1e-6)

    def test_unknown_word_rejected(self, model):
        with pytest.raises(VocabularyError):
            model.text_features(["a cubism of cats"])


class TestContrastive:
    def test_matches_reference(self, model, pairs):
        images, prompts = pairs.images[:8], pairs.prompts[:8]
        loss = float(contrastive_loss(model, images, prompts).data)
        with no_grad():
            img = model.image_features(images).data.astype(np.float64)
            txt = model.text_features(prompts).data.astype(np.float64)
        logits = img @ txt.T * math.exp(float(model.log_scale.data))
        texts = [p.text for p in prompts]
        same = np.array([[a == b for b in texts] for a in texts], dtype=float)

        def xent(z, target):
            z = z - z.max(1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(1, keepdims=True))
            return -(logp * target / target.sum(1, keepdims=True)).sum() / len(z)

        expected = 0.5 * (xent(logits, same) + xent(logits.T, same.T))
        assert loss == pytest.approx(expected, rel=1e-5)

    def test_gradcheck(self, pairs):
        with precision(np.float64):
            m = ScorerModel(SMALL, np.random.default_rng(2)).astype(np.float64)
            images = pairs.images[:6].astype(np.float64)
            params = [m.log_scale, m.word_emb, m.img_head2.weight, m.txt_head.weight]
            err = grad_check_many(lambda: contrastive_loss(m, images, pairs.prompts[:6]), params,
                                  h=1e-6, max_entries=10, rng=np.random.default_rng(3))
        assert err < 1e-5

    def test_small_batch_rejected(self, pairs):
        cfg = ScorerConfig(**{**SMALL.__dict__, "batch_size": 16})
        with pytest.raises(ValueError):
            train_contrastive(pairs, cfg)

    def test_training_reduces_loss(self):
        ps = make_pairs(128, np.random.default_rng(6), 0.3)
        cfg = ScorerConfig(**{**SMALL.__dict__, "epochs": 6})
        _, history = train_contrastive(ps, cfg, seed=0)
        assert history[-1] < history[0]

    def test_style_retrieval_bounds(self, model, pairs):
        assert 0.0 <= style_retrieval(model, pairs) <= 1.0
