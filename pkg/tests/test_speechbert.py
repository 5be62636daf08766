import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segbert.gradcheck import check
from segbert.speechbert import (MaskPlan, SpeechBertConfig, SpeechBertModel, VocabularyError, apply_masks,
                                bert_forward, bert_loss, extract_embedding, mask_rows, plan_masks, train_bert)
from segbert.template import AcousticTemplate, build_template, collect_segments, pad_mask
from segbert.tensor import DimensionError, Tensor

from conftest import make_alignment


def many_syllable_alignment(n):
    return make_alignment([(k, k + 1) for k in range(n)], [(k, k) for k in range(n)])


class TestPlanMasks:
    def test_rate_zero(self, toy_corpus):
        for u in toy_corpus:
            assert plan_masks(u, 0.0, 1).spans == ()

    def test_rate_one(self, toy_corpus):
        from segbert.features import syllable_spans
        for u in toy_corpus:
            assert list(plan_masks(u, 1.0, 1).spans) == syllable_spans(u)

    def test_bernoulli_fraction(self):
        plan = plan_masks(many_syllable_alignment(10_000), 0.2, seed=11)
        assert abs(len(plan.spans) / 10_000 - 0.2) <= 0.01

    def test_exact_count(self):
        plan = plan_masks(many_syllable_alignment(37), 0.2, seed=3, exact_count=True)
        assert len(plan.spans) == round(0.2 * 37)

    @settings(max_examples=50, deadline=None)
    @given(rate=st.floats(0, 1), seed=st.integers(0, 2**31), n=st.integers(0, 30))
    def test_plan_is_ordered_subset_and_reproducible(self, rate, seed, n):
        a = many_syllable_alignment(n)
        plan = plan_masks(a, rate, seed)
        all_spans = [(k, k + 1) for k in range(n)]
        assert set(plan.spans) <= set(all_spans)
        assert list(plan.spans) == sorted(plan.spans)
        assert plan == plan_masks(a, rate, seed)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            plan_masks(many_syllable_alignment(3), 1.5, 0)


class TestApplyMasks:
    def test_empty_plan(self):
        mel = np.random.default_rng(0).normal(size=(8, 3))
        out = apply_masks(mel, MaskPlan(()), AcousticTemplate(np.zeros((3, 3))))
        assert np.array_equal(out, mel)

    def test_span_matches_template(self):
        rng = np.random.default_rng(1)
        mel, tpl = rng.normal(size=(8, 3)), AcousticTemplate(rng.normal(size=(3, 3)))
        out = apply_masks(mel, MaskPlan(((2, 5),)), tpl)
        assert np.array_equal(out[2:5], tpl.frames)
        assert np.array_equal(out[:2], mel[:2]) and np.array_equal(out[5:], mel[5:])

    def test_long_span_uses_duplication(self):
        rng = np.random.default_rng(2)
        mel, tpl = rng.normal(size=(12, 2)), AcousticTemplate(rng.normal(size=(3, 2)))
        out = apply_masks(mel, MaskPlan(((1, 9),)), tpl)
        assert np.array_equal(out[1:9], pad_mask(tpl, 8))
        assert np.array_equal(out[1:9], tpl.frames[[0, 1, 2, 0, 1, 2, 0, 1]])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            apply_masks(np.zeros((4, 2)), MaskPlan(((2, 6),)), AcousticTemplate(np.zeros((1, 2))))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31), rate=st.floats(0, 1))
    def test_unmasked_frames_untouched(self, seed, rate):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 12))
        a = many_syllable_alignment(n)
        mel = rng.normal(size=(n + 2, 3))
        plan = plan_masks(a, rate, seed)
        out = apply_masks(mel, plan, AcousticTemplate(rng.normal(size=(2, 3))))
        keep = ~mask_rows(n + 2, plan)
        assert np.array_equal(out[keep], mel[keep])


class TestForward:
    def test_bidirectional(self, small_bert):
        rng = np.random.default_rng(0)
        text, mel = [1, 2, 3], rng.normal(size=(6, 8))
        base, _ = bert_forward(small_bert, text, mel)
        mel2 = mel.copy()
        mel2[5] += 1.0
        pert, _ = bert_forward(small_bert, text, mel2)
        assert not np.array_equal(base.data[:5], pert.data[:5])

    def test_shapes(self, small_bert):
        rng = np.random.default_rng(1)
        for _ in range(20):
            T, n = int(rng.integers(1, 30)), int(rng.integers(1, 10))
            recon, states = bert_forward(small_bert, rng.integers(0, 12, size=n), rng.normal(size=(T, 8)))
            assert recon.shape == (T, 8)
            assert states.shape == (T, small_bert.cfg.d_E)

    def test_no_stop_parameters(self, small_bert):
        assert not any("stop" in name for name, _ in small_bert.named_parameters())

    def test_unknown_token(self, small_bert):
        with pytest.raises(VocabularyError):
            bert_forward(small_bert, [1, 99], np.zeros((3, 8)))

    def test_too_many_frames(self, small_bert_cfg):
        import dataclasses
        m = SpeechBertModel(dataclasses.replace(small_bert_cfg, max_frames=4))
        with pytest.raises(ValueError):
            bert_forward(m, [1], np.zeros((5, 8)))

    def test_gradcheck_six_frames(self):
        cfg = SpeechBertConfig(vocab_size=6, n_mels=4, d_model=8, heads=2, d_ff=16,
                               enc_layers=1, speech_enc_layers=1, dec_layers=1)
        model = SpeechBertModel(cfg, seed=3)
        rng = np.random.default_rng(4)
        for p in model.parameters():
            if p.ndim == 1:
                p.data = rng.normal(scale=0.3, size=p.shape)
        mel = rng.normal(size=(6, 4))
        masked = mel.copy()
        masked[1:3] = 0.0
        err = check(lambda: bert_loss(model.forward([0, 3, 5], masked)[0], mel), model.parameters(),
                    samples=100, rng=rng)
        assert err < 1e-5

    def test_gradient_reaches_speech_encoder(self, small_bert):
        rng = np.random.default_rng(5)
        mel = rng.normal(size=(7, 8))
        small_bert.zero_grad()
        bert_loss(bert_forward(small_bert, [1, 2], mel)[0], mel).backward()
        norm = sum(float(np.sum(p.grad ** 2)) for n, p in small_bert.named_parameters()
                   if n.startswith("speech_"))
        assert norm > 0


class TestLoss:
    def test_zero(self):
        gt = np.random.default_rng(0).normal(size=(3, 2))
        assert float(bert_loss(Tensor(gt), gt).data) == 0.0

    def test_constant_offset(self):
        gt = np.random.default_rng(0).normal(size=(3, 2))
        assert float(bert_loss(Tensor(gt + 1.0), gt).data) == pytest.approx(1.0, abs=1e-12)

    def test_hand_case(self):
        assert float(bert_loss(Tensor([[0.0, 0.0], [1.0, 1.0]]), [[1.0, 0.0], [1.0, 3.0]]).data) == 1.25

    def test_masked_only(self):
        loss = bert_loss(Tensor([[0.0, 0.0], [1.0, 1.0]]), [[1.0, 0.0], [1.0, 3.0]], np.array([False, True]))
        assert float(loss.data) == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            bert_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 2)))


class TestEmbedding:
    @pytest.mark.parametrize("T", [1, 7, 20])
    def test_rows_per_frame(self, small_bert, T):
        seg = np.random.default_rng(T).normal(size=(T, 8))
        assert extract_embedding(small_bert, seg).shape == (T, small_bert.cfg.d_E)

    def test_deterministic(self, small_bert):
        seg = np.random.default_rng(0).normal(size=(5, 8))
        assert np.array_equal(extract_embedding(small_bert, seg), extract_embedding(small_bert, seg.copy()))

    def test_offset_changes_embedding(self, small_bert):
        seg = np.random.default_rng(0).normal(size=(5, 8))
        d = np.linalg.norm(extract_embedding(small_bert, seg) - extract_embedding(small_bert, seg + 0.5))
        assert d > 0

    def test_segment_alone(self, small_bert):
        mel = np.random.default_rng(1).normal(size=(10, 8))
        _, states = bert_forward(small_bert, [1], mel[:4])
        assert np.array_equal(extract_embedding(small_bert, mel[:4]), states.data)

    def test_empty(self, small_bert):
        with pytest.raises(ValueError):
            extract_embedding(small_bert, np.zeros((0, 8)))


class TestTraining:
    @pytest.fixture
    def template(self, toy_corpus):
        return build_template(collect_segments(toy_corpus))

    def test_zero_steps_is_init(self, toy_corpus, template, small_bert_cfg):
        res = train_bert(toy_corpus, template, small_bert_cfg, steps=0, seed=9)
        fresh = SpeechBertModel(small_bert_cfg, seed=9)
        assert res.losses == []
        for (n1, p1), (n2, p2) in zip(res.model.named_parameters(), fresh.named_parameters()):
            assert n1 == n2 and np.array_equal(p1.data, p2.data)

    def test_same_seed_same_curve(self, toy_corpus, template, small_bert_cfg):
        a = train_bert(toy_corpus, template, small_bert_cfg, steps=15, seed=4)
        b = train_bert(toy_corpus, template, small_bert_cfg, steps=15, seed=4)
        assert a.losses == b.losses
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.model.parameters(), b.model.parameters()))

    def test_loss_goes_down(self, toy_corpus, template, small_bert_cfg):
        res = train_bert(toy_corpus, template, small_bert_cfg, steps=150, seed=0)
        assert np.mean(res.losses[-20:]) < 0.7 * np.mean(res.losses[:20])

    def test_empty_corpus(self, template, small_bert_cfg):
        with pytest.raises(ValueError):
            train_bert([], template, small_bert_cfg, steps=1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SpeechBertConfig(d_model=10, heads=3)
        with pytest.raises(ValueError):
            SpeechBertConfig(mask_rate=-0.1)
