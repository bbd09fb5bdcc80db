"""Fusion: span bookkeeping, residual contract, subset purity, isolation."""

import numpy as np
import pytest

from trimodal.numerics import Tensor, tensor, tsum, mul
from trimodal.encoders import GeneEncoding, SlideEncoding, TextEncoding
from trimodal.fusion import UniversalFusion, assemble_sequence, fuse


def _fake_encodings(rng, d=16, n_h=25, n_g=10, n_t=12):
    slide = SlideEncoding(cls=tensor(rng.normal(size=(1, d))),
                          tokens=tensor(rng.normal(size=(1, n_h, d))),
                          grid_side=5)
    genes = GeneEncoding(cls=tensor(rng.normal(size=(1, d))),
                         tokens=tensor(rng.normal(size=(1, n_g, d))))
    mask = np.ones((1, n_t), dtype=bool)
    mask[0, -3:] = False
    text = TextEncoding(tokens=tensor(rng.normal(size=(1, n_t, d))),
                        real_mask=mask)
    return slide, genes, text


class TestAssemble:
    def test_zero_modalities_rejected(self):
        with pytest.raises(ValueError):
            assemble_sequence()

    def test_single_modality_span(self, rng):
        slide, _, _ = _fake_encodings(rng)
        state = assemble_sequence(slide=slide)
        assert state.modality_set.length == 26
        assert state.modality_set.spans == [("H", 0, 26)]

    def test_three_modalities_prefix_sums(self, rng):
        # oracle: CLS indices are prefix sums of span lengths
        slide, genes, text = _fake_encodings(rng)
        state = assemble_sequence(slide=slide, genes=genes, text=text)
        lengths = [26, 11, 12]
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        assert state.modality_set.length == sum(lengths)
        for (m, s, l), start, length in zip(state.modality_set.spans, starts,
                                            lengths):
            assert (s, l) == (start, length)
            assert state.modality_set.cls_index(m) == start

    def test_missing_first_modality_starts_at_zero(self, rng):
        _, genes, text = _fake_encodings(rng)
        state = assemble_sequence(genes=genes, text=text)
        assert state.modality_set.spans[0] == ("G", 0, 11)

    def test_text_pad_mask_carried(self, rng):
        slide, _, text = _fake_encodings(rng)
        state = assemble_sequence(slide=slide, text=text)
        assert state.key_mask.sum() == 26 + 9


class TestFusionBlocks:
    def test_zero_residual_init_is_identity(self, rng):
        fus = UniversalFusion(rng, 16, 2, 2, zero_residual=True)
        slide, genes, text = _fake_encodings(rng)
        state = fus.assemble(slide=slide, genes=genes, text=text)
        out = fus(state)
        assert np.array_equal(out.tokens.data, state.tokens.data)

    def test_explicitly_zeroed_residuals_identity(self, rng):
        fus = UniversalFusion(rng, 16, 2, 2, zero_residual=False)
        for block in fus.blocks:
            block.attn.wo.data = np.zeros_like(block.attn.wo.data)
            block.attn.bo.data = np.zeros_like(block.attn.bo.data)
            for expert in (block.expert_h, block.expert_g, block.expert_t):
                expert.w2.data = np.zeros_like(expert.w2.data)
                expert.b2.data = np.zeros_like(expert.b2.data)
        slide, genes, text = _fake_encodings(rng)
        state = fus.assemble(slide=slide, genes=genes, text=text)
        out = fus(state)
        assert np.array_equal(out.tokens.data, state.tokens.data)

    def test_zero_expert_outputs_make_stage2_identity(self, rng):
        fus = UniversalFusion(rng, 16, 2, 1, zero_residual=False)
        block = fus.blocks[0]
        for expert in (block.expert_h, block.expert_g, block.expert_t):
            expert.w2.data = np.zeros_like(expert.w2.data)
            expert.b2.data = np.zeros_like(expert.b2.data)
        slide, genes, text = _fake_encodings(rng)
        state = fus.assemble(slide=slide, genes=genes, text=text)
        out = fus(state)
        # stage 1 (attention) alone must explain the output
        from trimodal.numerics import layer_norm, multi_head_attention, \
            key_padding_mask, add
        normed = layer_norm(state.tokens, block.ln1_g, block.ln1_b)
        expect = add(state.tokens, multi_head_attention(
            normed, normed, normed, 2, block.attn.params,
            mask=key_padding_mask(state.key_mask)))
        assert np.allclose(out.tokens.data, expect.data, atol=1e-12)

    def test_single_token_sequence(self, rng):
        fus = UniversalFusion(rng, 16, 2, 1, zero_residual=False)
        genes = GeneEncoding(cls=tensor(rng.normal(size=(1, 16))),
                             tokens=tensor(np.zeros((1, 0, 16))))
        state = fus.assemble(genes=genes)
        out = fus(state)
        assert out.tokens.shape == (1, 1, 16)

    def test_output_shape_matches_input_for_all_subsets(self, rng):
        fus = UniversalFusion(rng, 16, 2, 2, zero_residual=False)
        slide, genes, text = _fake_encodings(rng)
        options = {"slide": slide, "genes": genes, "text": text}
        import itertools
        for r in (1, 2, 3):
            for combo in itertools.combinations(options, r):
                state = fus.assemble(**{k: options[k] for k in combo})
                out = fus(state)
                assert out.tokens.shape == state.tokens.shape

    def test_n_blocks_one_equals_single_block(self, rng):
        fus = UniversalFusion(rng, 16, 2, 2, zero_residual=False)
        slide, genes, _ = _fake_encodings(rng)
        state = fus.assemble(slide=slide, genes=genes)
        a = fuse(state, fus.blocks, n_blocks=1)
        b = fus.blocks[0](state)
        assert np.array_equal(a.tokens.data, b.tokens.data)


class TestSubsetPurity:
    def test_subset_output_ignores_other_modalities(self, rng):
        """fuse({H}) is bit-identical no matter what other data exists."""
        fus = UniversalFusion(rng, 16, 2, 2, zero_residual=False)
        slide, genes, text = _fake_encodings(rng)
        state = fus.assemble(slide=slide)
        ref = fus(state).tokens.data.copy()
        for _ in range(3):
            # entirely different gene/text data in the same "sample"
            _, genes2, text2 = _fake_encodings(np.random.default_rng())
            again = fus(fus.assemble(slide=slide)).tokens.data
            assert np.array_equal(ref, again)

    def test_absent_expert_parameters_never_touched(self, rng):
        fus = UniversalFusion(rng, 16, 2, 2, zero_residual=False)
        slide, _, text = _fake_encodings(rng)
        state = fus.assemble(slide=slide, text=text)
        before = fus(state).tokens.data.copy()
        for block in fus.blocks:
            block.expert_g.w1.data += 100.0
            block.expert_g.w2.data += 100.0
        after = fus(fus.assemble(slide=slide, text=text)).tokens.data
        assert np.array_equal(before, after)

    def test_no_gradient_reaches_absent_modalities(self, rng):
        fus = UniversalFusion(rng, 16, 2, 2, zero_residual=False)
        _, genes, text = _fake_encodings(rng)
        state = fus.assemble(genes=genes, text=text)
        out = fus(state)
        fus.zero_grads()
        tsum(mul(out.tokens, out.tokens)).backward()
        for block in fus.blocks:
            for _, t in block.expert_h.named_parameters():
                assert t.grad is None
            assert any(t.grad is not None and np.any(t.grad)
                       for _, t in block.expert_g.named_parameters())

    def test_gradients_flow_to_every_present_expert(self, rng):
        fus = UniversalFusion(rng, 16, 2, 2, zero_residual=False)
        slide, genes, text = _fake_encodings(rng)
        state = fus.assemble(slide=slide, genes=genes, text=text)
        out = fus(state)
        fus.zero_grads()
        tsum(mul(out.tokens, out.tokens)).backward()
        for block in fus.blocks:
            for expert in (block.expert_h, block.expert_g, block.expert_t):
                norms = [np.abs(t.grad).sum() for _, t in
                         expert.named_parameters() if t.grad is not None]
                assert norms and sum(norms) > 0
