"""Encoder contracts: shapes, aggregation arithmetic, equivariances."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trimodal.numerics import tensor
from trimodal.encoders import (
    CLS_ID,
    EOS_ID,
    PAD_ID,
    FeatureBag,
    GeneEncoder,
    GeneProfile,
    Grid,
    SlideEncoder,
    TextEncoder,
    TokenSequence,
    discretize_expression,
    expression_bin_edges,
    load_pathway_partition,
    pathway_aggregate,
    pathway_groups,
    region_aggregate,
    region_structure,
    reshape_to_grid,
    save_pathway_partition,
)


@pytest.fixture
def slide_enc(rng):
    return SlideEncoder(rng, feat_dim=10, dim=16, heads=2, zero_residual=False)


@pytest.fixture
def gene_enc(rng):
    return GeneEncoder(rng, n_genes=12, dim=16, heads=2, n_bins=5,
                       zero_residual=False)


@pytest.fixture
def text_enc(rng):
    return TextEncoder(rng, vocab_size=16, max_len=10, dim=16, heads=2,
                       zero_residual=False)


class TestSlideEncoder:
    def test_shape_contract(self, rng, slide_enc):
        bag = FeatureBag(rng.normal(size=(30, 10)))
        cls_out, tokens = slide_enc.encode(bag)
        assert cls_out.shape == (16,)
        assert tokens.shape == (30, 16)

    def test_single_patch(self, rng, slide_enc):
        cls_out, tokens = slide_enc.encode(FeatureBag(rng.normal(size=(1, 10))))
        assert np.all(np.isfinite(cls_out.data))
        assert tokens.shape == (1, 16)

    def test_empty_bag_rejected(self, rng):
        with pytest.raises(ValueError):
            FeatureBag(np.zeros((0, 10)))

    def test_duplication_leaves_token_set(self, rng, slide_enc):
        feats = rng.normal(size=(6, 10))
        _, tokens_a = slide_enc.encode(FeatureBag(feats))
        _, tokens_b = slide_enc.encode(FeatureBag(np.concatenate([feats, feats])))
        # no positional signal: duplicated bag yields the same rows twice
        assert np.allclose(tokens_b.data[:6], tokens_b.data[6:], atol=1e-12)
        assert np.allclose(tokens_a.data, tokens_b.data[:6], atol=1e-12)

    def test_aggregated_contract(self, rng, slide_enc):
        enc = slide_enc.encode_aggregated(tensor(rng.normal(size=(1, 100, 10))),
                                          2, 2)
        assert enc.tokens.shape == (1, 25, 16)
        assert enc.cls.shape == (1, 16)
        assert enc.grid_side == 10


class TestGrid:
    def test_perfect_square(self, rng):
        grid = reshape_to_grid(tensor(rng.normal(size=(1, 9, 4))))
        assert grid.tokens.shape == (1, 3, 3, 4)
        assert grid.side == 3 and grid.n_real == 9

    def test_padding_count(self, rng):
        grid = reshape_to_grid(tensor(rng.normal(size=(1, 10, 4))))
        assert grid.side == 4
        assert grid.side**2 - grid.n_real == 6

    def test_single_cell(self, rng):
        grid = reshape_to_grid(tensor(rng.normal(size=(1, 1, 4))))
        assert grid.tokens.shape == (1, 1, 1, 4)


class TestRegionAggregate:
    def test_identity_when_unit_regions(self, rng):
        x = tensor(rng.normal(size=(1, 7, 3)))
        pooled, pad = region_aggregate(reshape_to_grid(x), 1, 1)
        assert pad is None
        assert np.array_equal(pooled.data, x.data)

    def test_mean_of_2x2(self):
        cells = tensor(np.array([1.0, 3.0, 5.0, 7.0]).reshape(1, 2, 2, 1))
        pooled, _ = region_aggregate(Grid(cells, 2, 4), 2, 2)
        assert pooled.data.ravel().tolist() == [4.0]

    def test_contracted_row_count(self, rng):
        x = tensor(rng.normal(size=(1, 100, 3)))
        pooled, _ = region_aggregate(reshape_to_grid(x), 2, 2)
        assert pooled.shape == (1, 25, 3)

    def test_region_larger_than_bag_rejected(self):
        with pytest.raises(ValueError):
            region_structure(3, 2, 2)

    def test_partial_regions_average_real_cells_only(self, rng):
        x = rng.normal(size=(1, 10, 2))
        pooled, _ = region_aggregate(reshape_to_grid(tensor(x)), 2, 2)
        # region 0 covers cells 0,1,4,5 of the 4x4 grid (row-major)
        assert np.allclose(pooled.data[0, 0], x[0, [0, 1, 4, 5]].mean(axis=0))
        # region 2 covers cells 8,9 only (12,13 are padding)
        assert np.allclose(pooled.data[0, 1], x[0, [2, 3, 6, 7]].mean(axis=0))


class TestBinning:
    def test_all_zero(self):
        assert np.array_equal(discretize_expression(np.zeros(5)), np.zeros(5))

    def test_max_hits_top_bin(self, rng):
        vals = rng.uniform(0, 10, size=100)
        bins = discretize_expression(vals, bins=7)
        assert bins[np.argmax(vals)] == 6

    def test_monotone(self, rng):
        vals = rng.uniform(0, 10, size=50)
        bins = discretize_expression(vals, bins=7)
        order = np.argsort(vals)
        assert np.all(np.diff(bins[order]) >= 0)

    def test_all_equal_maps_to_zero(self):
        assert np.array_equal(discretize_expression(np.full(5, 2.5)), np.zeros(5))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            expression_bin_edges(np.array([-1.0, 2.0]))


class TestGeneEncoder:
    def test_shape_contract(self, rng, gene_enc):
        cls_out, tokens = gene_enc.encode(rng.integers(0, 5, size=(1, 12)))
        assert cls_out.shape == (1, 16)
        assert tokens.shape == (1, 12, 16)

    def test_identical_genes_get_identical_embeddings(self, rng, gene_enc):
        bins = np.array([[2, 2, 0, 1, 1, 1, 3, 3, 4, 4, 0, 0]])
        ids = np.array([[5, 5, 0, 1, 1, 1, 3, 3, 4, 4, 0, 0]])
        from trimodal.numerics import take_rows, add
        tok = add(take_rows(gene_enc.id_embed, ids),
                  take_rows(gene_enc.bin_embed, bins))
        assert np.allclose(tok.data[0, 0], tok.data[0, 1])

    def test_permutation_equivariance(self, rng, gene_enc):
        bins = rng.integers(0, 5, size=12)
        ids = np.arange(12)
        perm = rng.permutation(12)
        _, tokens = gene_enc.encode(bins[None], ids[None])
        _, tokens_p = gene_enc.encode(bins[perm][None], ids[perm][None])
        assert np.allclose(tokens_p.data[0], tokens.data[0][perm], atol=1e-12)

    def test_profile_path_shape(self, rng, gene_enc):
        prof = GeneProfile(rng.uniform(0, 3, size=12),
                           [np.arange(0, 4), np.arange(4, 8)])
        enc = gene_enc.encode_profile(prof)
        # 2 pathways + catch-all for genes 8..11
        assert enc.tokens.shape == (1, 3, 16)


class TestPathways:
    def test_single_pathway_of_identical_rows(self):
        tok = tensor(np.tile(np.array([1.0, 2.0]), (4, 1)))
        pooled = pathway_aggregate(tok, [np.arange(4)])
        assert np.allclose(pooled.data, [[1.0, 2.0]])

    def test_two_pathways_shapes(self, rng):
        tok = tensor(rng.normal(size=(4, 3)))
        pooled = pathway_aggregate(tok, [np.array([0, 1]), np.array([2, 3])])
        assert pooled.shape == (2, 3)

    def test_all_unassigned_yields_catchall_mean(self, rng):
        tok = rng.normal(size=(5, 3))
        pooled = pathway_aggregate(tensor(tok), [])
        assert pooled.shape == (1, 3)
        assert np.allclose(pooled.data[0], tok.mean(axis=0), atol=1e-12)

    def test_mean_within_tolerance(self, rng):
        tok = rng.normal(size=(6, 4))
        pooled = pathway_aggregate(tensor(tok), [np.array([1, 3, 5])])
        assert np.max(np.abs(pooled.data[0] - tok[[1, 3, 5]].mean(axis=0))) < 1e-12

    def test_empty_pathway_rejected(self):
        with pytest.raises(ValueError):
            pathway_groups([np.array([], dtype=int)], 4)

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            pathway_groups([np.array([0, 1]), np.array([1, 2])], 4)

    def test_partition_file_round_trip(self, tmp_path, rng):
        part = [np.array([0, 3, 5]), np.array([1, 2])]
        path = tmp_path / "pathways.txt"
        save_pathway_partition(path, part)
        loaded = load_pathway_partition(path)
        assert all(np.array_equal(a, b) for a, b in zip(part, loaded))


class TestTextEncoder:
    def _ids(self, body, length=10):
        ids = np.full(length, PAD_ID, dtype=int)
        ids[0] = CLS_ID
        ids[1:1 + len(body)] = body
        return ids

    def test_shape_contract(self, rng, text_enc):
        enc = text_enc.encode(self._ids([4, 5, 6, EOS_ID]))
        assert enc.tokens.shape == (1, 10, 16)
        assert enc.cls.shape == (1, 16)

    def test_all_pad_after_cls(self, rng, text_enc):
        enc = text_enc.encode(self._ids([]))
        assert np.all(np.isfinite(enc.cls.data))

    def test_missing_cls_rejected(self, rng, text_enc):
        ids = self._ids([4, 5])
        ids[0] = 4
        with pytest.raises(ValueError):
            text_enc.encode(ids)

    def test_pad_contents_do_not_affect_real_rows(self, rng, text_enc):
        ids = self._ids([4, 5, 6, EOS_ID])
        mask = ids != PAD_ID
        altered = ids.copy()
        altered[7] = 9  # inside padding
        a = text_enc.encode(ids, real_mask=mask)
        b = text_enc.encode(altered, real_mask=mask)
        assert np.array_equal(a.tokens.data[0, mask], b.tokens.data[0, mask])

    def test_token_sequence_validation(self):
        with pytest.raises(ValueError):
            TokenSequence(np.array([4, 5]))  # no CLS at position 0


class TestShapeFuzz:
    """Randomized shape contracts for the aggregation pipeline."""

    @given(st.integers(1, 200), st.integers(1, 5), st.integers(1, 5),
           st.integers(0, 2**31 - 1))
    @settings(max_examples=120, deadline=None)
    def test_region_counts(self, n_h, a, b, seed):
        side = int(np.ceil(np.sqrt(n_h)))
        if a * b > n_h or a > side or b > side:
            with pytest.raises(ValueError):
                region_structure(n_h, a, b)
            return
        side_got, groups = region_structure(n_h, a, b)
        assert side_got == side
        assert len(groups) == n_h // (a * b)
        cells = np.concatenate(groups) if groups else np.array([])
        assert len(np.unique(cells)) == len(cells)
        assert np.all(cells < n_h)

    @given(st.integers(1, 60), st.integers(1, 10), st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_pathway_counts(self, n_genes, n_groups, seed):
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n_genes)
        cuts = np.sort(rng.choice(n_genes + 1, size=min(n_groups, n_genes),
                                  replace=False))
        partition = [perm[a:b] for a, b in zip(cuts[:-1], cuts[1:])
                     if b > a]
        groups = pathway_groups(partition, n_genes)
        covered = sum(g.size for g in groups)
        assert covered == n_genes
