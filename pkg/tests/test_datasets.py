import numpy as np
import pytest

from gtx.datasets import community_task, expected_degree, make_dataset, split_indices, structure_task
from gtx.numcore import ContractError


@pytest.fixture(scope="module")
def community():
    return community_task(n=1200, seed=3)


@pytest.fixture(scope="module")
def structure():
    return structure_task(n=1200, seed=3)


class TestSplits:
    def test_partition(self):
        tr, va, te = split_indices(1000, 0)
        assert (len(tr), len(va), len(te)) == (450, 100, 450)
        np.testing.assert_array_equal(np.sort(np.concatenate([tr, va, te])), np.arange(1000))

    def test_bad_fractions(self):
        with pytest.raises(ContractError):
            split_indices(10, 0, (0.5, 0.5, 0.5))

    def test_deterministic(self):
        for a, b in zip(split_indices(300, 4), split_indices(300, 4)):
            np.testing.assert_array_equal(a, b)


class TestGenerators:
    @pytest.mark.parametrize("maker", [community_task, structure_task])
    def test_shapes_and_balance(self, maker):
        ds = maker(n=800, seed=1)
        assert ds.graph.n == 800 and ds.features.shape[1] == 800
        assert ds.num_classes == 2
        assert abs(ds.labels.mean() - 0.5) < 0.01
        np.testing.assert_allclose(np.linalg.norm(ds.points, axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("maker", [community_task, structure_task])
    def test_deterministic(self, maker):
        a, b = maker(n=500, seed=2), maker(n=500, seed=2)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.graph.weights, b.graph.weights)

    def test_community_labels_homophilic(self, community):
        i, j, _ = community.graph.edges().T
        same = community.labels[i.astype(int)] == community.labels[j.astype(int)]
        assert same.mean() > 0.8

    def test_structure_density_non_uniform(self, structure):
        deg = np.diff(structure.graph.row_offsets)
        assert deg.std() / deg.mean() > 0.2

    def test_community_mean_degree(self, community):
        deg = np.diff(community.graph.row_offsets).mean()
        assert deg == pytest.approx(expected_degree(1200, 0.25), rel=0.1)

    def test_unknown_name(self):
        with pytest.raises(ContractError):
            make_dataset("cora")


class TestSubsampledSplits:
    def test_train_split_sizes(self, community):
        full = community.train_data(1.0, 0)
        quarter = community.train_data(0.25, 0)
        assert full.graph.n == 660
        assert quarter.graph.n == 165
        assert len(quarter.train_idx) + len(quarter.val_idx) == 165

    def test_no_test_nodes_in_training(self, community):
        data = community.train_data(0.5, 1)
        pool = set(community.train_idx) | set(community.val_idx)
        rows = {tuple(c) for c in community.features[:, sorted(pool)].T}
        assert all(tuple(c) in rows for c in data.features.T)

    def test_test_split_labels(self, community):
        g, x, y = community.test_data(1.0, 0)
        assert g.n == len(community.test_idx)
        np.testing.assert_array_equal(y, community.labels[np.sort(community.test_idx)])

    def test_degree_scale_preserved(self, community):
        full = community.train_data(1.0, 0).graph.degrees.mean()
        small = community.train_data(0.25, 0).graph.degrees.mean()
        assert small == pytest.approx(full, rel=0.25)

    def test_seed_changes_subsample(self, community):
        a, b = community.train_data(0.5, 0), community.train_data(0.5, 1)
        assert not np.array_equal(a.features, b.features)
