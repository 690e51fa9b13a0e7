"""Checks against the published Cora statistics; skipped without the dataset.

Point ``FEDGKD_CORA_DIR`` (or place ``data/cora``) at a directory produced by
``fedgkd convert --from planetoid-raw --name cora``.
"""

import numpy as np
import pytest

from fedgkd.acceptance import default_cora_dir
from fedgkd.graphs import load_dataset
from fedgkd.partitioning import overlapping_split

cora_missing = not default_cora_dir().is_dir()
needs_cora = pytest.mark.skipif(cora_missing, reason="converted Cora dataset not present")


@needs_cora
def test_cora_dimensions_match_published_statistics():
    g = load_dataset(default_cora_dir())
    assert g.num_nodes == 2485
    assert g.num_edges == 5069  # 10,138 directed arcs stored once per pair
    assert g.feature_dim == 1433
    assert g.num_classes == 7


@needs_cora
def test_cora_overlapping_ten_clients_have_about_621_nodes():
    g = load_dataset(default_cora_dir())
    split = overlapping_split(g, 10, seed=0)
    sizes = np.array([cg.num_nodes for cg in split.client_graphs])
    assert split.num_clients == 10
    # half of a ~1242-node part
    assert abs(sizes.mean() - 621) <= 5
    assert (np.abs(sizes - 621) <= 40).all()
