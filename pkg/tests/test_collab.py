"""Collaborative-model tests: inner-product scoring, MSE and InfoNCE
oracles, the hybrid stage-2 trainer, and its lambda=0 reduction to MF."""

import math

import numpy as np
import pytest

from sella.collab import (
    AlignConfig,
    CollabError,
    CollabModel,
    ProjCtoL,
    align_loss,
    align_loss_graph,
    collab_loss,
    collab_loss_graph,
    mean_alignment_cosine,
    train_stage2,
)
from sella.data import synth_generate
from sella.distill import SemanticBank
from sella.evalrep import auc
from sella.tensor import Graph, grad_check


def make_bank(n_items, d_l, seed=0, spread=1.0):
    rng = np.random.default_rng(seed)
    return SemanticBank(item_ids=list(range(n_items)),
                        vectors=spread * rng.normal(size=(n_items, d_l)))


# ---------------------------------------------------------------------------
# prediction


def test_predict_inner_product():
    m = CollabModel(2, 2, 2)
    m.user_table[0] = [1.0, 2.0]
    m.item_table[1] = [3.0, -1.0]
    assert m.predict(0, 1) == 1.0


def test_predict_zero_user_scores_zero_everywhere():
    m = CollabModel(3, 5, 4)
    m.user_table[1] = 0.0
    assert all(m.predict(1, i) == 0.0 for i in range(5))


def test_predict_out_of_range():
    m = CollabModel(2, 2, 2)
    with pytest.raises(CollabError, match="out of range"):
        m.predict(5, 0)


def test_score_ordering_invariant_under_joint_rotation():
    rng = np.random.default_rng(0)
    m = CollabModel(4, 30, 8, seed=1)
    m.user_table = rng.normal(size=(4, 8))
    m.item_table = rng.normal(size=(30, 8))
    # random orthogonal rotation applied to both tables
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    before = [np.argsort(m.user_table[u] @ m.item_table.T).tolist()
              for u in range(4)]
    m.user_table = m.user_table @ q
    m.item_table = m.item_table @ q
    after = [np.argsort(m.user_table[u] @ m.item_table.T).tolist()
             for u in range(4)]
    assert before == after


# ---------------------------------------------------------------------------
# collab loss


def test_collab_loss_perfect_predictions_zero():
    m = CollabModel(1, 1, 2)
    m.user_table[0] = [1.0, 0.0]
    m.item_table[0] = [1.0, 0.0]
    assert collab_loss(m, [(0, 0, 1)]) == 0.0


def test_collab_loss_unit_gap():
    m = CollabModel(1, 1, 2)
    m.user_table[0] = 0.0
    assert collab_loss(m, [(0, 0, 1)]) == 1.0


def test_collab_loss_half_half_quarter():
    m = CollabModel(1, 2, 1)
    m.user_table[0] = [1.0]
    m.item_table[0] = [0.5]
    m.item_table[1] = [0.5]
    assert collab_loss(m, [(0, 0, 1), (0, 1, 0)]) == 0.25


def test_collab_loss_empty_batch():
    with pytest.raises(CollabError, match="empty"):
        collab_loss(CollabModel(1, 1, 2), [])


def test_collab_loss_graph_matches_float():
    rng = np.random.default_rng(2)
    m = CollabModel(6, 7, 3, seed=3)
    batch = [(int(rng.integers(6)), int(rng.integers(7)),
              int(rng.integers(2))) for _ in range(12)]
    uu, ii, yy = (np.asarray(c) for c in zip(*batch))
    g = Graph()
    u_rows = g.embedding_lookup(g.leaf(m.user_table), tuple(uu))
    i_rows = g.embedding_lookup(g.leaf(m.item_table), tuple(ii))
    node = collab_loss_graph(g, u_rows, i_rows, yy)
    assert node.out.item() == pytest.approx(collab_loss(m, batch), abs=1e-14)


# ---------------------------------------------------------------------------
# align loss


def test_align_loss_single_item_exactly_zero():
    proj = ProjCtoL(3, 5, seed=0)
    rng = np.random.default_rng(1)
    assert align_loss(rng.normal(size=(1, 3)), proj,
                      rng.normal(size=(1, 5)), tau=0.07) == 0.0


def test_align_loss_identity_cosine_matrix():
    # cosine matrix [[1,0],[0,1]] at tau=1: loss = -log(e/(e+1))
    g = Graph()
    projected = g.leaf(np.array([[1.0, 0.0], [0.0, 1.0]]))
    bank = g.leaf(np.array([[1.0, 0.0], [0.0, 1.0]]))
    loss = align_loss_graph(g, projected, bank, tau=1.0)
    expected = -math.log(math.e / (math.e + 1.0))
    assert loss.out.item() == pytest.approx(expected, abs=1e-12)
    assert loss.out.item() == pytest.approx(0.31326168751822286, abs=1e-12)


def test_align_loss_high_tau_approaches_log_B():
    rng = np.random.default_rng(3)
    proj = ProjCtoL(4, 6, seed=1)
    loss = align_loss(rng.normal(size=(5, 4)), proj,
                      rng.normal(size=(5, 6)), tau=1e9)
    assert loss == pytest.approx(math.log(5), abs=1e-6)


def test_align_loss_nonnegative():
    rng = np.random.default_rng(4)
    proj = ProjCtoL(3, 4, seed=2)
    for seed in range(5):
        r = np.random.default_rng(seed)
        val = align_loss(r.normal(size=(6, 3)), proj,
                         r.normal(size=(6, 4)), tau=0.5)
        assert val >= 0.0


def test_align_loss_zero_norm_vector_is_error():
    proj = ProjCtoL(3, 4, seed=0)
    bank = np.zeros((2, 4))
    with pytest.raises(Exception, match="zero-norm"):
        align_loss(np.ones((2, 3)), proj, bank, tau=1.0)


def test_combined_objective_passes_finite_difference():
    # 3 users / 4 items hybrid loss, gradient checked per parameter
    rng = np.random.default_rng(5)
    user_t = rng.normal(size=(3, 4))
    item_t = rng.normal(size=(4, 4))
    bank_v = rng.normal(size=(4, 6))
    proj = ProjCtoL(4, 6, seed=3)
    uu, ii, yy = np.array([0, 1, 2, 0]), np.array([0, 1, 2, 3]), \
        np.array([1, 0, 1, 0])
    g = Graph()
    u_leaf = g.leaf(user_t, param=True)
    i_leaf = g.leaf(item_t, param=True)
    b_leaf = g.leaf(bank_v, param=True)
    proj_leaves = proj.leaves(g, trainable={f"proj_cl.{n}"
                                            for n in proj.params})
    u_rows = g.embedding_lookup(u_leaf, tuple(uu))
    i_rows = g.embedding_lookup(i_leaf, tuple(ii))
    loss = collab_loss_graph(g, u_rows, i_rows, yy)
    items = (0, 1, 2, 3)
    projected = proj.apply_graph(
        g, proj_leaves, g.embedding_lookup(i_leaf, items))
    bank_rows = g.embedding_lookup(b_leaf, items)
    loss = g.add(loss, g.scale(
        align_loss_graph(g, projected, bank_rows, tau=0.5), 0.1))
    for leaf in [u_leaf, i_leaf, b_leaf] + list(proj_leaves.values()):
        assert grad_check(g, loss, leaf, 1e-5) <= 1e-4


# ---------------------------------------------------------------------------
# stage-2 training


@pytest.fixture(scope="module")
def small_synth():
    return synth_generate(40, 50, 3, 0.25, 0.1, seed=11, cold_frac=0.1)


def test_stage2_lambda_zero_reduces_to_mf(small_synth):
    bank = make_bank(50, 12, seed=1)
    cfg = AlignConfig(lam=0.0, epochs=5, batch_size=128, seed=0, d_c=8)
    proj_before = ProjCtoL(8, 12, seed=0)
    model, aligned, proj = train_stage2(small_synth, bank, cfg)
    assert np.array_equal(aligned.vectors, bank.vectors)
    assert aligned.provenance == "aligned"
    for n in proj.params:
        assert np.array_equal(proj.params[n], proj_before.params[n])


def test_stage2_requires_distilled_bank(small_synth):
    bank = make_bank(50, 12).with_vectors(np.zeros((50, 12)), "aligned")
    with pytest.raises(CollabError, match="distilled"):
        train_stage2(small_synth, bank,
                     AlignConfig(epochs=1, d_c=8))


def test_stage2_alignment_cosine_strictly_increases(small_synth):
    bank = make_bank(50, 12, seed=2)
    train_items = sorted({r.item_id for r in small_synth.interactions
                          if r.split == "train"})
    cfg = AlignConfig(lam=0.1, epochs=12, batch_size=128, seed=1, d_c=8)
    init_model = CollabModel(small_synth.num_users, small_synth.num_items,
                             8, seed=cfg.seed)
    init_proj = ProjCtoL(8, 12, seed=cfg.seed)
    before = mean_alignment_cosine(init_model, init_proj, bank, train_items)
    model, aligned, proj = train_stage2(small_synth, bank, cfg)
    after = mean_alignment_cosine(
        model, proj, aligned, train_items)
    assert after > before


def test_stage2_determinism(small_synth):
    bank = make_bank(50, 12, seed=3)
    cfg = AlignConfig(lam=0.1, epochs=3, batch_size=128, seed=5, d_c=8)
    m1, a1, p1 = train_stage2(small_synth, bank, cfg)
    m2, a2, p2 = train_stage2(small_synth, bank, cfg)
    assert np.array_equal(m1.user_table, m2.user_table)
    assert np.array_equal(a1.vectors, a2.vectors)
    for n in p1.params:
        assert np.array_equal(p1.params[n], p2.params[n])


def test_stage2_mf_reaches_auc_085_on_planted_rank4():
    # the synthetic dataset is its own oracle: MF must recover the planted
    # structure on the test split (cold items included)
    ds = synth_generate(200, 300, 4, 0.05, 0.1, seed=0, cold_frac=0.08)
    bank = make_bank(300, 8, seed=0)
    cfg = AlignConfig(lam=0.0, epochs=200, batch_size=256, seed=0, d_c=8,
                      lr=1e-2, patience=25, weight_decay=3.0)
    model, _, _ = train_stage2(ds, bank, cfg)
    test = [(r.user_id, r.item_id, r.label)
            for r in ds.interactions if r.split == "test"]
    uu, ii, yy = (np.asarray(c) for c in zip(*test))
    assert auc(model.scores(uu, ii), yy) >= 0.85


def test_projctol_shapes_and_determinism():
    proj = ProjCtoL(4, 10, seed=7)
    assert proj.params["W1"].shape == (8, 4)
    assert proj.params["W2"].shape == (10, 8)
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert proj(x).shape == (3, 10)
    assert np.array_equal(proj(x), ProjCtoL(4, 10, seed=7)(x))


def test_stage2_checkpoint_roundtrip(tmp_path, small_synth):
    from sella.collab import save_stage2
    bank = make_bank(50, 12, seed=4)
    cfg = AlignConfig(lam=0.1, epochs=2, batch_size=128, seed=2, d_c=8)
    model, aligned, proj = train_stage2(small_synth, bank, cfg)
    save_stage2(str(tmp_path / "s2"), model, aligned, proj, cfg)
    m2 = CollabModel.load(str(tmp_path / "s2"))
    p2 = ProjCtoL.load(str(tmp_path / "s2"))
    b2 = SemanticBank.load(str(tmp_path / "s2"))
    assert np.array_equal(m2.user_table, model.user_table)
    assert np.array_equal(p2.params["W1"], proj.params["W1"])
    assert np.array_equal(b2.vectors, aligned.vectors)
    assert b2.provenance == "aligned"
