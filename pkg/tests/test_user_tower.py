from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import SOURCE, micro_bundle
from protorec.datamodel import InteractionRecord, ItemEntityMap
from protorec.numerics import EmptySupportError, gradcheck, parameter
from protorec.prototype import PrototypeBank, topk_mask
from protorec.user_tower import (ENHANCED, PLAIN, UserHistories, UserTower, batch_interests, deconstruct,
                                 encode_user, entity_mask, extract_interests, fuse, history_mask, item_mask,
                                 pe_attention)

D = 6


def tower(seed=0, m=3, identity=True):
    return UserTower(np.random.default_rng(seed), dim=D, num_interests=m, pe_hidden=(2 * D, 2 * D),
                     pe_identity=identity)


def test_defaults():
    t = UserTower(np.random.default_rng(0))
    assert t.num_interests == 10 and t.dim == 64
    assert t.attention.shape == (64, 64)


# deconstruction -----------------------------------------------------------------

def test_deconstruct_expands_items_in_order():
    b = micro_bundle()
    b = replace(b, item_entities=ItemEntityMap({**dict(b.item_entities), 7: (0, 1), 8: (2,)}))
    b.records[SOURCE].append(InteractionRecord(SOURCE, 5, 1, (7, 8), 1, 99))
    seq = deconstruct(5, b, history_cap=5)
    assert seq.entity_ids.tolist() == [0, 1, 2, -1, -1]


def test_deconstruct_keeps_most_recent_entries():
    b = micro_bundle()
    b.records[SOURCE].append(InteractionRecord(SOURCE, 5, 1, (0, 1, 2), 1, 99))
    # (0,1) + (2,) + (3,4) -> keep the last three
    assert deconstruct(5, b, history_cap=3).entity_ids.tolist() == [2, 3, 4]


def test_user_without_behaviours_is_all_padding():
    b = micro_bundle()
    seq = deconstruct(42, b, history_cap=4)
    assert seq.entity_ids.tolist() == [-1] * 4
    assert not seq.valid.any()


def test_latest_record_behaviours_are_used():
    b = micro_bundle()
    # user 0's last source record carries behaviors (0,) -> entities (0, 1)
    assert deconstruct(0, b, history_cap=4).entity_ids.tolist() == [0, 1, -1, -1]


def test_unmapped_behaviour_item():
    b = micro_bundle()
    b.records[SOURCE].append(InteractionRecord(SOURCE, 5, 1, (77,), 1, 99))
    with pytest.raises(KeyError, match="unmapped behavior item 77"):
        deconstruct(5, b)


def test_padded_rows_embed_as_zero():
    b = micro_bundle()
    h = np.random.default_rng(0).normal(size=(6, D))
    emb = deconstruct(0, b, history_cap=4).embed(h).data
    np.testing.assert_array_equal(emb[2:], 0.0)
    np.testing.assert_array_equal(emb[:2], h[[0, 1]])


def test_histories_batch_drops_all_padding_columns():
    b = micro_bundle()
    ids = UserHistories(b, history_cap=4).batch([0, 1])
    assert ids.shape == (2, 2)


# interest extraction -----------------------------------------------------------------

def test_identical_rows_give_that_row():
    r = np.random.default_rng(1).normal(size=D)
    z = extract_interests(np.tile(r, (5, 1)), np.ones(5, bool), tower()).data
    np.testing.assert_allclose(z, np.tile(r, (3, 1)), atol=1e-12)


def test_single_valid_position():
    x = np.random.default_rng(2).normal(size=(4, D))
    valid = np.array([False, False, True, False])
    z = extract_interests(x, valid, tower()).data
    np.testing.assert_allclose(z, np.tile(x[2], (3, 1)), atol=1e-15)


def test_empty_history_raises():
    with pytest.raises(EmptySupportError, match="empty history"):
        extract_interests(np.zeros((3, D)), np.zeros(3, bool), tower())


@given(st.integers(1, 6), st.integers(0, 5), st.integers(0, 10_000))
def test_padding_and_permutation_invariance(n_valid, n_pad, seed):
    rng = np.random.default_rng(seed)
    t = tower(seed % 7)
    x = rng.normal(size=(n_valid, D))
    base = extract_interests(x, np.ones(n_valid, bool), t).data
    padded = np.vstack([x, np.zeros((n_pad, D))])
    valid = np.r_[np.ones(n_valid, bool), np.zeros(n_pad, bool)]
    assert np.max(np.abs(extract_interests(padded, valid, t).data - base)) <= 1e-12
    perm = rng.permutation(n_valid + n_pad)
    assert np.max(np.abs(extract_interests(padded[perm], valid[perm], t).data - base)) <= 1e-12


def test_batched_extraction_matches_single():
    rng = np.random.default_rng(3)
    t = tower()
    x = rng.normal(size=(2, 4, D))
    valid = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], bool)
    both = extract_interests(x, valid, t).data
    for u in range(2):
        np.testing.assert_allclose(both[u], extract_interests(x[u], valid[u], t).data, atol=1e-14)


def test_cold_start_users_get_learned_vector():
    t = tower()
    h = np.random.default_rng(4).normal(size=(5, D))
    ids = np.array([[0, 1], [-1, -1]])
    out = batch_interests(h, ids, t).data
    np.testing.assert_array_equal(out[1], np.tile(t.cold_start.data, (3, 1)))
    np.testing.assert_allclose(out[0], extract_interests(h[[0, 1]], np.ones(2, bool), t).data, atol=1e-15)


# prototype-enhanced attention -----------------------------------------------------------

def bank(n=5, seed=0):
    return PrototypeBank(n, D, np.random.default_rng(seed), top_k=2)


def capture_mlp_input(t):
    seen = {}
    original = t.pe_mlp.__call__

    class Spy:
        def __call__(self, x):
            seen["x"] = x.data.copy()
            return original(x)
    t.pe_mlp = Spy()
    return seen


def test_single_unmasked_prototype():
    t, b = tower(), bank()
    z = np.random.default_rng(5).normal(size=D)
    seen = capture_mlp_input(t)
    mask = np.full(5, -np.inf)
    mask[3] = 0.0
    pe_attention(z, mask, b, t)
    np.testing.assert_allclose(seen["x"], b.prototypes.data[3] + z, atol=1e-15)


def test_uniform_attention_when_orthogonal():
    t, b = tower(), bank()
    b.prototypes.data[:, -1] = 0.0
    z = np.zeros(D)
    z[-1] = 2.0
    seen = capture_mlp_input(t)
    pe_attention(z, np.zeros(5), b, t)
    np.testing.assert_allclose(seen["x"], b.prototypes.data.mean(0) + z, atol=1e-15)


def test_all_masked_raises():
    with pytest.raises(EmptySupportError):
        pe_attention(np.ones(D), np.full(5, -np.inf), bank(), tower())


def test_identity_initialised_mlp_passes_input_through():
    t = tower(identity=True)
    x = np.random.default_rng(6).normal(size=(4, D))
    from protorec.numerics import Tensor
    np.testing.assert_allclose(t.pe_mlp(Tensor(x)).data, x, atol=1e-15)


def test_pe_attention_gradient():
    t, b = tower(identity=False), bank()
    z = parameter(np.random.default_rng(7).normal(size=(3, D)))
    mask = topk_mask(np.random.default_rng(8).random(5), 3)
    w = np.random.default_rng(9).normal(size=(3, D))
    res = gradcheck(lambda: (pe_attention(z, mask, b, t) * w).sum(), [z, b.prototypes] + t.pe_mlp.parameters(),
                    probes=100, rng=np.random.default_rng(10))
    assert res.max_rel_error <= 1e-4


# fusion ------------------------------------------------------------------------------

def test_fuse_identical_interests():
    r = np.random.default_rng(11).normal(size=D)
    np.testing.assert_allclose(fuse(np.tile(r, (3, 1)), tower()).data, r, atol=1e-12)


def test_fuse_single_interest():
    t = tower(m=1)
    r = np.random.default_rng(12).normal(size=(1, D))
    np.testing.assert_allclose(fuse(r, t).data, r[0], atol=1e-15)


@given(st.integers(0, 10_000))
def test_fusion_weights_and_convex_hull(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(3, D)) * 4
    out, beta = fuse(z, tower(seed % 5), return_weights=True)
    assert abs(beta.sum() - 1) <= 1e-12
    assert np.all(out.data >= z.min(0) - 1e-12) and np.all(out.data <= z.max(0) + 1e-12)


# masks and full encoding -------------------------------------------------------------------

def test_history_mask_averages_similarities():
    b = bank()
    h = np.random.default_rng(13).normal(size=(6, D))
    ids = np.array([[0, 2, -1]])
    from protorec.prototype import similarity
    s = similarity(h[[0, 2]], b).data.mean(0)
    np.testing.assert_array_equal(history_mask(h, ids, b)[0], topk_mask(s, 2))
    np.testing.assert_array_equal(item_mask(h, (0, 2), b), topk_mask(s, 2))
    np.testing.assert_array_equal(entity_mask(h, np.array([4]), b)[0], topk_mask(similarity(h[4], b).data, 2))


def test_encode_user_modes():
    bd = micro_bundle()
    h = np.random.default_rng(14).normal(size=(6, D))
    t, b = tower(identity=False), bank()
    zi_plain, zu_plain = encode_user(0, bd, h, b, None, t, PLAIN, history_cap=4)
    zi_enh, zu_enh = encode_user(0, bd, h, b, None, t, ENHANCED, history_cap=4)
    assert zi_plain.shape == zi_enh.shape == (3, D)
    assert np.max(np.abs(zu_plain.data - zu_enh.data)) > 1e-6
    with pytest.raises(ValueError):
        encode_user(0, bd, h, b, None, t, "other")


def test_plain_single_entity_history_is_that_entity():
    bd = micro_bundle()
    bd.records[SOURCE].append(InteractionRecord(SOURCE, 9, 0, (1,), 1, 99))
    h = np.random.default_rng(15).normal(size=(6, D))
    _, zu = encode_user(9, bd, h, bank(), None, tower(), PLAIN, history_cap=4)
    np.testing.assert_allclose(zu.data, h[2], atol=1e-12)


def test_tower_gradient_on_three_entity_history():
    t, b = tower(identity=False), bank()
    h = parameter(np.random.default_rng(16).normal(size=(3, D)))
    mask = topk_mask(np.random.default_rng(17).random(5), 2)
    w = np.random.default_rng(18).normal(size=D)

    def loss():
        interests = extract_interests(h, np.ones(3, bool), t)
        return (fuse(pe_attention(interests, mask, b, t), t) * w).sum()

    res = gradcheck(loss, [h] + t.parameters() + [b.prototypes], probes=100, rng=np.random.default_rng(19))
    assert res.max_rel_error <= 1e-4
