import filecmp
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import SMALL_SYNTHETIC, micro_bundle, write_tiny_fixture
from protorec.datamodel import (BundleError, InteractionRecord, ItemEntityMap, SyntheticConfig,
                                expand_to_entity_records, generate_synthetic, load_bundle, sample_planted_graph,
                                save_bundle)


def test_tiny_fixture_loads_with_matching_counts(tmp_path):
    b = load_bundle(write_tiny_fixture(tmp_path))
    assert b.graph.num_entities == 3
    assert len(b.item_entities) == 2
    assert sum(len(r) for r in b.records.values()) == 4
    assert b.source_domains == (0,) and b.target_domains == (1,)
    assert b.profiles.schema == {0: 2, 1: 3}


def test_item_with_four_entities_is_rejected(tmp_path):
    root = write_tiny_fixture(tmp_path)
    (root / "features.tsv").write_text(
        "".join(f"{e}\t" + ",".join(["0.5"] * 32) + "\n" for e in range(4)))
    (root / "item_entities.tsv").write_text("0\t0,1,2,3\n1\t2\n")
    with pytest.raises(BundleError, match=r"item_entities.tsv:1: item 0 maps to 4 entities"):
        load_bundle(root)


def test_non_binary_label_is_rejected(tmp_path):
    root = write_tiny_fixture(tmp_path)
    (root / "interactions.tsv").write_text("0\t5\t0\t\t2\t10\n")
    with pytest.raises(BundleError, match=r"interactions.tsv:1: .*label binary"):
        load_bundle(root)


@pytest.mark.parametrize("name, text, message", [
    ("graph.tsv", "0\t0\t7\n", "out of range"),
    ("graph.tsv", "0\t0\t1\n0\t0\t1\n", "duplicate triplet"),
    ("item_entities.tsv", "0\t9\n1\t2\n", "out of range"),
    ("interactions.tsv", "0\t5\t3\t\t1\t10\n", "unmapped item 3"),
])
def test_bad_inputs_get_line_numbered_errors(tmp_path, name, text, message):
    root = write_tiny_fixture(tmp_path)
    (root / name).write_text(text)
    with pytest.raises(BundleError, match=message):
        load_bundle(root)


def test_overlapping_item_spaces_rejected(tmp_path):
    root = write_tiny_fixture(tmp_path)
    (root / "interactions.tsv").write_text("0\t5\t0\t\t1\t10\n1\t5\t0\t\t1\t12\n")
    with pytest.raises(BundleError, match="shared between source and target"):
        load_bundle(root)


def test_timestamp_ties_keep_file_order(tmp_path):
    root = write_tiny_fixture(tmp_path)
    (root / "interactions.tsv").write_text(
        "0\t6\t0\t\t0\t10\n0\t5\t0\t\t1\t10\n0\t7\t0\t\t1\t3\n1\t5\t1\t\t1\t1\n")
    recs = load_bundle(root).records[0]
    assert [r.user for r in recs] == [7, 6, 5]


def test_label_free_load_hides_target_labels_and_behaviors(tmp_path):
    b = generate_synthetic(SMALL_SYNTHETIC, 0)
    save_bundle(b, tmp_path)
    free = load_bundle(tmp_path, target_labels=False)
    t = b.target_domains[0]
    assert all(r.label == 0 and r.behaviors == () for r in free.records[t])
    assert free.records[b.source_domains[0]] == b.records[b.source_domains[0]]


def test_save_load_round_trip_is_value_identical(tmp_path):
    b = generate_synthetic(SMALL_SYNTHETIC, 3)
    save_bundle(b, tmp_path / "a")
    back = load_bundle(tmp_path / "a", schema=b.profiles.schema)
    assert np.array_equal(back.graph.features, b.graph.features)
    assert np.array_equal(back.graph.triplets, b.graph.triplets)
    assert dict(back.item_entities) == dict(b.item_entities)
    assert back.records == b.records
    assert back.profiles == b.profiles
    assert np.array_equal(back.truth, b.truth)
    assert (back.source_domains, back.target_domains) == (b.source_domains, b.target_domains)
    save_bundle(back, tmp_path / "b")
    assert not filecmp.dircmp(tmp_path / "a", tmp_path / "b").diff_files


def test_micro_bundle_round_trip(tmp_path):
    b = micro_bundle()
    save_bundle(b, tmp_path)
    back = load_bundle(tmp_path, schema=b.profiles.schema)
    assert back.records == b.records
    assert np.array_equal(back.graph.features, b.graph.features)


# expansion ---------------------------------------------------------------------

IMAP = ItemEntityMap({0: (4, 5, 6), 1: (7,), 2: (1, 2)})


def rec(item, label=1, user=0):
    return InteractionRecord(0, user, item, (), label, 0)


def test_expansion_three_entities():
    out = expand_to_entity_records([rec(0, 1)], IMAP)
    assert [e.entity for e in out] == [4, 5, 6]
    assert {e.label for e in out} == {1}


def test_expansion_single_entity():
    assert len(expand_to_entity_records([rec(1)], IMAP)) == 1


def test_expansion_two_records_five_rows_in_stable_order():
    out = expand_to_entity_records([rec(2, 0), rec(0, 1)], IMAP)
    assert [(e.entity, e.label) for e in out] == [(1, 0), (2, 0), (4, 1), (5, 1), (6, 1)]
    assert [e.source_index for e in out] == [0, 0, 1, 1, 1]


def test_expansion_unmapped_item_named():
    with pytest.raises(KeyError, match="unmapped item 9"):
        expand_to_entity_records([rec(9)], IMAP)


@given(st.lists(st.sampled_from([0, 1, 2]), max_size=30))
def test_expansion_length_is_sum_of_entity_counts(items):
    out = expand_to_entity_records([rec(i) for i in items], IMAP)
    assert len(out) == sum(len(IMAP[i]) for i in items)


def test_conflicting_expanded_labels_are_kept():
    imap = ItemEntityMap({0: (1, 2), 1: (2,)})
    out = expand_to_entity_records([rec(0, 1), rec(1, 0)], imap)
    assert [(e.entity, e.label) for e in out if e.entity == 2] == [(2, 1), (2, 0)]


# synthetic generator ---------------------------------------------------------------

def test_generator_counts():
    cfg = SyntheticConfig(num_entities=500, num_topics=10, users_per_topic=5)
    b = generate_synthetic(cfg, 0)
    assert b.graph.num_entities == 500
    assert len(np.unique(b.truth)) == 10
    assert b.graph.features.shape == (500, 32)
    assert all(1 <= len(es) <= 3 for es in b.item_entities.values())
    b.validate()


def test_generator_is_deterministic(tmp_path):
    save_bundle(generate_synthetic(SMALL_SYNTHETIC, 7), tmp_path / "a")
    save_bundle(generate_synthetic(SMALL_SYNTHETIC, 7), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only


def test_generator_rejects_missing_structure():
    with pytest.raises(ValueError, match="no planted structure"):
        generate_synthetic(replace(SMALL_SYNTHETIC, p_in=0.01, p_out=0.01), 0)


def test_intra_topic_edge_fraction_matches_planted_rates():
    # about 10k sampled edges on 1000 entities in 10 topics
    rng = np.random.default_rng(0)
    topics = np.repeat(np.arange(10), 100)
    p_in, p_out = 0.16, 0.0045
    trip = sample_planted_graph(1000, topics, p_in, p_out, 4, rng)
    assert len(trip) > 8000
    intra = np.mean(topics[trip[:, 0]] == topics[trip[:, 2]])
    expected = p_in / (p_in + 9 * p_out)
    assert abs(intra - expected) <= 0.05


def test_items_are_single_topic_and_labels_follow_preference():
    b = generate_synthetic(SyntheticConfig(), 1)
    for item, ents in b.item_entities.items():
        assert len(set(b.truth[list(ents)])) == 1
    t = b.target_domains[0]
    rate = np.mean([r.label for r in b.records[t]])
    assert 0.2 < rate < 0.8


def test_behavior_lists_are_one_fixed_history_per_user_and_domain():
    b = generate_synthetic(SMALL_SYNTHETIC, 2)
    for d, recs in b.records.items():
        items = {r.item for r in recs}
        seen: dict[int, tuple[int, ...]] = {}
        for r in recs:
            assert seen.setdefault(r.user, r.behaviors) == r.behaviors
            assert 1 <= len(r.behaviors) <= SMALL_SYNTHETIC.history_max
            assert len(set(r.behaviors)) == len(r.behaviors)
            assert all(i in b.item_entities for i in r.behaviors)
        # behaviour items come from the same domain's catalog
        hist_items = {i for bs in seen.values() for i in bs}
        other = {r.item for dd, rs in b.records.items() if dd != d for r in rs}
        assert not hist_items & other
        assert items
