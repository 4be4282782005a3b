import struct

import numpy as np
import pytest

from protorec.store import (HEADER, MAGIC, TIMESTAMP_SLICE, EmbeddingStore, checkpoint_hash, load_checkpoint,
                            load_snapshot, publish_snapshot, save_checkpoint, snapshot_path)


def small_store(seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingStore(np.array([4, 9, 2]), rng.normal(size=(3, 5)), rng.normal(size=(6, 5)))


def test_bytes_round_trip():
    s = small_store()
    s.checkpoint_hash = bytes(range(32))
    back = EmbeddingStore.from_bytes(s.to_bytes())
    assert np.array_equal(back.user_ids, s.user_ids)
    assert np.array_equal(back.user_vectors, s.user_vectors)
    assert np.array_equal(back.entity_vectors, s.entity_vectors)
    assert back.checkpoint_hash == s.checkpoint_hash
    np.testing.assert_array_equal(back.user(9), s.user_vectors[1])


def test_size_matches_layout():
    s = small_store()
    assert len(s.to_bytes()) == HEADER.size + 9 * (1 + 8 + 5 * 8)


def test_timestamp_slice_covers_written_at():
    s = small_store()
    s.written_at = 1234.5
    assert struct.unpack("<d", s.to_bytes()[TIMESTAMP_SLICE]) == (1234.5,)


def test_corrupt_blobs_rejected():
    blob = small_store().to_bytes()
    with pytest.raises(ValueError, match="bad magic"):
        EmbeddingStore.from_bytes(b"X" + blob[1:])
    with pytest.raises(ValueError, match="records"):
        EmbeddingStore.from_bytes(blob[:-49])
    assert blob.startswith(MAGIC)


def test_unknown_user():
    with pytest.raises(KeyError, match="user 77"):
        small_store().user(77)


def test_publish_increments_ids_and_updates_latest(tmp_path):
    p1 = publish_snapshot(small_store(0), tmp_path, clock=lambda: 1.0)
    p2 = publish_snapshot(small_store(1), tmp_path, clock=lambda: 2.0)
    assert p1 == snapshot_path(tmp_path, 1) and p2 == snapshot_path(tmp_path, 2)
    assert (tmp_path / "LATEST").read_text() == "2\n"
    latest = load_snapshot(tmp_path)
    assert latest.snapshot_id == 2 and latest.written_at == 2.0
    assert np.array_equal(load_snapshot(tmp_path, 1).entity_vectors, small_store(0).entity_vectors)


def test_missing_latest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_snapshot(tmp_path)


def test_checkpoint_round_trip_and_hash(tmp_path):
    state = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5), "c": np.zeros(0)}
    digest = save_checkpoint(state, tmp_path / "c", {"dim": 4})
    back, meta = load_checkpoint(tmp_path / "c")
    assert meta == {"dim": "4"}
    for k in state:
        assert np.array_equal(back[k], state[k]) and back[k].shape == state[k].shape
    assert digest == checkpoint_hash(tmp_path / "c")
    assert save_checkpoint(state, tmp_path / "d", {"dim": 4}) == digest
    state["a"][0, 0] = 1e-300
    assert save_checkpoint(state, tmp_path / "e", {"dim": 4}) != digest
