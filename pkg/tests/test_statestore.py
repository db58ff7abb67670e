import threading
import zlib

import numpy as np
import pytest

from fedsim.statestore import (
    CorruptRecordError,
    StaleWriteError,
    StateStore,
    decode_tensor_map,
    encode_tensor_map,
    tensor_map_data_bytes,
)


def payload(seed=0):
    rng = np.random.default_rng(seed)
    return {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(3)}


class TestCodec:
    def test_bit_exact_roundtrip(self):
        p = payload()
        p["odd"] = np.array([np.pi, -0.0, 1e-300, np.finfo(np.float64).max])
        p["scalarish"] = np.float64(2.5) * np.ones(())
        out, consumed = decode_tensor_map(encode_tensor_map(p))
        assert consumed == len(encode_tensor_map(p))
        assert set(out) == set(p)
        for k in p:
            assert out[k].shape == np.asarray(p[k]).shape
            assert out[k].tobytes() == np.asarray(p[k], dtype="<f8").tobytes()

    def test_data_bytes_counts_elements_only(self):
        p = {"a": np.zeros((2, 5)), "b": np.zeros(7)}
        assert tensor_map_data_bytes(p) == 8 * 17


class TestStateStore:
    def test_missing_client_default(self, tmp_path):
        store = StateStore(tmp_path)
        assert store.load(3) is None
        st = store.load(3, default_factory=lambda: payload())
        assert st.round_written == -1
        assert set(st.payload) == {"w", "b"}

    def test_save_load_roundtrip_bitwise(self, tmp_path):
        store = StateStore(tmp_path)
        p = payload(1)
        store.save(7, 3, p)
        st = store.load(7)
        assert st.client_id == 7 and st.round_written == 3
        for k in p:
            assert st.payload[k].tobytes() == p[k].tobytes()

    def test_latest_wins(self, tmp_path):
        store = StateStore(tmp_path)
        store.save(1, 3, {"v": np.array([3.0])})
        store.save(1, 7, {"v": np.array([7.0])})
        st = store.load(1)
        assert st.round_written == 7
        assert st.payload["v"][0] == 7.0

    def test_stale_write_rejected(self, tmp_path):
        store = StateStore(tmp_path)
        store.save(1, 5, payload())
        with pytest.raises(StaleWriteError):
            store.save(1, 5, payload())
        with pytest.raises(StaleWriteError):
            store.save(1, 4, payload())

    def test_stale_check_survives_reopen(self, tmp_path):
        StateStore(tmp_path).save(2, 9, payload())
        reopened = StateStore(tmp_path)
        with pytest.raises(StaleWriteError):
            reopened.save(2, 9, payload())
        reopened.save(2, 10, payload())

    def test_reopen_reads_committed_saves(self, tmp_path):
        store = StateStore(tmp_path)
        for cid in range(5):
            store.save(cid, 1, payload(cid))
        reopened = StateStore(tmp_path)
        for cid in range(5):
            st = reopened.load(cid)
            assert st.round_written == 1
            for k, v in payload(cid).items():
                assert st.payload[k].tobytes() == v.tobytes()

    def test_corruption_is_surfaced_not_defaulted(self, tmp_path):
        store = StateStore(tmp_path)
        store.save(4, 2, payload())
        path = tmp_path / "client_00000004.state"
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(raw)
        with pytest.raises(CorruptRecordError):
            store.load(4)
        with pytest.raises(CorruptRecordError):
            store.load(4, default_factory=payload)

    def test_bad_magic_rejected(self, tmp_path):
        store = StateStore(tmp_path)
        store.save(4, 2, payload())
        path = tmp_path / "client_00000004.state"
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"XXXX"
        path.write_bytes(raw)
        with pytest.raises(CorruptRecordError):
            StateStore(tmp_path)

    def test_header_crc_matches_payload(self, tmp_path):
        store = StateStore(tmp_path)
        p = payload(3)
        store.save(9, 1, p)
        raw = (tmp_path / "client_00000009.state").read_bytes()
        blob = raw[28:]
        assert int.from_bytes(raw[24:28], "little") == zlib.crc32(blob)
        assert int.from_bytes(raw[16:24], "little") == len(blob)
        assert blob == encode_tensor_map(p)

    def test_counters_and_checkout_tracking(self, tmp_path):
        store = StateStore(tmp_path)
        assert store.stats().bytes_on_disk == 0
        for cid in range(4):
            store.load(cid, default_factory=payload)
        assert store.stats().live_cache_entries == 4
        for cid in range(4):
            store.save(cid, 0, payload(cid))
        s = store.stats()
        assert s.live_cache_entries == 0
        assert s.peak_live_entries == 4
        assert s.saves == 4
        assert s.loads == 0  # defaults are not disk reads
        store.load(0)
        assert store.stats().loads == 1
        assert store.stats().bytes_on_disk == sum(
            p.stat().st_size for p in tmp_path.glob("client_*.state"))

    def test_concurrent_disjoint_clients(self, tmp_path):
        store = StateStore(tmp_path)
        errors = []

        def worker(dev, clients):
            try:
                for r in range(5):
                    for cid in clients:
                        st = store.load(cid, default_factory=lambda: {"v": np.zeros(8)})
                        store.save(cid, r, {"v": st.payload["v"] + dev})
            except Exception as exc:  # noqa: BLE001 - collected for the assert
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(d, range(d * 10, d * 10 + 10)))
                   for d in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert store.stats().peak_live_entries <= 4
        for d in range(4):
            st = store.load(d * 10)
            assert np.all(st.payload["v"] == 5 * d)
