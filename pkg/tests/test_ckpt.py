"""Tests for state algebra, the checkpoint file format, and the ledger."""

import json
import struct
import zlib

import numpy as np
import pytest

from unlearnkit.ckpt import (
    BadMagicError,
    CheckpointRecord,
    ChecksumError,
    Ledger,
    LedgerLookupError,
    SchemaError,
    TruncatedError,
    VersionError,
    apply,
    delta,
    ledger_query,
    load,
    save,
)


def rand_state(rng, keys=("a", "b.w"), scale=1.0):
    return {k: (rng.standard_normal((3, 4)) * scale).astype(np.float32) for k in keys}


def max_ulp_gap(got: np.ndarray, want: np.ndarray, other: np.ndarray) -> float:
    """Largest |got - want| measured in ulps at the magnitude of the inputs."""
    tol = np.spacing(np.maximum(np.abs(want), np.abs(other)).astype(want.dtype))
    gaps = np.abs(got.astype(np.float64) - want.astype(np.float64)) / tol
    return float(gaps.max())


class TestDeltaApply:
    def test_delta_self_is_zero(self):
        x = rand_state(np.random.default_rng(0))
        d = delta(x, x)
        assert all(np.array_equal(v, np.zeros_like(v)) for v in d.entries.values())

    def test_scalar_hand_case(self):
        a = {"w": np.array([1.0], dtype=np.float32)}
        b = {"w": np.array([1.5], dtype=np.float32)}
        assert delta(a, b).entries["w"][0] == np.float32(0.5)

    def test_antisymmetry(self):
        rng = np.random.default_rng(1)
        a, b = rand_state(rng), rand_state(rng)
        dab = delta(a, b).entries
        dba = delta(b, a).entries
        assert all(np.array_equal(dab[k], -dba[k]) for k in dab)

    def test_apply_zero_scale(self):
        rng = np.random.default_rng(2)
        theta = rand_state(rng)
        out = apply(theta, delta(theta, rand_state(rng)), 0.0)
        assert all(np.array_equal(out[k], theta[k]) for k in theta)

    def test_apply_scalar_hand_case(self):
        theta = {"w": np.array([2.0], dtype=np.float32)}
        d = delta({"w": np.array([0.0], dtype=np.float32)}, {"w": np.array([0.5], dtype=np.float32)})
        out = apply(theta, d, -2.0)
        assert out["w"][0] == np.float32(1.0)

    def test_cancellation_within_one_ulp(self):
        rng = np.random.default_rng(3)
        theta0 = rand_state(rng, scale=0.02)
        thetaD = {k: v + rng.standard_normal(v.shape).astype(np.float32) * 0.01 for k, v in theta0.items()}
        recovered = apply(thetaD, delta(theta0, thetaD), -1.0)
        for k in theta0:
            assert max_ulp_gap(recovered[k], theta0[k], thetaD[k]) <= 1.0

    def test_cancellation_bit_exact_in_float64_mode(self):
        rng = np.random.default_rng(4)
        theta0 = rand_state(rng, scale=0.02)
        thetaD = {k: v + rng.standard_normal(v.shape).astype(np.float32) * 0.01 for k, v in theta0.items()}
        d = delta(theta0, thetaD, compute_dtype=np.float64)
        recovered = apply(thetaD, d, -1.0, compute_dtype=np.float64)
        assert all(np.array_equal(recovered[k], theta0[k]) for k in theta0)

    def test_additivity_up_to_ulp(self):
        rng = np.random.default_rng(5)
        theta = rand_state(rng)
        d = delta(theta, rand_state(rng))
        two_steps = apply(apply(theta, d, 0.25), d, 0.5)
        one_step = apply(theta, d, 0.75)
        for k in theta:
            assert max_ulp_gap(two_steps[k], one_step[k], theta[k]) <= 1.0

    def test_exact_additivity_for_halves(self):
        theta = {"w": np.array([2.0, -4.0], dtype=np.float32)}
        d = delta({"w": np.zeros(2, dtype=np.float32)}, {"w": np.array([0.5, 1.0], dtype=np.float32)})
        assert np.array_equal(apply(apply(theta, d, 1.0), d, 1.0)["w"], apply(theta, d, 2.0)["w"])

    def test_inputs_not_mutated(self):
        rng = np.random.default_rng(6)
        a, b = rand_state(rng), rand_state(rng)
        a_copy = {k: v.copy() for k, v in a.items()}
        d = delta(a, b)
        apply(a, d, 3.0)
        assert all(np.array_equal(a[k], a_copy[k]) for k in a)

    def test_schema_mismatch_lists_keys(self):
        a = {"x": np.zeros(2, dtype=np.float32)}
        b = {"y": np.zeros(2, dtype=np.float32)}
        with pytest.raises(SchemaError, match="x"):
            delta(a, b)

    def test_non_finite_scale(self):
        a = {"x": np.zeros(2, dtype=np.float32)}
        with pytest.raises(ValueError):
            apply(a, delta(a, a), float("nan"))


class TestCheckpointFile:
    def test_round_trip_byte_identical_resave(self, tmp_path):
        rng = np.random.default_rng(7)
        rec = CheckpointRecord(
            params=rand_state(rng), tokens_seen=123, step=9, run_id="r0", stage_tag="pretrain"
        )
        p1, p2 = tmp_path / "a.msck", tmp_path / "b.msck"
        save(rec, p1)
        loaded = load(p1)
        save(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.metadata() == rec.metadata()
        assert all(np.array_equal(loaded.params[k], rec.params[k]) for k in rec.params)

    def test_every_corrupted_byte_detected(self, tmp_path):
        rec = CheckpointRecord(params={"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
        p = tmp_path / "c.msck"
        save(rec, p)
        blob = bytearray(p.read_bytes())
        rng = np.random.default_rng(8)
        for _ in range(25):
            i = int(rng.integers(0, len(blob)))
            corrupted = bytearray(blob)
            corrupted[i] ^= 0xFF
            p.write_bytes(bytes(corrupted))
            with pytest.raises((ChecksumError, TruncatedError)):
                load(p)
        p.write_bytes(bytes(blob))
        load(p)

    def test_independent_writer_fixture(self, tmp_path):
        # Build the byte stream by hand from the documented layout.
        name = b"w"
        arr = np.array([[1.5, -2.0]], dtype="<f4")
        meta = json.dumps(
            {"created_at": "t", "run_id": "rid", "stage_tag": "s", "step": 3, "tokens_seen": 77},
            sort_keys=True,
            separators=(",", ":"),
        ).encode()
        body = (
            b"MSCK"
            + struct.pack("<I", 1)
            + struct.pack("<I", 1)
            + struct.pack("<H", len(name))
            + name
            + struct.pack("<BB", 0, 2)
            + struct.pack("<QQ", 1, 2)
            + arr.tobytes()
            + struct.pack("<I", len(meta))
            + meta
        )
        blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        p = tmp_path / "hand.msck"
        p.write_bytes(blob)
        rec = load(p)
        assert rec.tokens_seen == 77 and rec.step == 3 and rec.run_id == "rid"
        assert np.array_equal(rec.params["w"], np.array([[1.5, -2.0]], dtype=np.float32))

    def test_bad_magic_and_version(self, tmp_path):
        rec = CheckpointRecord(params={"w": np.zeros(2, dtype=np.float32)})
        p = tmp_path / "m.msck"
        save(rec, p)
        blob = bytearray(p.read_bytes())

        bad = bytearray(blob)
        bad[:4] = b"NOPE"
        bad[-4:] = struct.pack("<I", zlib.crc32(bytes(bad[:-4])) & 0xFFFFFFFF)
        p.write_bytes(bytes(bad))
        with pytest.raises(BadMagicError):
            load(p)

        bad = bytearray(blob)
        bad[4:8] = struct.pack("<I", 99)
        bad[-4:] = struct.pack("<I", zlib.crc32(bytes(bad[:-4])) & 0xFFFFFFFF)
        p.write_bytes(bytes(bad))
        with pytest.raises(VersionError):
            load(p)

    def test_truncation(self, tmp_path):
        rec = CheckpointRecord(params={"w": np.zeros((4, 4), dtype=np.float32)})
        p = tmp_path / "t.msck"
        save(rec, p)
        blob = p.read_bytes()
        cut = blob[:30]
        cut = cut + struct.pack("<I", zlib.crc32(cut) & 0xFFFFFFFF)
        p.write_bytes(cut)
        with pytest.raises(TruncatedError):
            load(p)

    def test_randomized_round_trips(self, tmp_path):
        rng = np.random.default_rng(9)
        p = tmp_path / "r.msck"
        for trial in range(60):
            n_tensors = int(rng.integers(1, 5))
            params = {}
            for j in range(n_tensors):
                rank = int(rng.integers(0, 4))
                shape = tuple(int(rng.integers(1, 5)) for _ in range(rank))
                params[f"t{trial}.{j}"] = rng.standard_normal(shape).astype(np.float32)
            rec = CheckpointRecord(
                params=params,
                tokens_seen=int(rng.integers(0, 10**9)),
                step=int(rng.integers(0, 10**6)),
                run_id=f"run{trial}",
                stage_tag="x",
            )
            save(rec, p)
            got = load(p)
            assert got.metadata() == rec.metadata()
            for k in params:
                assert np.array_equal(got.params[k], params[k])
                assert got.params[k].shape == params[k].shape


class TestLedger:
    def _make(self, tmp_path, tokens):
        led = Ledger.open(tmp_path / "ledger.jsonl")
        for i, t in enumerate(tokens):
            rec = CheckpointRecord(
                params={"w": np.full(2, i, dtype=np.float32)}, tokens_seen=t, step=i, run_id="r", stage_tag="s"
            )
            path = tmp_path / f"ck{i}.msck"
            save(rec, path)
            led.append(rec, path)
        return led

    def test_query_between_entries(self, tmp_path):
        led = self._make(tmp_path, [100, 500, 900])
        assert ledger_query(led, 600).tokens_seen == 500

    def test_query_exact_boundary(self, tmp_path):
        led = self._make(tmp_path, [100, 500, 900])
        assert ledger_query(led, 500).tokens_seen == 500

    def test_query_below_minimum(self, tmp_path):
        led = self._make(tmp_path, [100, 500, 900])
        with pytest.raises(LedgerLookupError):
            ledger_query(led, 50)

    def test_reopen_preserves_entries(self, tmp_path):
        self._make(tmp_path, [10, 20])
        led = Ledger.open(tmp_path / "ledger.jsonl")
        assert [e["tokens_seen"] for e in led.entries] == [10, 20]
