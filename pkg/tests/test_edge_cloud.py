import io
import itertools
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efficientfi import edge_cloud as ec
from efficientfi import model as mdl
from efficientfi.eval_metrics import evaluate
from efficientfi.quantizer import CorruptMessageError
from efficientfi.tensor_core import InputError

KS = [64, 128, 256, 512, 1024]


# --- bit packing ----------------------------------------------------------

def test_pack_examples():
    assert ec.pack_indices([0, 255, 1], 256) == bytes([0x00, 0xFF, 0x01])
    assert ec.pack_indices([1, 2], 64) == bytes([0x04, 0x20])
    assert ec.pack_indices([], 64) == b""


def test_unpack_examples():
    assert ec.unpack_indices(bytes([0x04, 0x20]), 64, 2).tolist() == [1, 2]
    with pytest.raises(CorruptMessageError):
        ec.unpack_indices(bytes([0x04]), 64, 2)
    with pytest.raises(CorruptMessageError):
        ec.unpack_indices(bytes([0x04, 0x20, 0x00]), 64, 2)


def test_pack_rejects_out_of_range():
    with pytest.raises(InputError):
        ec.pack_indices([64], 64)
    with pytest.raises(InputError):
        ec.pack_indices([-1], 64)


def test_bits_per_index():
    assert [ec.bits_per_index(k) for k in KS] == [6, 7, 8, 9, 10]
    assert ec.bits_per_index(100) == 7


def test_unpack_rejects_index_beyond_K():
    # K=100 uses 7 bits, so 127 is representable but invalid
    with pytest.raises(CorruptMessageError):
        ec.unpack_indices(bytes([0xFE]), 100, 1)


@pytest.mark.parametrize("K", KS)
def test_round_trip_exhaustive_small_M(K):
    values = range(K) if K <= 64 else np.linspace(0, K - 1, 40).astype(int)
    for M in (1, 2, 3):
        for seq in itertools.islice(itertools.product(values, repeat=M), 20000):
            data = ec.pack_indices(seq, K)
            assert len(data) == ec.payload_size(K, M)
            assert ec.unpack_indices(data, K, M).tolist() == list(seq)


@pytest.mark.parametrize("K", KS)
def test_round_trip_random(K):
    rng = np.random.default_rng(K)
    for _ in range(2000):
        M = int(rng.integers(4, 64))
        seq = rng.integers(0, K, M)
        np.testing.assert_array_equal(ec.unpack_indices(ec.pack_indices(seq, K), K, M), seq)


def test_pad_bits_are_zero():
    data = ec.pack_indices([63], 64)
    assert data == bytes([0xFC])


# --- messages -------------------------------------------------------------

def _msg(label=None):
    return ec.QuantizedMessage(256, 256, np.arange(36) * 7 % 256, sample_id=42, label=label)


def test_message_layout():
    raw = _msg().to_bytes()
    assert raw[:4] == b"EFQ1"
    assert ec.HEADER_BYTES == 16
    assert len(raw) == 16 + 36 + 4
    assert len(_msg(label=3).to_bytes()) == 17 + 36 + 4
    assert int.from_bytes(raw[-4:], "little") == zlib.crc32(raw[:-4])


@pytest.mark.parametrize("label", [None, 5])
def test_message_round_trip(label):
    m = _msg(label)
    back = ec.QuantizedMessage.from_bytes(m.to_bytes())
    assert (back.K, back.D, back.M, back.sample_id, back.label) == (256, 256, 36, 42, label)
    np.testing.assert_array_equal(back.indices, m.indices)


@pytest.mark.parametrize("K", KS)
def test_every_tampered_payload_byte_is_rejected(K):
    m = ec.QuantizedMessage(K, 8, np.random.default_rng(K).integers(0, K, 28), 1)
    raw = m.to_bytes()
    for pos in range(ec.HEADER_BYTES, len(raw) - ec.CRC_BYTES):
        for flip in (0x01, 0x80, 0xFF):
            bad = bytearray(raw)
            bad[pos] ^= flip
            with pytest.raises(ec.CRCError):
                ec.QuantizedMessage.from_bytes(bytes(bad))


def test_tampered_header_fields_rejected():
    raw = bytearray(_msg().to_bytes())
    raw[11] ^= 0x01  # sample id
    with pytest.raises(ec.CRCError):
        ec.QuantizedMessage.from_bytes(bytes(raw))
    bad_magic = b"XXXX" + _msg().to_bytes()[4:]
    with pytest.raises(ec.ProtocolError):
        ec.QuantizedMessage.from_bytes(bad_magic)


def test_truncated_and_trailing_bytes():
    raw = _msg().to_bytes()
    with pytest.raises(CorruptMessageError):
        ec.QuantizedMessage.from_bytes(raw[:-1])
    with pytest.raises(CorruptMessageError):
        ec.QuantizedMessage.from_bytes(raw[:10])
    with pytest.raises(ec.ProtocolError):
        ec.QuantizedMessage.from_bytes(raw + b"\x00")


def test_stream_reassembly():
    msgs = [ec.QuantizedMessage(64, 4, np.arange(i + 1) % 64, i, label=i % 2 or None) for i in range(5)]
    stream = io.BytesIO(b"".join(m.to_bytes() for m in msgs))
    got = list(ec.iter_messages(stream))
    assert [g.sample_id for g in got] == list(range(5))
    assert [g.M for g in got] == [1, 2, 3, 4, 5]


def test_stream_cut_mid_message():
    raw = _msg().to_bytes()
    with pytest.raises(CorruptMessageError):
        list(ec.iter_messages(io.BytesIO(raw + raw[:20])))


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(KS), st.lists(st.integers(0, 1023), max_size=50), st.integers(0, 2**32 - 1))
def test_message_bijection_property(K, seq, sid):
    seq = [s % K for s in seq]
    m = ec.QuantizedMessage(K, 256, np.array(seq, dtype=np.int64), sid)
    back = ec.QuantizedMessage.from_bytes(m.to_bytes())
    assert back.indices.tolist() == seq and back.sample_id == sid


# --- compression accounting ----------------------------------------------

@pytest.mark.parametrize("K,expected", [(64, 1781.3), (128, 763.4), (256, 334.0), (512, 148.4), (1024, 66.8)])
def test_gamma_paper_table(K, expected):
    assert ec.gamma_paper(K) == pytest.approx(expected, abs=0.1)


def test_gamma_paper_exact_values():
    assert ec.gamma_paper(64) == 1781.25
    assert ec.gamma_paper(256) == 684000 / 2048


@pytest.mark.parametrize("K", [100, 32, 2048])
def test_gamma_paper_rejects(K):
    with pytest.raises(InputError):
        ec.gamma_paper(K)


def test_gamma_payload_paper_preset():
    rep = ec.gamma_payload(mdl.paper_architecture(K=256))
    assert rep.original_bytes == 684000
    assert rep.payload_bytes == 36
    assert rep.gamma_payload == 19000
    assert rep.gamma_paper == pytest.approx(334.0, abs=0.1)
    assert rep.M == 36


def test_gamma_payload_decreases_with_K():
    cfg = mdl.paper_architecture()
    gammas = [ec.gamma_payload(cfg, K).gamma_payload for K in KS]
    assert all(a > b for a, b in zip(gammas, gammas[1:]))


# --- endpoints and sessions ----------------------------------------------

@pytest.fixture(scope="module")
def desk_model(desk_data):
    train, _ = desk_data
    params = mdl.build_from_config(mdl.desk_architecture(), seed=3)
    mdl.fit_normalization(params, train.x)
    return params


def test_paper_preset_payload_is_36_bytes():
    params = mdl.build_from_config(mdl.paper_architecture(), seed=0)
    x = np.random.default_rng(0).uniform(0, 2, (3, 114, 500)).astype(np.float32)
    msg = ec.encode_frame(x, params.subset(mdl.EDGE))
    assert msg.M == 36 and len(ec.pack_indices(msg.indices, msg.K)) == 36


def test_encode_identical_frames(desk_model, desk_data):
    _, test = desk_data
    edge = desk_model.subset(mdl.EDGE)
    a = ec.encode_frame(test.x[0], edge, 1).to_bytes()
    b = ec.encode_frame(test.x[0], edge, 2).to_bytes()
    assert a[:11] == b[:11] and a[15:-4] == b[15:-4] and a[11:15] != b[11:15]


def test_encode_shape_mismatch(desk_model):
    with pytest.raises(InputError):
        ec.encode_frame(np.zeros((3, 30, 99), np.float32), desk_model.subset(mdl.EDGE))


def test_endpoint_views_enforced(desk_model, desk_data):
    _, test = desk_data
    msg = ec.encode_frame(test.x[0], desk_model.subset(mdl.EDGE))
    with pytest.raises(InputError):
        ec.decode_frame(msg, desk_model.subset(mdl.EDGE))
    with pytest.raises(InputError):
        ec.encode_frame(test.x[0], desk_model.subset(mdl.CLOUD))


def test_decode_rejects_mismatched_model(desk_model, desk_data):
    _, test = desk_data
    msg = ec.encode_frame(test.x[0], desk_model.subset(mdl.EDGE))
    other = mdl.build_from_config(mdl.desk_architecture(K=128), seed=0)
    with pytest.raises(ec.ProtocolError):
        ec.decode_frame(msg, other.subset(mdl.CLOUD))


def test_round_trip_matches_in_process(desk_model, desk_data, tmp_path):
    _, test = desk_data
    log = ec.ReconstructionLog(tmp_path / "recon.log")
    for i in range(3):
        msg = ec.QuantizedMessage.from_bytes(ec.encode_frame(test.x[i], desk_model.subset(mdl.EDGE), i).to_bytes())
        recon, pred, probs = ec.decode_frame(msg, desk_model.subset(mdl.CLOUD), log)
        ref_rec, ref_prob = mdl.predict(test.x[i], desk_model)
        assert recon.tobytes() == ref_rec[0].tobytes()
        assert probs.tobytes() == ref_prob[0].tobytes() and pred == int(ref_prob[0].argmax())
    stored = list(log.read())
    assert [s for s, _ in stored] == [0, 1, 2]
    assert stored[0][1].size == 3 * 30 * 100


@pytest.mark.parametrize("transport", ["memory", "tcp"])
def test_session_equals_offline_evaluation(desk_model, desk_data, transport):
    _, test = desk_data
    sub = test.subset(np.arange(24))
    rep = ec.simulate_session(sub, desk_model, desk_model, transport)
    offline = evaluate(desk_model, sub)
    assert rep.accuracy == offline.accuracy
    assert rep.nmse_db == offline.nmse_db
    per_msg = ec.HEADER_BYTES + 1 + ec.payload_size(256, 28) + ec.CRC_BYTES
    assert rep.bytes_transferred == 24 * per_msg
    assert rep.n_frames == 24


def test_session_throughput(desk_model, desk_data):
    train, _ = desk_data
    rep = ec.simulate_session(train.subset(np.arange(40)), desk_model, desk_model)
    assert rep.frames_per_sec >= 20


def test_session_unknown_transport(desk_model, desk_data):
    with pytest.raises(InputError):
        ec.simulate_session(desk_data[1], desk_model, desk_model, "carrier-pigeon")
