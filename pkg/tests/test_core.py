import json

import pytest
from hypothesis import given, settings, strategies as st

from oracles import crc32_bitwise, envelope_bytes
from rimbus.core import (FIXED_HEADER_LEN, ChecksumError, ConfigError, EncodingError, MessageEnvelope,
                         Scope, SizeClass, SystemConfig, TopicKey, checksum, classify_size,
                         decode_envelope, encode_envelope, format_size, load_config, parse_header,
                         parse_size, verify_frame)

topics = st.builds(TopicKey, st.sampled_from(list(Scope)),
                   st.text(st.characters(blacklist_categories=("Zs", "Zl", "Zp", "Cc", "Cs")),
                           min_size=1, max_size=40).filter(lambda s: not any(c.isspace() for c in s)
                                                           and len(s.encode()) <= 256))
envelopes = st.builds(MessageEnvelope, topics, st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1),
                      st.binary(max_size=2048))


def test_crc_check_value():
    assert checksum(b"123456789") == 0xCBF43926
    assert crc32_bitwise(b"123456789") == 0xCBF43926


@given(st.binary(max_size=512))
@settings(max_examples=300)
def test_crc_matches_bitwise_oracle(data):
    assert checksum(data) == crc32_bitwise(data)


@given(envelopes)
@settings(max_examples=10_000, deadline=None)
def test_envelope_round_trip(env):
    assert decode_envelope(encode_envelope(env)) == env


def test_wire_layout_matches_hand_laid_bytes():
    env = MessageEnvelope(TopicKey.vehicle("cam/front"), 7, 123456789, b"hello")
    want = envelope_bytes(1, "cam/front", 7, 123456789, b"hello", crc32_bitwise(b"hello"))
    assert encode_envelope(env) == want
    assert FIXED_HEADER_LEN == 32
    hdr = parse_header(want)
    assert (hdr.seq, hdr.publish_ts, hdr.payload_len, hdr.payload_offset) == (7, 123456789, 5, 41)


def test_bit_flip_in_payload_is_a_checksum_error():
    raw = bytearray(encode_envelope(MessageEnvelope(TopicKey.local("t"), 1, 2, b"abcdef")))
    raw[-1] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_envelope(raw)


@pytest.mark.parametrize("mutate", [
    lambda b: b[:10],                                # truncated header
    lambda b: b"\x00" + b[1:],                       # bad magic
    lambda b: b[:4] + b"\x09" + b[5:],               # bad version
    lambda b: b[:5] + b"\x05" + b[6:],               # bad scope
    lambda b: b + b"x",                              # trailing byte
    lambda b: b[:-1],                                # short payload
])
def test_malformed_frames_rejected(mutate):
    raw = encode_envelope(MessageEnvelope(TopicKey.local("topic"), 1, 2, b"payload"))
    with pytest.raises(EncodingError):
        verify_frame(mutate(raw))


def test_oversize_payload_rejected_both_ways():
    env = MessageEnvelope(TopicKey.local("t"), 0, 0, b"x" * 100)
    with pytest.raises(EncodingError):
        encode_envelope(env, max_payload=99)
    with pytest.raises(EncodingError):
        decode_envelope(encode_envelope(env), max_payload=99)


@pytest.mark.parametrize("name", ["", "has space", "x" * 257])
def test_bad_topic_names(name):
    with pytest.raises(ValueError):
        TopicKey.local(name)


def test_topic_order_and_scope_parse():
    assert TopicKey.local("b") < TopicKey.vehicle("a")
    assert Scope.parse("VehicleArea") is Scope.VEHICLE_AREA
    assert Scope.parse("chip_local") is Scope.CHIP_LOCAL
    with pytest.raises(ConfigError):
        Scope.parse("galaxy")


def test_classify_size_boundary():
    assert classify_size(1023, 1024) is SizeClass.SMALL
    assert classify_size(1024, 1024) is SizeClass.LARGE


@pytest.mark.parametrize("text,n", [("1KB", 1024), ("10KB", 10240), ("100KB", 102400),
                                    ("1MB", 1 << 20), ("6MB", 6291456), ("512", 512), ("2MiB", 2 << 20)])
def test_parse_size(text, n):
    assert parse_size(text) == n
    if n >= 1024:
        assert parse_size(format_size(n)) == n


def test_config_round_trip(tmp_path):
    cfg = SystemConfig(chip_id="B2", loss_rate=0.01, seed=7, shaping_mbps={"Ethernet": 100.0},
                       bridge_routes=[{"topic": "cam", "source": "A1", "dests": ["B1"]}])
    path = tmp_path / "c.json"
    cfg.save(path)
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.routes()[0].dests == ("B1",)
    assert load_config(path, chip="A2").chip_id == "A2"


def test_config_rejects_clashing_ports():
    with pytest.raises(ConfigError):
        SystemConfig(doorbell_base_port=17400)


def test_config_from_env(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"chip_id": "A2", "beacon_interval_ms": 250}))
    monkeypatch.setenv("RIMBUS_CONFIG", str(path))
    cfg = load_config()
    assert (cfg.chip_id, cfg.beacon_interval_s) == ("A2", 0.25)


def test_bad_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


@pytest.mark.parametrize("chip", ["", "x" * 17, "Ä1"])
def test_invalid_chip_ids(chip):
    with pytest.raises(ConfigError):
        SystemConfig(chip_id=chip)
