import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panalloc import protocol
from panalloc.acceptance import golden_fixtures, random_message
from panalloc.core import Activity, DeviceKind, FunctionType, NetworkKind, load_energy_catalog
from panalloc.errors import FieldOverflow, InvalidEnum, TrailingBytes, Truncated, UnknownType
from panalloc.protocol import (
    AssignmentsMsg, ContextRequestMsg, ContextSensorMsg, DataMsg, FunctionEntry, InitializationMsg, NetworkEntry,
    decode, encode, wire_size,
)

import oracles

u64 = st.integers(0, 2**64 - 1)
u8 = st.integers(0, 255)
f32s = st.floats(width=32, allow_nan=False)
fn_codes = st.sampled_from([int(f) for f in FunctionType])
short = st.binary(max_size=40)

init_msgs = st.builds(
    InitializationMsg, u64, st.sampled_from([int(k) for k in DeviceKind]),
    st.lists(st.builds(NetworkEntry, short, f32s), max_size=4).map(tuple),
    st.lists(st.builds(FunctionEntry, fn_codes, f32s), max_size=8).map(tuple))
sensor_msgs = st.builds(
    ContextSensorMsg, u64, st.integers(0, 100), st.integers(0, 1), st.sampled_from([int(a) for a in Activity]),
    st.sampled_from([protocol.NO_NETWORK] + [int(n) for n in NetworkKind]), short, f32s)
request_msgs = st.builds(ContextRequestMsg, fn_codes, st.binary(max_size=300))
assignment_msgs = st.builds(AssignmentsMsg, st.lists(st.tuples(u8, u8), max_size=10).map(tuple),
                            st.lists(st.tuples(fn_codes, u8), max_size=10).map(tuple))
data_msgs = st.builds(DataMsg, st.lists(st.tuples(fn_codes, st.binary(max_size=300)), max_size=5).map(tuple))
messages = st.one_of(init_msgs, sensor_msgs, request_msgs, assignment_msgs, data_msgs)


def _oracle_bytes(msg):
    if isinstance(msg, InitializationMsg):
        return oracles.init_bytes(msg.device_id, msg.device_type,
                                  [(n.network_id, n.monetary_cost) for n in msg.networks],
                                  [(f.function_type, f.energy) for f in msg.functions])
    if isinstance(msg, ContextSensorMsg):
        return oracles.context_sensor_bytes(msg.device_id, msg.battery_level, msg.charging, msg.moving,
                                            msg.network_kind, msg.net_id, msg.avg_link_speed)
    if isinstance(msg, ContextRequestMsg):
        return oracles.context_request_bytes(msg.request_type, msg.info)
    if isinstance(msg, AssignmentsMsg):
        return oracles.assignments_bytes(msg.rd_pairs, msg.vd_pairs)
    return oracles.data_bytes(msg.entries)


# --- fixed encodings -------------------------------------------------------------


@pytest.mark.parametrize("fixture", golden_fixtures(), ids=lambda f: f["name"])
def test_golden_fixture(fixture):
    msg = protocol.from_dict(fixture["message"])
    assert encode(msg).hex() == fixture["hex"]
    assert decode(bytes.fromhex(fixture["hex"])) == msg
    assert wire_size(msg) == len(fixture["hex"]) // 2


def test_assignments_hand_encoding():
    msg = AssignmentsMsg(((2, 1),), ((3, 1),))
    assert encode(msg) == bytes.fromhex("04 01 02 01 01 03 01")
    assert wire_size(msg) == 7


def test_empty_data_is_one_byte():
    assert encode(DataMsg()) == b"\x05" and wire_size(DataMsg()) == 1


def test_initialization_length_follows_field_widths():
    msg = InitializationMsg(7, 1, (NetworkEntry(b"wifi", 0.5),), (FunctionEntry(1, 2.0), FunctionEntry(3, 4.0)))
    n1 = 4
    assert len(encode(msg)) == 1 + 8 + 1 + 1 + (1 + n1 + 4) + 1 + 2 * (1 + 4)


def test_context_sensor_five_byte_ssid():
    msg = ContextSensorMsg(2, 45, 0, 1, int(NetworkKind.WIFI), b"home1", 100.0)
    assert wire_size(msg) == 23 == len(encode(msg))


def test_encoding_is_big_endian():
    assert encode(InitializationMsg(1, 1))[1:9] == b"\x00" * 7 + b"\x01"


# --- oracle comparison and round-trip ----------------------------------------------


@settings(max_examples=2000)
@given(messages)
def test_encode_matches_struct_oracle(msg):
    raw = encode(msg)
    assert raw == _oracle_bytes(msg)
    assert wire_size(msg) == len(raw)


@settings(max_examples=3000)
@given(messages)
def test_round_trip(msg):
    assert decode(encode(msg)) == msg


def test_round_trip_seeded_bulk():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        msg = random_message(rng)
        raw = encode(msg)
        assert decode(raw) == msg
        assert wire_size(msg) == len(raw)


@settings(max_examples=500)
@given(messages)
def test_no_strict_prefix_decodes(msg):
    raw = encode(msg)
    for cut in range(len(raw)):
        if isinstance(msg, DataMsg):
            # Data is framed by the transport, so cutting at an entry boundary
            # leaves a shorter valid message; anywhere else it must fail
            boundaries = {1 + sum(5 + len(d) for _, d in msg.entries[:k]) for k in range(len(msg.entries))}
            if cut in boundaries:
                assert decode(raw[:cut]) == DataMsg(msg.entries[:sorted(boundaries).index(cut)])
                continue
        with pytest.raises((Truncated, UnknownType)):
            decode(raw[:cut])


@settings(max_examples=300)
@given(messages.filter(lambda m: not isinstance(m, DataMsg)), st.binary(min_size=1, max_size=8))
def test_trailing_bytes_are_rejected(msg, extra):
    with pytest.raises(TrailingBytes):
        decode(encode(msg) + extra)


def test_bytes_after_data_are_parsed_as_entries():
    with pytest.raises(Truncated):
        decode(encode(DataMsg()) + b"\x01")


# --- rejections ---------------------------------------------------------------------


@pytest.mark.parametrize("raw", [b"\xff\x00\x01", b"\x00", b"\x06"])
def test_unknown_type(raw):
    with pytest.raises(UnknownType):
        decode(raw)


def test_empty_input_is_truncated():
    with pytest.raises(Truncated):
        decode(b"")


def test_assignments_cut_mid_pair():
    with pytest.raises(Truncated):
        decode(encode(AssignmentsMsg(((2, 1),), ((3, 1),)))[:-1])


@pytest.mark.parametrize("raw", [
    "04 00 01 63 01",  # function code 0x63
    "01 0000000000000001 09 00 00",  # device type 9
    "02 0000000000000001 32 00 07 00 00 00000000",  # activity 7
    "02 0000000000000001 32 00 00 09 00 00000000",  # network kind 9
])
def test_invalid_enum_values(raw):
    with pytest.raises(InvalidEnum):
        decode(bytes.fromhex(raw.replace(" ", "")))


def test_field_overflow():
    with pytest.raises(FieldOverflow):
        encode(AssignmentsMsg(((256, 1),)))
    with pytest.raises(FieldOverflow):
        encode(AssignmentsMsg(tuple((1, 1) for _ in range(256))))
    with pytest.raises(FieldOverflow):
        encode(ContextSensorMsg(1, 50, 0, 0, 1, b"x" * 256))
    with pytest.raises(FieldOverflow):
        encode(InitializationMsg(2**64, 1))
    with pytest.raises(FieldOverflow):
        encode(InitializationMsg(1, 1, (NetworkEntry(b"n", 1e39),)))


def test_encode_rejects_undeclared_enum():
    with pytest.raises(InvalidEnum):
        encode(ContextRequestMsg(99))


def test_f32_rounding_is_visible():
    back = decode(encode(InitializationMsg(1, 1, (), (FunctionEntry(1, 0.1),))))
    assert back.functions[0].energy == protocol.f32(0.1) != 0.1
    assert math.isclose(back.functions[0].energy, 0.1, rel_tol=1e-7)


def test_json_description_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(200):
        msg = random_message(rng)
        assert protocol.from_dict(json.loads(json.dumps(protocol.to_dict(msg)))) == msg


def test_message_energy_uses_wire_size():
    cat = load_energy_catalog()
    msg = AssignmentsMsg(((2, 1),), ((3, 1),))
    assert protocol.message_energy(cat, DeviceKind.WATCH, msg) == pytest.approx(
        oracles.bt_transfer(oracles.WATCH_BT, 7))
