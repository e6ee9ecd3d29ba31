import struct

import pytest
from hypothesis import given, settings, strategies as st

from cpsbot import modbus
from cpsbot.modbus import (
    DataStore, ExceptionResponse, IncompleteFrameError, MbapHeader, ReadCoilsRequest,
    ReadCoilsResponse, ReadHoldingRegistersRequest, ReadHoldingRegistersResponse,
    UnsupportedFunctionError, WriteSingleCoilRequest, WriteSingleCoilResponse, decode_frame,
    encode_frame, pack_coils, serve_frame, serve_request, unpack_coils,
)

umodbus = pytest.importorskip("umodbus")
from umodbus import functions as ufn  # noqa: E402
from umodbus.client import tcp as utcp  # noqa: E402
from umodbus.exceptions import IllegalDataAddressError, IllegalFunctionError  # noqa: E402
from umodbus.server import pack_exception_pdu  # noqa: E402


def with_txn(adu: bytes, txn: int) -> bytes:
    # umodbus picks a random transaction id
    return struct.pack(">H", txn) + adu[2:]


def umodbus_adu(pdu: bytes, txn: int, unit: int) -> bytes:
    return struct.pack(">HHHB", txn, 0, len(pdu) + 1, unit) + pdu


# frozen from umodbus.client.tcp.read_holding_registers(1, 99, 1) with txn forced to 1
EXAMPLE_FRAME = bytes.fromhex("000100000006010300630001")


def test_encode_worked_example():
    frame = encode_frame(MbapHeader(1, 1), ReadHoldingRegistersRequest(99, 1))
    assert frame == EXAMPLE_FRAME
    assert frame == with_txn(utcp.read_holding_registers(1, 99, 1), 1)


def test_decode_worked_example():
    header, pdu = decode_frame(EXAMPLE_FRAME)
    assert header == MbapHeader(1, 1, 6)
    assert pdu == ReadHoldingRegistersRequest(99, 1)


def test_exception_sets_high_bit():
    frame = encode_frame(MbapHeader(7), ExceptionResponse(0x83, 0x02))
    assert frame[7] == 0x83
    assert decode_frame(frame)[1] == ExceptionResponse(0x83, 0x02)


def test_decode_errors():
    with pytest.raises(IncompleteFrameError):
        decode_frame(b"")
    with pytest.raises(IncompleteFrameError):
        decode_frame(EXAMPLE_FRAME[:-1])
    frame = struct.pack(">HHHB", 1, 0, 6, 1) + bytes([0x10, 0, 1, 0, 2])
    with pytest.raises(UnsupportedFunctionError):
        decode_frame(frame)


def test_encode_rejects_inconsistent_length():
    with pytest.raises(modbus.EncodingError):
        encode_frame(MbapHeader(1, 1, length=9), ReadHoldingRegistersRequest(99, 1))


@pytest.mark.parametrize("coils, byte", [
    ([True, True, False, False, False, True, True, False], 0x63),
    ([True], 0x01),
    ([False] * 8, 0x00),
])
def test_pack_coils(coils, byte):
    assert pack_coils(coils) == bytes([byte])


def test_coil_worked_example_bit_order():
    # first byte 01100011: the eighth (least significant) bit maps to coil 1
    coils = unpack_coils(bytes([0b01100011]), 8)
    assert coils == [True, True, False, False, False, True, True, False]


def test_unpack_partial_byte():
    byte = 0x63
    expected = [bool(byte >> i & 1) for i in range(3)]
    assert unpack_coils(bytes([byte]), 3) == expected == [True, True, False]
    assert unpack_coils(b"\x01", 1) == [True]
    with pytest.raises(modbus.ModbusError):
        unpack_coils(b"\x01", 9)


@given(st.lists(st.booleans(), min_size=1, max_size=64))
def test_pack_unpack_inverse(values):
    assert unpack_coils(pack_coils(values), len(values)) == values


def test_pack_coils_matches_umodbus():
    for n in (1, 5, 8, 9, 16, 23):
        values = [(i * 7) % 3 == 0 for i in range(n)]
        ref = ufn.ReadCoils().create_response_pdu([int(v) for v in values])
        ours = modbus.encode_pdu(ReadCoilsResponse(pack_coils(values)))
        assert ours == ref


def reference_frames():
    """20 hand-picked frames built independently with umodbus."""
    out = []
    for txn, unit, off, cnt in [(1, 1, 0, 1), (2, 1, 99, 1), (3, 2, 100, 3), (65535, 255, 65534, 1),
                                (42, 7, 17, 125)]:
        out.append((MbapHeader(txn, unit), ReadHoldingRegistersRequest(off, cnt),
                    with_txn(utcp.read_holding_registers(unit, off, cnt), txn)))
    for txn, unit, off, cnt in [(5, 1, 0, 8), (6, 1, 3, 19), (7, 3, 1000, 2000), (8, 1, 0, 1)]:
        out.append((MbapHeader(txn, unit), ReadCoilsRequest(off, cnt),
                    with_txn(utcp.read_coils(unit, off, cnt), txn)))
    for txn, unit, off, val in [(9, 1, 5, True), (10, 1, 5, False), (11, 9, 65535, True)]:
        out.append((MbapHeader(txn, unit), WriteSingleCoilRequest(off, val),
                    with_txn(utcp.write_single_coil(unit, off, int(val)), txn)))
    for txn, values in [(12, [1234]), (13, [0, 65535, 7]), (14, list(range(10)))]:
        pdu = ufn.ReadHoldingRegisters().create_response_pdu(values)
        out.append((MbapHeader(txn), ReadHoldingRegistersResponse(tuple(values)), umodbus_adu(pdu, txn, 1)))
    for txn, coils in [(15, [1, 1, 0, 0, 0, 1, 1, 0]), (16, [1, 0, 1])]:
        pdu = ufn.ReadCoils().create_response_pdu(coils)
        out.append((MbapHeader(txn), ReadCoilsResponse(pack_coils([bool(c) for c in coils])),
                    umodbus_adu(pdu, txn, 1)))
    wsc = ufn.WriteSingleCoil()
    wsc.address, wsc.value = 5, 1
    out.append((MbapHeader(17), WriteSingleCoilResponse(5, True), umodbus_adu(wsc.create_response_pdu(), 17, 1)))
    for txn, fc, code in [(18, 0x01, IllegalDataAddressError.error_code),
                          (19, 0x03, IllegalDataAddressError.error_code)]:
        out.append((MbapHeader(txn), ExceptionResponse(0x80 | fc, code),
                    umodbus_adu(pack_exception_pdu(fc, code), txn, 1)))
    return out


def test_reference_cross_check_zero_byte_differences():
    frames = reference_frames()
    assert len(frames) == 20
    for header, pdu, ref in frames:
        assert encode_frame(header, pdu) == ref, pdu
        expect = "request" if modbus.is_request(pdu) else "response"
        got_header, got_pdu = decode_frame(ref, expect=expect)
        assert got_pdu == pdu
        assert got_header.transaction_id == header.transaction_id


def test_serve_reads_and_writes():
    store = DataStore()
    store.holding_registers[99] = 1234
    assert serve_request(store, ReadHoldingRegistersRequest(99, 1)) == ReadHoldingRegistersResponse((1234,))
    assert serve_request(store, WriteSingleCoilRequest(5, True)) == WriteSingleCoilResponse(5, True)
    resp = serve_request(store, ReadCoilsRequest(5, 1))
    assert resp.coils(1) == [True]


def test_serve_out_of_range_matches_reference_code():
    store = DataStore(size=16)
    resp = serve_request(store, ReadCoilsRequest(16, 1))
    assert resp == ExceptionResponse(0x81, IllegalDataAddressError.error_code)
    assert resp.code == 0x02
    assert serve_request(store, ReadHoldingRegistersRequest(10, 10)).code == 0x02
    assert serve_request(store, WriteSingleCoilRequest(100, True)) == ExceptionResponse(0x85, 0x02)


def test_serve_frame_unsupported_function_yields_illegal_function():
    request = struct.pack(">HHHB", 3, 0, 6, 1) + bytes([0x10, 0, 1, 0, 2])
    header, resp = decode_frame(serve_frame(DataStore(), request))
    assert header.transaction_id == 3
    assert resp == ExceptionResponse(0x90, IllegalFunctionError.error_code)


def test_serve_frame_bad_coil_value():
    request = struct.pack(">HHHB", 4, 0, 6, 1) + bytes([0x05, 0, 1, 0x12, 0x34])
    assert decode_frame(serve_frame(DataStore(), request))[1] == ExceptionResponse(0x85, 0x03)


#
#   Property tests
#

u16 = st.integers(0, 0xFFFF)
headers = st.builds(MbapHeader, u16, st.integers(0, 255))
pdus = st.one_of(
    st.builds(ReadCoilsRequest, u16, u16),
    st.builds(ReadHoldingRegistersRequest, u16, u16),
    st.builds(WriteSingleCoilRequest, u16, st.booleans()),
    st.builds(WriteSingleCoilResponse, u16, st.booleans()),
    st.builds(ReadCoilsResponse, st.binary(min_size=1, max_size=250)),
    st.builds(ReadHoldingRegistersResponse, st.lists(u16, min_size=1, max_size=125).map(tuple)),
    st.builds(ExceptionResponse, st.sampled_from([0x81, 0x83, 0x85, 0x90]), st.integers(1, 11)),
)


def _expect(pdu):
    return "request" if modbus.is_request(pdu) else "response"


@settings(max_examples=10_000, deadline=None)
@given(headers, pdus)
def test_round_trip_randomized(header, pdu):
    frame = encode_frame(header, pdu)
    got_header, got_pdu = decode_frame(frame, expect=_expect(pdu))
    assert got_pdu == pdu
    assert (got_header.transaction_id, got_header.unit_id) == (header.transaction_id, header.unit_id)
    assert got_header.length == len(frame) - 6


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 200), st.integers(0, 300), st.integers(0, 0xFFFF))
def test_serving_is_total_and_echoes(offset, count, txn):
    store = DataStore()
    for req in (ReadCoilsRequest(offset, count), ReadHoldingRegistersRequest(offset, count),
                WriteSingleCoilRequest(offset, bool(count % 2))):
        reply = serve_frame(store, encode_frame(MbapHeader(txn, 1), req))
        header, resp = decode_frame(reply, expect="response")
        assert header.transaction_id == txn
        assert resp.function & 0x7F == req.function
