"""Modbus/TCP codec and request serving for the read-coils (0x01),
read-holding-registers (0x03) and write-single-coil (0x05) subset.

Frames are an MBAP header followed by a PDU. Multi-byte fields are
big-endian; coil bitfields are packed LSB-first (coil ``i`` is bit ``i % 8``
of byte ``i // 8``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence, Tuple, Union

import numpy as np

READ_COILS = 0x01
READ_HOLDING_REGISTERS = 0x03
WRITE_SINGLE_COIL = 0x05
SUPPORTED_FUNCTIONS = (READ_COILS, READ_HOLDING_REGISTERS, WRITE_SINGLE_COIL)

# exception codes from the public Modbus application protocol
ILLEGAL_FUNCTION = 0x01
ILLEGAL_DATA_ADDRESS = 0x02
ILLEGAL_DATA_VALUE = 0x03

COIL_ON = 0xFF00
COIL_OFF = 0x0000

MAX_READ_COILS = 2000
MAX_READ_REGISTERS = 125

MBAP_SIZE = 7
_MBAP = struct.Struct(">HHHB")


class ModbusError(Exception):
    """Base class for codec errors."""


class EncodingError(ModbusError):
    pass


class IncompleteFrameError(ModbusError):
    pass


class UnsupportedFunctionError(ModbusError):
    def __init__(self, function: int, header: Optional["MbapHeader"] = None):
        super().__init__(f"unsupported function code 0x{function:02x}")
        self.function = function
        self.header = header


class IllegalValueError(ModbusError):
    def __init__(self, function: int, message: str, header: Optional["MbapHeader"] = None):
        super().__init__(message)
        self.function = function
        self.header = header


@dataclass(frozen=True)
class MbapHeader:
    transaction_id: int
    unit_id: int = 1
    length: Optional[int] = None
    protocol_id: int = 0


@dataclass(frozen=True)
class ReadCoilsRequest:
    offset: int
    count: int
    function = READ_COILS


@dataclass(frozen=True)
class ReadCoilsResponse:
    coil_bytes: bytes
    function = READ_COILS

    def coils(self, count: int) -> list:
        return unpack_coils(self.coil_bytes, count)


@dataclass(frozen=True)
class ReadHoldingRegistersRequest:
    offset: int
    count: int
    function = READ_HOLDING_REGISTERS


@dataclass(frozen=True)
class ReadHoldingRegistersResponse:
    register_values: Tuple[int, ...]
    function = READ_HOLDING_REGISTERS

    def __post_init__(self):
        object.__setattr__(self, "register_values", tuple(int(v) for v in self.register_values))


@dataclass(frozen=True)
class WriteSingleCoilRequest:
    offset: int
    value: bool
    function = WRITE_SINGLE_COIL


@dataclass(frozen=True)
class WriteSingleCoilResponse:
    offset: int
    value: bool
    function = WRITE_SINGLE_COIL


@dataclass(frozen=True)
class ExceptionResponse:
    function: int
    code: int


Request = Union[ReadCoilsRequest, ReadHoldingRegistersRequest, WriteSingleCoilRequest]
Response = Union[ReadCoilsResponse, ReadHoldingRegistersResponse, WriteSingleCoilResponse, ExceptionResponse]
Pdu = Union[Request, Response]

REQUEST_TYPES = (ReadCoilsRequest, ReadHoldingRegistersRequest, WriteSingleCoilRequest)


def is_request(pdu: Pdu) -> bool:
    return isinstance(pdu, REQUEST_TYPES)


#
#   Coil bit packing
#

def pack_coils(values: Sequence[bool]) -> bytes:
    out = bytearray((len(values) + 7) // 8)
    for i, v in enumerate(values):
        if v:
            out[i // 8] |= 1 << (i % 8)
    return bytes(out)


def unpack_coils(data: bytes, count: int) -> list:
    if count < 0 or count > 8 * len(data):
        raise ModbusError(f"cannot unpack {count} coils from {len(data)} bytes")
    return [bool((data[i // 8] >> (i % 8)) & 1) for i in range(count)]


#
#   Encoding
#

def encode_pdu(pdu: Pdu) -> bytes:
    if isinstance(pdu, (ReadCoilsRequest, ReadHoldingRegistersRequest)):
        return struct.pack(">BHH", pdu.function, pdu.offset, pdu.count)
    if isinstance(pdu, (WriteSingleCoilRequest, WriteSingleCoilResponse)):
        return struct.pack(">BHH", WRITE_SINGLE_COIL, pdu.offset, COIL_ON if pdu.value else COIL_OFF)
    if isinstance(pdu, ReadCoilsResponse):
        if len(pdu.coil_bytes) > 255:
            raise EncodingError("coil payload exceeds 255 bytes")
        return struct.pack(">BB", READ_COILS, len(pdu.coil_bytes)) + bytes(pdu.coil_bytes)
    if isinstance(pdu, ReadHoldingRegistersResponse):
        values = pdu.register_values
        if len(values) > MAX_READ_REGISTERS:
            raise EncodingError("too many registers in one response")
        if any(not 0 <= v <= 0xFFFF for v in values):
            raise EncodingError("register value outside 16-bit range")
        return struct.pack(f">BB{len(values)}H", READ_HOLDING_REGISTERS, 2 * len(values), *values)
    if isinstance(pdu, ExceptionResponse):
        if not pdu.function & 0x80:
            raise EncodingError("exception function code must have the high bit set")
        return struct.pack(">BB", pdu.function, pdu.code)
    raise EncodingError(f"cannot encode {type(pdu).__name__}")


def encode_frame(header: MbapHeader, pdu: Pdu) -> bytes:
    body = encode_pdu(pdu)
    length = 1 + len(body)
    if header.length is not None and header.length != length:
        raise EncodingError(f"header length {header.length} != {length}")
    if header.protocol_id != 0:
        raise EncodingError("protocol id must be 0")
    for name, value, limit in (("transaction_id", header.transaction_id, 0xFFFF),
                               ("unit_id", header.unit_id, 0xFF)):
        if not 0 <= value <= limit:
            raise EncodingError(f"{name} out of range: {value}")
    return _MBAP.pack(header.transaction_id, 0, length, header.unit_id) + body


#
#   Decoding
#

def frame_length(data: bytes) -> Optional[int]:
    """Total size of the frame at the start of ``data``, or None if the
    MBAP header is not complete yet."""
    if len(data) < MBAP_SIZE:
        return None
    return 6 + struct.unpack_from(">H", data, 4)[0]


def decode_pdu(body: bytes, expect: Optional[Literal["request", "response"]] = None,
               header: Optional[MbapHeader] = None) -> Pdu:
    if not body:
        raise IncompleteFrameError("empty PDU")
    fc = body[0]
    if fc & 0x80:
        if len(body) != 2:
            raise IncompleteFrameError("exception response must be 2 bytes")
        return ExceptionResponse(fc, body[1])
    if fc not in SUPPORTED_FUNCTIONS:
        raise UnsupportedFunctionError(fc, header)

    if fc == WRITE_SINGLE_COIL:
        if len(body) != 5:
            raise IncompleteFrameError("write single coil PDU must be 5 bytes")
        offset, raw = struct.unpack_from(">HH", body, 1)
        if raw not in (COIL_ON, COIL_OFF):
            raise IllegalValueError(fc, f"invalid coil value 0x{raw:04x}", header)
        cls = WriteSingleCoilResponse if expect == "response" else WriteSingleCoilRequest
        return cls(offset, raw == COIL_ON)

    if expect is None:
        # a response's byte count always matches what follows it
        expect = "response" if len(body) >= 2 and body[1] == len(body) - 2 else "request"
    if expect == "request":
        if len(body) != 5:
            raise IncompleteFrameError(f"request PDU for 0x{fc:02x} must be 5 bytes")
        offset, count = struct.unpack_from(">HH", body, 1)
        cls = ReadCoilsRequest if fc == READ_COILS else ReadHoldingRegistersRequest
        return cls(offset, count)

    if len(body) < 2 or body[1] != len(body) - 2:
        raise IncompleteFrameError("byte count does not match payload")
    payload = bytes(body[2:])
    if fc == READ_COILS:
        return ReadCoilsResponse(payload)
    if len(payload) % 2:
        raise IncompleteFrameError("odd register payload length")
    return ReadHoldingRegistersResponse(struct.unpack(f">{len(payload) // 2}H", payload))


def decode_frame(data: bytes, expect: Optional[Literal["request", "response"]] = None
                 ) -> Tuple[MbapHeader, Pdu]:
    """Decode one complete frame. ``expect`` disambiguates request from
    response layouts; when omitted it is inferred from the byte count."""
    data = bytes(data)
    if len(data) < MBAP_SIZE + 1:
        raise IncompleteFrameError(f"frame too short ({len(data)} bytes)")
    txn, proto, length, unit = _MBAP.unpack_from(data)
    if proto != 0:
        raise ModbusError(f"protocol id {proto} is not Modbus")
    if len(data) != 6 + length:
        raise IncompleteFrameError(f"length field says {6 + length} bytes, got {len(data)}")
    header = MbapHeader(txn, unit, length)
    return header, decode_pdu(data[MBAP_SIZE:], expect, header)


#
#   Server side
#

@dataclass
class DataStore:
    """The four Modbus tables, each addressed from offset zero."""
    size: int = 128
    coils: np.ndarray = field(default=None)
    discrete_inputs: np.ndarray = field(default=None)
    holding_registers: np.ndarray = field(default=None)
    input_registers: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.coils is None:
            self.coils = np.zeros(self.size, dtype=bool)
        if self.discrete_inputs is None:
            self.discrete_inputs = np.zeros(self.size, dtype=bool)
        if self.holding_registers is None:
            self.holding_registers = np.zeros(self.size, dtype=np.uint16)
        if self.input_registers is None:
            self.input_registers = np.zeros(self.size, dtype=np.uint16)

    def copy(self) -> "DataStore":
        return DataStore(self.size, self.coils.copy(), self.discrete_inputs.copy(),
                         self.holding_registers.copy(), self.input_registers.copy())


def _in_bounds(table: np.ndarray, offset: int, count: int) -> bool:
    return offset >= 0 and count >= 0 and offset + count <= len(table)


def serve_request(store: DataStore, request: Request) -> Response:
    """Apply ``request`` to ``store``. Never raises for bad addressing."""
    if isinstance(request, ReadCoilsRequest):
        if not 1 <= request.count <= MAX_READ_COILS:
            return ExceptionResponse(0x80 | READ_COILS, ILLEGAL_DATA_VALUE)
        if not _in_bounds(store.coils, request.offset, request.count):
            return ExceptionResponse(0x80 | READ_COILS, ILLEGAL_DATA_ADDRESS)
        bits = store.coils[request.offset:request.offset + request.count]
        return ReadCoilsResponse(pack_coils([bool(b) for b in bits]))
    if isinstance(request, ReadHoldingRegistersRequest):
        if not 1 <= request.count <= MAX_READ_REGISTERS:
            return ExceptionResponse(0x80 | READ_HOLDING_REGISTERS, ILLEGAL_DATA_VALUE)
        if not _in_bounds(store.holding_registers, request.offset, request.count):
            return ExceptionResponse(0x80 | READ_HOLDING_REGISTERS, ILLEGAL_DATA_ADDRESS)
        regs = store.holding_registers[request.offset:request.offset + request.count]
        return ReadHoldingRegistersResponse(tuple(int(r) for r in regs))
    if isinstance(request, WriteSingleCoilRequest):
        if not _in_bounds(store.coils, request.offset, 1):
            return ExceptionResponse(0x80 | WRITE_SINGLE_COIL, ILLEGAL_DATA_ADDRESS)
        store.coils[request.offset] = bool(request.value)
        return WriteSingleCoilResponse(request.offset, bool(request.value))
    function = getattr(request, "function", 0) & 0x7F
    return ExceptionResponse(0x80 | function, ILLEGAL_FUNCTION)


def serve_frame(store: DataStore, data: bytes) -> bytes:
    """Decode a raw request frame, serve it and encode the reply.

    Unsupported function codes yield exception 0x01; malformed coil values
    yield exception 0x03. Truncated frames still raise, since there is no
    transaction to answer.
    """
    try:
        header, request = decode_frame(data, expect="request")
    except UnsupportedFunctionError as exc:
        reply = ExceptionResponse(0x80 | (exc.function & 0x7F), ILLEGAL_FUNCTION)
        return encode_frame(MbapHeader(exc.header.transaction_id, exc.header.unit_id), reply)
    except IllegalValueError as exc:
        reply = ExceptionResponse(0x80 | exc.function, ILLEGAL_DATA_VALUE)
        return encode_frame(MbapHeader(exc.header.transaction_id, exc.header.unit_id), reply)
    if not is_request(request):
        reply = ExceptionResponse(0x80 | (request.function & 0x7F), ILLEGAL_FUNCTION)
    else:
        reply = serve_request(store, request)
    return encode_frame(MbapHeader(header.transaction_id, header.unit_id), reply)


def register_values_for(request: Request, values: Sequence) -> Response:
    """Build the response ``request`` would receive if the addressed
    registers/coils held ``values``."""
    if isinstance(request, ReadHoldingRegistersRequest):
        if len(values) != request.count:
            raise ValueError(f"expected {request.count} values, got {len(values)}")
        return ReadHoldingRegistersResponse(tuple(int(v) for v in values))
    if isinstance(request, ReadCoilsRequest):
        if len(values) != request.count:
            raise ValueError(f"expected {request.count} values, got {len(values)}")
        return ReadCoilsResponse(pack_coils([bool(v) for v in values]))
    if isinstance(request, WriteSingleCoilRequest):
        return WriteSingleCoilResponse(request.offset, request.value)
    raise ValueError(f"not a request: {request!r}")
