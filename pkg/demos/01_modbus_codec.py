"""Modbus/TCP frames by hand: encode a poll, serve it from a data store and
look at the coil bit packing."""

# %%
from cpsbot import modbus
from cpsbot.modbus import DataStore, MbapHeader, ReadCoilsRequest, ReadHoldingRegistersRequest, WriteSingleCoilRequest

frame = modbus.encode_frame(MbapHeader(1, 1), ReadHoldingRegistersRequest(99, 1))
print("read HR 99:", frame.hex(" "))
print("decoded   :", modbus.decode_frame(frame))

# %% An RTU data store answers the request
store = DataStore()
store.holding_registers[99] = 1234
reply = modbus.serve_frame(store, frame)
print("reply     :", reply.hex(" "), "->", modbus.decode_frame(reply, expect="response")[1])

# %% Coils are packed LSB first
coils = [True, True, False, False, False, True, True, False]
print("coils", coils, "pack to", bin(modbus.pack_coils(coils)[0]))

# %% Writes and out-of-range reads
print(modbus.serve_request(store, WriteSingleCoilRequest(5, True)))
print(modbus.serve_request(store, ReadCoilsRequest(5, 1)).coils(1))
print(modbus.serve_request(store, ReadCoilsRequest(len(store.coils), 1)))
