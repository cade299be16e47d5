"""The byte protocol between edges and the cloud, end to end.

Every payload: magic "CEMA", version byte, type byte, then the message
body with little-endian integers and f32 vectors. Frames add a 4-byte
length prefix.
"""

import numpy as np

from cetta import wire

print("== the five message types")
msgs = [
    wire.ClientHello(edge_id=3, spec_hash=bytes(8)),
    wire.ServerHello(accepted=True, current_version=17),
    wire.SampleBatch(seq=1, samples=((42, np.array([0.5, -1.0], dtype="<f4")),)),
    wire.ParamUpdate(version=17, layers=((0, np.ones(2, dtype="<f4"),
                                          np.zeros(2, dtype="<f4")),)),
    wire.Ack(seq=1),
]
for msg in msgs:
    data = wire.encode(msg)
    assert wire.decode(data) == msg
    print(f"{type(msg).__name__:12s} {len(data):3d} bytes  {data[:24].hex(' ')}")

print("\n== the smallest message, byte by byte")
ack = wire.encode(wire.Ack(seq=0))
print(f"  {ack.hex(' ')}")
print("  'C' 'E' 'M' 'A' ver type <------- seq u64 ------->")

print("\n== framing over a byte stream")


class Pipe:
    def __init__(self):
        self.buf = bytearray()

    def sendall(self, data):
        self.buf.extend(data)

    def recv(self, n):
        out = bytes(self.buf[:n])
        del self.buf[:n]
        return out


pipe = Pipe()
wire.write_frame(pipe, ack)
print(f"  14-byte payload -> {len(pipe.buf)} bytes on the wire (4-byte prefix)")
print(f"  read back: {wire.decode(wire.read_frame(pipe))}")

print("\n== update payload size is exact and tiny")
for widths in [(64, 64), (256, 256, 256)]:
    print(f"  hidden widths {widths}: {wire.param_update_size(widths)} bytes per update")
