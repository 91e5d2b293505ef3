#!/usr/bin/env python3
"""Uniform-output backend adapter for the rcut line protocol.

Answers every forward request with uniform probabilities and every tokens
request with a constant (S+1) x D token matrix. Useful as a template for
wrapping a real model: replace `forward` and `tokens`.

    rcut explain --backend "proc:python3 adapters/python/stub_adapter.py --image-size 32 --patch 8 --dim 24 --classes 10" ...
"""
import argparse
import json
import struct
import sys


def read_tensor_file(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != b"RCUT":
        raise ValueError("bad magic")
    version, count = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise ValueError(f"unsupported version {version}")
    pos, out = 12, {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode()
        pos += name_len
        dtype, ndim = data[pos], data[pos + 1]
        pos += 2
        if dtype != 0:
            raise ValueError(f"unknown dtype {dtype}")
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = 1
        for d in dims:
            n *= d
        out[name] = (dims, struct.unpack_from(f"<{n}f", data, pos))
        pos += 4 * n
    return out


def write_tensor_file(path, entries):
    buf = bytearray(b"RCUT") + struct.pack("<II", 1, len(entries))
    for name, (dims, values) in entries.items():
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw + bytes([0, len(dims)])
        buf += struct.pack(f"<{len(dims)}I", *dims)
        buf += struct.pack(f"<{len(values)}f", *values)
    with open(path, "wb") as f:
        f.write(buf)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--image-size", type=int, default=32)
    ap.add_argument("--patch", type=int, default=8)
    ap.add_argument("--dim", type=int, default=24)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--token-value", type=float, default=0.5)
    args = ap.parse_args()
    grid = args.image_size // args.patch
    rows = grid * grid + 1

    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        rid = req.get("id", 0)
        try:
            op = req["op"]
            if op == "meta":
                reply = {"id": rid, "image_size": args.image_size, "patch": args.patch,
                         "dim": args.dim, "classes": args.classes, "single_flight": True}
            elif op == "forward":
                dims, _ = read_tensor_file(req["tensor"])["image"]
                if tuple(dims) != (args.image_size, args.image_size, 3):
                    raise ValueError(f"image dims {dims}")
                reply = {"id": rid, "probs": [1.0 / args.classes] * args.classes}
            elif op == "tokens":
                read_tensor_file(req["tensor"])
                out = req["tensor"] + ".tokens.rcut"
                write_tensor_file(out, {"tokens": ((rows, args.dim), [args.token_value] * (rows * args.dim))})
                reply = {"id": rid, "tensor": out}
            else:
                raise ValueError(f"unknown op {op}")
        except Exception as e:  # report every failure as a protocol error
            reply = {"id": rid, "error": str(e)}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
