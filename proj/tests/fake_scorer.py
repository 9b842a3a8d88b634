#!/usr/bin/env python3
"""Scripted scorer speaking the wire protocol on stdio, for client tests.

Embeddings are deterministic and deliberately non-unit: item i of a request
maps to a vector with 3.0 at index (len(item) % dim) and 4.0 at the next one.
"""
import argparse
import json
import sys


def vec(item: str, dim: int) -> list:
    v = [0.0] * dim
    v[len(item) % dim] = 3.0
    v[(len(item) + 1) % dim] += 4.0
    return v


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--dim", type=int, default=8)
    ap.add_argument("--mode", default="ok",
                    choices=["ok", "error", "baddim", "badid", "silent", "badhello", "short", "garbage"])
    args = ap.parse_args()
    out = sys.stdout
    if args.mode == "badhello":
        out.write(json.dumps({"proto": 99, "dim": args.dim}) + "\n")
        out.flush()
        return 0
    out.write(json.dumps({"proto": 1, "dim": args.dim}) + "\n")
    out.flush()
    for line in sys.stdin:
        if args.mode == "silent":
            continue
        req = json.loads(line)
        rid, items = req["id"], req["items"]
        if args.mode == "error":
            resp = {"id": rid, "error": "model exploded"}
        elif args.mode == "badid":
            resp = {"id": rid + 1000, "dim": args.dim, "embeddings": [vec(i, args.dim) for i in items]}
        elif args.mode == "baddim":
            resp = {"id": rid, "dim": args.dim + 1, "embeddings": [vec(i, args.dim + 1) for i in items]}
        elif args.mode == "short":
            resp = {"id": rid, "dim": args.dim, "embeddings": [vec(i, args.dim) for i in items[:-1]]}
        elif args.mode == "garbage":
            out.write("this is not json\n")
            out.flush()
            continue
        elif req.get("op") not in ("embed_text", "embed_image"):
            resp = {"id": rid, "error": "unknown op"}
        else:
            resp = {"id": rid, "dim": args.dim, "embeddings": [vec(i, args.dim) for i in items]}
        out.write(json.dumps(resp) + "\n")
        out.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
