#!/usr/bin/env python3
"""Minimal stdio energy server used as a protocol test fixture.

Serves E(x) = sum of symbols for d, C given on the command line. Optional
flags simulate failure modes: --bad-version, --wrong-id, --nan-energy,
--hang (never answers energy requests).
"""

import json
import sys


def main():
    args = sys.argv[1:]
    d = int(args[0]) if args else 3
    C = int(args[1]) if len(args) > 1 else 2
    bad_version = "--bad-version" in args
    wrong_id = "--wrong-id" in args
    nan_energy = "--nan-energy" in args
    hang = "--hang" in args

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
        except json.JSONDecodeError:
            print(json.dumps({"id": None, "error": "parse"}), flush=True)
            continue
        if req.get("op") == "hello":
            version = 99 if bad_version else 1
            print(json.dumps({"v": version, "d": d, "C": C}), flush=True)
            continue
        if req.get("op") == "energy":
            if hang:
                continue
            energies = [float(sum(s)) for s in req["states"]]
            if nan_energy:
                energies[0] = float("nan")
            rid = (req["id"] + 1) if wrong_id else req["id"]
            print(json.dumps({"id": rid, "energies": energies}), flush=True)
            continue
        print(json.dumps({"id": req.get("id"), "error": "unknown-op"}), flush=True)


if __name__ == "__main__":
    main()
