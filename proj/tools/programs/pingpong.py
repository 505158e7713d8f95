#!/usr/bin/env python3
"""Ping-pong hybrid program: asks for the same two-qubit circuit until it has
seen the requested number of histograms, then reports how many it saw."""
import argparse
import json
import sys

CIRCUIT = "version 1.0; qubits 2; H q[0]; measure_all"


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--iterations", type=int, default=10)
    opts = parser.parse_args()

    seen = 0
    for line in sys.stdin:
        msg = json.loads(line)
        if "config" in msg:
            reply = {"ready": True}
        else:
            if msg.get("measurements") is not None:
                seen += 1
                print(f"measurements: {msg['measurements']['counts']}", file=sys.stderr)
            if seen >= opts.iterations:
                reply = {"done": True, "final_payload": {"iterations": seen}}
            else:
                reply = {"circuit": CIRCUIT}
        sys.stdout.write(json.dumps(reply, separators=(",", ":")) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
