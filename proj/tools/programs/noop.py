#!/usr/bin/env python3
"""Does no classical work: always asks for the smallest circuit. Used to
measure orchestration overhead."""
import sys

READY = '{"ready":true}\n'
CIRCUIT = '{"circuit":"version 1.0; qubits 1; measure_all"}\n'

out = sys.stdout
for line in sys.stdin:
    out.write(READY if line.startswith('{"config"') else CIRCUIT)
    out.flush()
