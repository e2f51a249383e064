"""Prediction oracles: a local model, or a subprocess speaking one JSON line per batch.

Wire format, one line each way, newline-terminated and flushed:

    request:  {"inputs": [[x11, x12, ...], [x21, ...], ...]}
    response: {"labels": [y1, y2, ...]}

Floats are written with ``repr`` precision so float32 inputs survive the trip.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import sys
import threading

import numpy as np

from .errors import ProtocolError


class ModelOracle:
    def __init__(self, model):
        self.model = model

    def predict(self, inputs) -> np.ndarray:
        return self.model.predict(np.asarray(inputs, dtype=np.float32))


def encode_request(inputs) -> str:
    rows = np.asarray(inputs, dtype=np.float32).astype(np.float64).tolist()
    return json.dumps({"inputs": rows}) + "\n"


def decode_request(line: str) -> np.ndarray:
    try:
        msg = json.loads(line)
        x = np.asarray(msg["inputs"], dtype=np.float64)
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed request: {exc}") from None
    if x.ndim != 2:
        raise ProtocolError(f"request inputs must be a 2-d array, got shape {x.shape}")
    return x.astype(np.float32)


def decode_response(line: str, expected: int) -> np.ndarray:
    if not line:
        raise ProtocolError("oracle closed its output")
    try:
        labels = json.loads(line)["labels"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed response {line[:80]!r}: {exc}") from None
    if not isinstance(labels, list) or not all(isinstance(v, int) for v in labels):
        raise ProtocolError("response labels must be a list of integers")
    if len(labels) != expected:
        raise ProtocolError(f"oracle answered {len(labels)} labels for {expected} inputs")
    return np.asarray(labels, dtype=np.int64)


class SubprocessOracle:
    """Talks to a long-running child process; safe to share between threads."""

    def __init__(self, command):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self._proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      text=True, bufsize=1)
        self._lock = threading.Lock()

    def predict(self, inputs) -> np.ndarray:
        n = len(inputs)
        with self._lock:
            if self._proc.poll() is not None:
                raise ProtocolError(f"oracle exited with status {self._proc.returncode}")
            try:
                self._proc.stdin.write(encode_request(inputs))
                self._proc.stdin.flush()
            except BrokenPipeError:
                raise ProtocolError("oracle closed its input") from None
            return decode_response(self._proc.stdout.readline(), n)

    def close(self):
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(model, stdin=None, stdout=None) -> int:
    """Answer requests line by line until EOF; returns the number served."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    served = 0
    for line in stdin:
        if not line.strip():
            continue
        labels = model.predict(decode_request(line))
        stdout.write(json.dumps({"labels": [int(v) for v in labels]}) + "\n")
        stdout.flush()
        served += 1
    return served
