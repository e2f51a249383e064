import io
import json
import sys

import numpy as np
import pytest

from actmark import storage
from actmark.blackbox import BlackboxKeySet, DetectionPolicy, detect
from actmark.errors import ProtocolError
from actmark.nn import init_mlp
from actmark.oracle import (ModelOracle, SubprocessOracle, decode_request, decode_response,
                            encode_request, serve)


def test_request_round_trip_preserves_float32():
    x = np.random.default_rng(0).uniform(size=(3, 5)).astype(np.float32)
    assert np.array_equal(decode_request(encode_request(x)), x)


@pytest.mark.parametrize("line", ['{"inputs": [1, 2]}', "not json", '{"x": []}'])
def test_bad_requests(line):
    with pytest.raises(ProtocolError):
        decode_request(line)


@pytest.mark.parametrize("line,n", [("", 1), ('{"labels": [1]}', 2), ('{"labels": ["a"]}', 1)])
def test_bad_responses(line, n):
    with pytest.raises(ProtocolError):
        decode_response(line, n)


def test_serve_answers_each_line():
    model = init_mlp([4, 3, 2], 0)
    x = np.random.default_rng(1).uniform(size=(5, 4))
    out = io.StringIO()
    assert serve(model, io.StringIO(encode_request(x) + "\n" + encode_request(x[:2])), out) == 2
    first = json.loads(out.getvalue().splitlines()[0])["labels"]
    assert first == model.predict(x.astype(np.float32)).tolist()


def test_subprocess_oracle_matches_local_model(tmp_path):
    model = init_mlp([6, 5, 3], 2)
    path = storage.save_model(model, tmp_path / "m.bin")
    rng = np.random.default_rng(3)
    keys = BlackboxKeySet(rng.uniform(size=(20, 6)), rng.integers(0, 3, 20), 3, 400, 0)
    policy = DetectionPolicy(20, 3, 1e-3, threshold=5)
    cmd = [sys.executable, "-m", "actmark.cli", "serve-oracle", "--model", str(path)]
    with SubprocessOracle(cmd) as remote:
        r1 = detect(remote, keys, policy)
        r2 = detect(remote, keys, policy)
    local = detect(ModelOracle(model), keys, policy)
    assert r1 == r2 == local


def test_dead_subprocess_is_a_protocol_error():
    oracle = SubprocessOracle([sys.executable, "-c", "pass"])
    oracle._proc.wait()
    with pytest.raises(ProtocolError):
        oracle.predict(np.zeros((1, 2)))
    oracle.close()
