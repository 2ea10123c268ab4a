"""The pure-Python kernels must reproduce the compiled ones draw for draw."""

import json
import os
import subprocess
import sys

import pytest


def _run(tmp_path, fixtures, name, no_numba):
    env = dict(os.environ)
    env.pop("MARKEDWALK_NO_NUMBA", None)
    if no_numba:
        env["MARKEDWALK_NO_NUMBA"] = "1"
    out = tmp_path / name
    cmd = [sys.executable, "-m", "markedwalk", "run", "--graph", str(fixtures / "grid4x4_votes.json"),
           "--districts", "2", "--epsilon", "0.125", "--steps", "3000", "--seed", "17", "--chains", "2",
           "--energy", str(fixtures / "energy_competitive.json"), "--record-assignments", "--out", str(out)]
    proc = subprocess.run(cmd, env=env, capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    return out


@pytest.mark.parametrize("value,expected", [("1", "python"), ("", "numba"), ("0", "numba")])
def test_backend_flag(value, expected):
    env = dict(os.environ, MARKEDWALK_NO_NUMBA=value)
    proc = subprocess.run([sys.executable, "-c", "import markedwalk; print(markedwalk.backend())"],
                          env=env, capture_output=True, text=True, timeout=300)
    assert proc.stdout.strip() == expected


def test_fallback_matches_compiled(tmp_path, fixtures):
    fast = _run(tmp_path, fixtures, "numba", False)
    slow = _run(tmp_path, fixtures, "python", True)
    assert json.loads((fast / "manifest.json").read_text())["backend"] == "numba"
    assert json.loads((slow / "manifest.json").read_text())["backend"] == "python"
    for name in ("chain_000.jsonl", "chain_001.jsonl"):
        assert (fast / name).read_text() == (slow / name).read_text()
