import ipaddress
import socket
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from railsynth.dataset import generate_toy_dataset

TINY_CONFIG = {
    "data.toy_n": 24,
    "data.size": 16,
    "diffusion.T": 5,
    "diffusion.width": 8,
    "train.base_steps": 5,
    "train.control_steps": 5,
    "train.batch": 4,
    "fid.n": 4,
    "seg.n": 8,
    "seg.val_n": 4,
    "seg.size": 16,
    "seg.epochs": 2,
    "seg.seeds": [0, 1],
}


SUITE_BUDGET_S = 600.0
ACCEPTANCE_LINES = []
_started = time.perf_counter()


def record_criterion(name, ok, detail, echo=True):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    if echo:
        print(line)
    return ok


def _is_loopback(address):
    host = address[0] if isinstance(address, tuple) else address
    try:
        return ipaddress.ip_address(host).is_loopback
    except ValueError:
        return host == "localhost"


@pytest.fixture(autouse=True, scope="session")
def _no_network():
    """Only loopback connections are allowed while the suite runs."""
    real_connect = socket.socket.connect

    def guarded(sock, address):
        if sock.family in (socket.AF_INET, socket.AF_INET6) and not _is_loopback(address):
            raise OSError(f"network access blocked in tests: {address}")
        return real_connect(sock, address)

    socket.socket.connect = guarded
    yield
    socket.socket.connect = real_connect


def pytest_sessionfinish(session, exitstatus):
    # the runtime budget only means something for a run over whole test directories
    if not ACCEPTANCE_LINES or not all(Path(a.split("::")[0]).is_dir() for a in session.config.args):
        return
    elapsed = time.perf_counter() - _started
    ok = elapsed < SUITE_BUDGET_S
    record_criterion("Suite runtime", ok, f"{elapsed:.1f} s for the whole suite (budget {SUITE_BUDGET_S:.0f} s), "
                     "loopback-only sockets, stub captioner, desk extractor", echo=False)
    if not ok and session.exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_pairs():
    return generate_toy_dataset(12, (32, 32), seed=5)


@pytest.fixture
def tiny_config():
    return dict(TINY_CONFIG)


def write_config_file(path, values):
    import json

    path.write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in values.items()))
    return path
