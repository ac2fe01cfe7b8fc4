import numpy as np
import pytest

from pgdro import numerics


def random_net(layer_sizes, seed, bias_scale=0.5):
    """Glorot weights plus nonzero biases, so no unit sits exactly at a ReLU kink."""
    rng = np.random.default_rng(seed)
    net = numerics.init_network(layer_sizes, rng)
    biases = tuple(rng.normal(scale=bias_scale, size=b.shape) for b in net.biases)
    return numerics.Network(net.weights, biases)


def relative_error(a, b, floor=1e-6):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a)
    b = np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            for name, text in rep.user_properties:
                if name == "acceptance":
                    lines.append((text, "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for text, verdict in sorted(lines, key=lambda t: int(t[0].split()[1].rstrip(":"))):
            head, _, rest = text.partition(": ")
            terminalreporter.write_line(f"{head} {verdict}: {rest}")
