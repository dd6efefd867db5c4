import numpy as np
import pytest

from usermoe.data import ChannelSpec, Instance, Schema, TaskSpec, collate
from usermoe.model import UserModel
from usermoe.moe import EncoderConfig


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return out


def rel_err(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def small_schema(shards=1, tasks=2, mcp=True):
    channels = [
        ChannelSpec("cat", "category", 9, 3, is_mcp_task=mcp),
        ChannelSpec("uid", "id", 13, 4, False, shards),
        ChannelSpec("amt", "dense"),
    ]
    return Schema(channels, [TaskSpec(f"t{k}") for k in range(tasks)])


def random_instances(schema, rng, n=4, min_len=3, max_len=7, first_user=0):
    out = []
    for i in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        chans = {}
        for spec in schema.channels:
            if spec.kind == "dense":
                chans[spec.name] = rng.normal(size=length)
            else:
                chans[spec.name] = rng.integers(2, spec.vocab_size, size=length)
        labels = {t.name: float(rng.integers(0, 2)) for t in schema.tasks}
        out.append(Instance(first_user + i, chans, labels, {t.name: 1 for t in schema.tasks}))
    return out


def small_model(schema, seed=0, experts=2, blocks=1, d_model=8, d_ff=12, heads=2, init_std=0.3, **kw):
    cfg = EncoderConfig(d_model=d_model, d_ff=d_ff, heads=heads, blocks=blocks, experts=experts,
                        init_std=init_std, **kw)
    return UserModel(schema, cfg, np.random.default_rng(seed))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def schema():
    return small_schema()


@pytest.fixture
def batch(schema, rng):
    return collate(random_instances(schema, rng), schema)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
