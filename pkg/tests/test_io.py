import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from usermoe import tensor as T
from usermoe.config import RunConfig
from usermoe.data import collate
from usermoe.errors import CheckpointError, ContractError
from usermoe.io import (FORMAT_VERSION, MetricsWriter, load_checkpoint, load_model, read_metrics,
                        recall_at_precision, save_checkpoint, strip_wall_clock)

from conftest import random_instances, small_model, small_schema


@pytest.fixture
def model():
    return small_model(small_schema(shards=2), seed=7, experts=3, blocks=2)


def test_save_load_save_is_byte_identical(model, tmp_path):
    rng = np.random.default_rng(11)
    rng.random(5)
    save_checkpoint(model, tmp_path / "a.json", RunConfig(seed=3), rng, step=12)
    ck = load_checkpoint(tmp_path / "a.json")
    back = ck.build_model()
    save_checkpoint(back, tmp_path / "b.json", ck.run_config, ck.rng(), ck.step)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert ck.rng().random() == rng.random()


def test_round_trip_restores_forward_outputs(model, tmp_path):
    save_checkpoint(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    for (n, a), (_, b) in zip(model.named_parameters(), back.named_parameters()):
        assert np.array_equal(a.data, b.data), n
    batch = collate(random_instances(model.schema, np.random.default_rng(0)), model.schema)
    with T.no_grad():
        x, y = model.forward_tasks(batch), back.forward_tasks(batch)
    assert all(np.array_equal(x[k].data, y[k].data) for k in x)


def test_float32_model_is_stored_as_float64(tmp_path):
    m = small_model(small_schema(), dtype="float32")
    save_checkpoint(m, tmp_path / "f.json")
    doc = json.loads((tmp_path / "f.json").read_text())
    name, entry = next(iter(doc["params"].items()))
    assert np.array_equal(np.float32(entry["values"]), dict(m.named_parameters())[name].data.reshape(-1))


def test_truncated_checkpoint(model, tmp_path):
    save_checkpoint(model, tmp_path / "m.json")
    text = (tmp_path / "m.json").read_text()
    (tmp_path / "t.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="corrupt or truncated"):
        load_checkpoint(tmp_path / "t.json")


def test_version_mismatch(model, tmp_path):
    save_checkpoint(model, tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["format_version"] = FORMAT_VERSION + 1
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="incompatible"):
        load_checkpoint(tmp_path / "v.json")


def test_value_count_mismatch(model, tmp_path):
    save_checkpoint(model, tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    next(iter(doc["params"].values()))["values"].pop()
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.json")


def test_mismatched_architecture_lists_shapes(model, tmp_path):
    save_checkpoint(model, tmp_path / "m.json")
    other = small_model(small_schema(shards=2), d_model=6, experts=3, blocks=2)
    with pytest.raises(CheckpointError) as info:
        other.load_state_dict(load_checkpoint(tmp_path / "m.json").state())
    msg = str(info.value)
    assert "encoder.mfp.proj_w" in msg and "(8" in msg and "(6" in msg


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.json")


def test_metrics_records(tmp_path):
    clock = iter(range(100)).__next__
    with MetricsWriter(tmp_path / "m.jsonl", clock=clock) as w:
        w.emit(0, "train", lambda_=[1.0, 1.0])
        w.emit(5, "validation", task_auc={"t": 0.7})
    recs = read_metrics(tmp_path / "m.jsonl")
    assert [r["step"] for r in recs] == [0, 5]
    assert set(recs[0]) >= {"step", "split", "task_loss", "task_auc", "mcp_accuracy",
                            "expert_utilization", "lambda", "wall_clock"}
    assert strip_wall_clock(recs)[1] == {"step": 5, "split": "validation", "task_loss": {},
                                         "task_auc": {"t": 0.7}, "mcp_accuracy": {},
                                         "expert_utilization": {}, "lambda": []}
    w = MetricsWriter()
    w.emit(3, "train")
    with pytest.raises(ContractError):
        w.emit(2, "train")


def test_recall_perfect_and_infeasible():
    s, y = [0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]
    for p in (1, 50, 85, 100):
        assert recall_at_precision(s, y, p) == (1.0, True)
    assert recall_at_precision([0.9, 0.1], [0, 1], 85) == (0.0, False)
    with pytest.raises(ContractError):
        recall_at_precision([0.1, 0.2], [1, 1], 50)
    with pytest.raises(ContractError):
        recall_at_precision([0.1, 0.2], [0, 1], 0)


def brute_recall(scores, labels, p):
    best, ok = 0.0, False
    n_pos = sum(labels)
    for t in set(scores):
        pred = [s >= t for s in scores]
        tp = sum(1 for q, l in zip(pred, labels) if q and l)
        if Fraction(tp, sum(pred)) >= Fraction(p, 100):
            ok = True
            best = max(best, tp / n_pos)
    return best, ok


def test_recall_six_point_example():
    s = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
    y = [1, 0, 1, 1, 0, 1]
    # precision at each cut: 1, 1/2, 2/3, 3/4, 3/5, 4/6
    assert recall_at_precision(s, y, 85) == (0.25, True)
    assert recall_at_precision(s, y, 70) == (0.75, True)
    assert recall_at_precision(s, y, 50) == (1.0, True)
    for p in range(1, 101):
        assert recall_at_precision(s, y, p) == brute_recall(s, y, p)


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 30).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.sampled_from([0.1, 0.2, 0.3, 0.5, 0.9])),
    arrays(np.int64, n, elements=st.integers(0, 1)))), st.integers(1, 100))
def test_recall_matches_exhaustive_sweep(pair, p):
    scores, labels = pair
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    assert recall_at_precision(scores, labels, p) == brute_recall(scores.tolist(), labels.tolist(), p)
