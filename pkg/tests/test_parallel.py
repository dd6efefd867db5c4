import numpy as np

from usermoe.data import generate_synthetic, load_dataset, write_dataset
from usermoe.finetune import compute_embeddings
from usermoe.model import UserModel
from usermoe.moe import EncoderConfig
from usermoe.parallel import THREADS_ENV, ordered_map, worker_count


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert worker_count() == 3
    monkeypatch.setenv(THREADS_ENV, "junk")
    assert worker_count() >= 1


def test_ordered_map_keeps_order(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "4")
    assert ordered_map(lambda x: x * x, range(50)) == [x * x for x in range(50)]


def test_results_do_not_depend_on_thread_count(monkeypatch, tmp_path):
    ds = generate_synthetic("custom", seed=0, n_instances=40, mean_length=5)
    model = UserModel(ds.schema, EncoderConfig(d_model=8, d_ff=8, experts=2, blocks=1),
                      np.random.default_rng(0))
    paths = []
    for k in range(4):
        p = tmp_path / f"s{k}.jsonl"
        write_dataset(ds.subset(range(10 * k, 10 * k + 10)), p)
        paths.append(str(p))
    results = []
    for threads in ("1", "4"):
        monkeypatch.setenv(THREADS_ENV, threads)
        loaded = load_dataset(paths, ds.schema)
        results.append((compute_embeddings(model, loaded, batch_size=6), [i.user_id for i in loaded]))
    (u1, e1), ids1 = results[0]
    (u4, e4), ids4 = results[1]
    assert ids1 == ids4 and np.array_equal(u1, u4) and np.array_equal(e1, e4)
