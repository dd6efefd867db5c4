"""Multi-channel user behaviour sequences: schema, storage, I/O and synthetic data.

Each instance holds one aligned token sequence per channel.  Category and id
channels carry integer tokens; dense channels carry reals.  Token ``0`` of
every vocabulary is the mask token and ``1`` is padding, so real behaviours
use ids ``2 .. V-1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .errors import ConfigError, LengthMismatchError, ParseError, SchemaError, VocabularyError
from .parallel import ordered_map

MASK_ID = 0
PAD_ID = 1
FIRST_TOKEN = 2

CHANNEL_KINDS = ("category", "id", "dense")
OBJECTIVES = ("binary-classification", "regression")
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    kind: str
    vocab_size: int | None = None
    embed_dim: int | None = None
    is_mcp_task: bool = False
    num_shards: int = 1

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise SchemaError(f"channel {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "dense":
            if self.vocab_size is not None or self.embed_dim is not None:
                raise SchemaError(f"dense channel {self.name!r} cannot have a vocabulary")
            if self.is_mcp_task:
                raise SchemaError(f"dense channel {self.name!r} cannot be an MCP task")
        else:
            if not self.vocab_size or self.vocab_size <= FIRST_TOKEN:
                raise SchemaError(f"channel {self.name!r}: vocab_size must exceed {FIRST_TOKEN}")
            if not self.embed_dim or self.embed_dim <= 0:
                raise SchemaError(f"channel {self.name!r}: embed_dim must be positive")
        if self.num_shards < 1:
            raise SchemaError(f"channel {self.name!r}: num_shards must be >= 1")
        if self.num_shards > 1 and self.kind != "id":
            raise SchemaError(f"channel {self.name!r}: only id channels are sharded")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    objective: str = "binary-classification"
    tower_output_dim: int = 1

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise SchemaError(f"task {self.name!r}: unknown objective {self.objective!r}")
        if self.tower_output_dim != 1:
            raise SchemaError(f"task {self.name!r}: towers have a single output")

    @property
    def is_classification(self):
        return self.objective == "binary-classification"


@dataclass
class Schema:
    channels: list
    tasks: list = field(default_factory=list)

    def __post_init__(self):
        self.channels = [c if isinstance(c, ChannelSpec) else ChannelSpec(**c) for c in self.channels]
        self.tasks = [t if isinstance(t, TaskSpec) else TaskSpec(**t) for t in self.tasks]
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise SchemaError("channel names must be unique")
        tnames = [t.name for t in self.tasks]
        if len(set(tnames)) != len(tnames):
            raise SchemaError("task names must be unique")
        self._by_name = {c.name: c for c in self.channels}

    def channel(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise SchemaError(f"unknown channel {name!r}") from None

    @property
    def channel_names(self):
        return [c.name for c in self.channels]

    @property
    def task_names(self):
        return [t.name for t in self.tasks]

    @property
    def mcp_channels(self):
        return [c for c in self.channels if c.is_mcp_task]

    def to_dict(self):
        return {"channels": [asdict(c) for c in self.channels],
                "tasks": [asdict(t) for t in self.tasks]}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(channels=list(d["channels"]), tasks=list(d.get("tasks", [])))
        except (TypeError, KeyError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from None


@dataclass
class Instance:
    user_id: int
    channels: dict
    labels: dict = field(default_factory=dict)
    indicators: dict = field(default_factory=dict)

    @property
    def length(self):
        for seq in self.channels.values():
            return len(seq)
        return 0


@dataclass
class Dataset:
    schema: Schema
    instances: list
    split: str = "train"

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def subset(self, indices, split=None):
        return Dataset(self.schema, [self.instances[i] for i in indices], split or self.split)


def validate_instance(inst, schema):
    """Check an instance against ``schema``; returns it with normalised dtypes."""
    lengths = {}
    channels = {}
    for name, seq in inst.channels.items():
        spec = schema._by_name.get(name)
        if spec is None:
            raise SchemaError(f"unknown channel {name!r}")
        if spec.kind == "dense":
            arr = np.asarray(seq, dtype=np.float64)
        else:
            arr = np.asarray(seq)
            if arr.size and not np.issubdtype(arr.dtype, np.integer):
                if not np.all(np.equal(np.mod(arr, 1), 0)):
                    raise SchemaError(f"channel {name!r}: tokens must be integers")
            arr = arr.astype(np.int64)
            if arr.size and (arr.min() < 0 or arr.max() >= spec.vocab_size):
                bad = int(arr[(arr < 0) | (arr >= spec.vocab_size)][0])
                raise VocabularyError(name, bad, spec.vocab_size)
        if arr.ndim != 1:
            raise SchemaError(f"channel {name!r}: sequence must be one-dimensional")
        lengths[name] = len(arr)
        channels[name] = arr
    missing = set(schema.channel_names) - set(channels)
    if missing:
        raise SchemaError(f"instance lacks channels {sorted(missing)}")
    if len(set(lengths.values())) > 1:
        items = sorted(lengths.items(), key=lambda kv: kv[1])
        (a, la), (b, lb) = items[0], items[-1]
        raise LengthMismatchError(f"channel {a!r} has length {la} but channel {b!r} has length {lb}")
    tasks = set(schema.task_names)
    for key in list(inst.labels) + list(inst.indicators):
        if key not in tasks:
            raise SchemaError(f"unknown task {key!r}")
    labels = {}
    indicators = {}
    for t in schema.tasks:
        ind = int(inst.indicators.get(t.name, 1 if t.name in inst.labels else 0))
        if ind not in (0, 1):
            raise SchemaError(f"task {t.name!r}: indicator must be 0 or 1")
        if ind and t.name not in inst.labels:
            raise SchemaError(f"task {t.name!r}: indicator set but label missing")
        lab = float(inst.labels.get(t.name, 0.0))
        if ind and t.is_classification and lab not in (0.0, 1.0):
            raise SchemaError(f"task {t.name!r}: classification label must be 0 or 1")
        labels[t.name] = lab
        indicators[t.name] = ind
    return Instance(int(inst.user_id), channels, labels, indicators)


# -- file formats ---------------------------------------------------------

def save_schema(schema, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
        fh.write("\n")


def load_schema(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return Schema.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ParseError(f"schema {path}: {exc.msg}", exc.lineno) from None


def _parse_record(line, lineno, schema):
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, lineno) from None
    if not isinstance(rec, dict):
        raise ParseError("record is not an object", lineno)
    try:
        inst = Instance(
            user_id=int(rec["user_id"]),
            channels=dict(rec["channels"]),
            labels=dict(rec.get("labels", {})),
            indicators=dict(rec.get("indicators", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed record: {exc!r}", lineno) from None
    try:
        return validate_instance(inst, schema)
    except (SchemaError, VocabularyError) as exc:
        exc.args = (f"line {lineno}: {exc.args[0] if exc.args else exc}",)
        raise


def _load_file(path, schema):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                out.append(_parse_record(line, lineno, schema))
    return out


def load_dataset(path, schema, split="train"):
    """Read line-delimited JSON records.

    ``path`` may be a list of shard files; shards are parsed concurrently and
    concatenated in the given order.
    """
    if isinstance(schema, str):
        schema = load_schema(schema)
    paths = [path] if isinstance(path, (str, bytes)) or hasattr(path, "__fspath__") else list(path)
    parts = ordered_map(lambda p: _load_file(p, schema), paths)
    return Dataset(schema, [inst for part in parts for inst in part], split)


def _record(inst, schema):
    chans = {}
    for spec in schema.channels:
        seq = inst.channels[spec.name]
        chans[spec.name] = [float(v) for v in seq] if spec.kind == "dense" else [int(v) for v in seq]
    return {
        "user_id": int(inst.user_id),
        "channels": chans,
        "labels": {t.name: float(inst.labels[t.name]) for t in schema.tasks},
        "indicators": {t.name: int(inst.indicators[t.name]) for t in schema.tasks},
    }


def write_dataset(ds, path):
    with open(path, "w", encoding="utf-8") as fh:
        for inst in ds.instances:
            fh.write(json.dumps(_record(inst, ds.schema), separators=(",", ":")))
            fh.write("\n")


# -- preprocessing --------------------------------------------------------

def fit_dense_stats(ds):
    """Per dense channel (mean, std) over all valid positions of ``ds``."""
    stats = {}
    for spec in ds.schema.channels:
        if spec.kind != "dense":
            continue
        vals = [inst.channels[spec.name] for inst in ds.instances]
        flat = np.concatenate(vals) if vals else np.zeros(0)
        if flat.size == 0:
            stats[spec.name] = (0.0, 1.0)
            continue
        std = float(flat.std())
        stats[spec.name] = (float(flat.mean()), std if std > 0 else 1.0)
    return stats


def normalize_dense(ds, stats):
    """z-score dense channels with statistics fitted on the training split."""
    out = []
    for inst in ds.instances:
        chans = dict(inst.channels)
        for name, (mu, sd) in stats.items():
            chans[name] = (chans[name] - mu) / sd
        out.append(Instance(inst.user_id, chans, inst.labels, inst.indicators))
    return Dataset(ds.schema, out, ds.split)


def split_dataset(ds, ratios, seed):
    """Shuffle with ``seed`` and cut into (train, validation, test).

    Two ratios give an empty test split.  Sizes use rounding on the
    validation/test shares; train takes the remainder.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) not in (2, 3):
        raise ConfigError("split needs 2 or 3 ratios")
    if any(r < 0.0 or r > 1.0 for r in ratios):
        raise ConfigError(f"split ratios must lie in [0, 1], got {ratios}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2])) if len(ratios) == 3 else 0
    n_train = n - n_val - n_test
    if n_train < 0:
        n_test += n_train
        n_train = 0
    cuts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(ds.subset(sorted(c.tolist()), split) for c, split in zip(cuts, SPLITS))


# -- batching -------------------------------------------------------------

@dataclass
class Batch:
    tokens: dict          # name -> [B, N] int64 ids or float64 values
    mask: np.ndarray      # [B, N] True where the position is real
    user_ids: np.ndarray
    labels: np.ndarray    # [B, K]
    indicators: np.ndarray

    @property
    def shape(self):
        return self.mask.shape

    @property
    def lengths(self):
        return self.mask.sum(axis=1)


def collate(instances, schema, max_len=None):
    """Pad (with ``PAD_ID`` / 0.0) or truncate instances to a common length."""
    lengths = [inst.length for inst in instances]
    n = max(lengths) if lengths else 0
    if max_len:
        n = min(n, max_len) if n else max_len
    b = len(instances)
    mask = np.zeros((b, n), dtype=bool)
    for i, ln in enumerate(lengths):
        mask[i, :min(ln, n)] = True
    tokens = {}
    for spec in schema.channels:
        dense = spec.kind == "dense"
        arr = np.zeros((b, n)) if dense else np.full((b, n), PAD_ID, dtype=np.int64)
        for i, inst in enumerate(instances):
            seq = inst.channels[spec.name][:n]
            arr[i, :len(seq)] = seq
        tokens[spec.name] = arr
    names = schema.task_names
    labels = np.array([[inst.labels.get(t, 0.0) for t in names] for inst in instances],
                      dtype=np.float64).reshape(b, len(names))
    indicators = np.array([[inst.indicators.get(t, 0) for t in names] for inst in instances],
                          dtype=np.float64).reshape(b, len(names))
    user_ids = np.array([inst.user_id for inst in instances], dtype=np.int64)
    return Batch(tokens, mask, user_ids, labels, indicators)


def iter_batches(ds, batch_size, rng=None, max_len=None):
    order = np.arange(len(ds)) if rng is None else rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield idx, collate([ds.instances[i] for i in idx], ds.schema, max_len)


# -- synthetic data -------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Shape and planted structure of a generated dataset."""

    n_channels: int = 6
    mean_length: int = 32
    length_jitter: float = 0.0      # lengths uniform in mean*(1 +/- jitter), antithetic pairs
    n_instances: int = 1000
    n_users: int = 0                # 0 -> one user per instance
    category_vocab: tuple = (16, 64)
    id_vocab: int = 1000
    id_shards: int = 4
    category_dim: int = 4
    id_dim: int = 8
    kinds: tuple = ()               # explicit per-channel kinds; default pattern otherwise
    n_mcp: int = 1
    mcp_pattern: str = "copy"       # copy | markov | random
    n_tasks: int = 2
    n_regression_tasks: int = 0
    task_mode: str = "disjoint"     # disjoint | overlapping | conflict
    indicator_rate: float = 1.0
    label_noise: float = 0.5
    conflict_strength: float = 1.0
    task_strengths: tuple = ()      # per-task scale of the informative score


PRESETS = {
    "siupd-like": dict(n_channels=11, mean_length=150, length_jitter=0.2, n_tasks=2,
                       n_instances=10_000),
    "paytool-like": dict(n_channels=12, mean_length=128, n_tasks=5, n_instances=10_000),
    "mcp-like": dict(n_channels=103, mean_length=128, n_tasks=1, n_mcp=4, n_instances=1_000),
    "fortune-like": dict(n_channels=786, mean_length=128, n_tasks=2, n_mcp=4, n_instances=100),
    "custom": {},
}


def preset_config(preset, **overrides):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = SyntheticConfig(**PRESETS[preset])
    try:
        return replace(cfg, **overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _default_kinds(m):
    kinds = []
    for i in range(m):
        if i % 8 == 0 and m > 2:
            kinds.append("id")
        elif i % 4 == 3:
            kinds.append("dense")
        else:
            kinds.append("category")
    return kinds


def _lengths(cfg, rng):
    n, mu = cfg.n_instances, cfg.mean_length
    if cfg.length_jitter <= 0:
        return np.full(n, mu, dtype=np.int64)
    span = int(round(mu * cfg.length_jitter))
    half = rng.integers(-span, span + 1, size=(n + 1) // 2)
    offsets = np.empty(n, dtype=np.int64)
    offsets[0::2] = half[: len(offsets[0::2])]
    offsets[1::2] = -half[: len(offsets[1::2])]
    return np.maximum(1, mu + offsets)


def _zipf_tokens(rng, vocab, shape):
    ranks = np.arange(1, vocab - FIRST_TOKEN + 1, dtype=np.float64)
    cdf = np.cumsum(1.0 / ranks)
    cdf /= cdf[-1]
    return FIRST_TOKEN + np.searchsorted(cdf, rng.random(shape), side="right").clip(0, vocab - 3)


def generate_synthetic(config="custom", seed=0, **overrides):
    """Generate a deterministic dataset from a preset name or a :class:`SyntheticConfig`.

    Planted structure: each MCP channel is a deterministic function of
    another channel (``copy``: a fixed permutation of a source channel's token
    at the same position; ``markov``: a permutation of its own previous
    token).  Task labels are thresholded linear scores of per-sequence
    features; ``conflict`` mode makes tasks 0 and 1 depend on one shared
    feature with opposite signs.
    """
    cfg = preset_config(config, **overrides) if isinstance(config, str) else replace(config, **overrides)
    if cfg.mcp_pattern not in ("copy", "markov", "random"):
        raise ConfigError(f"unknown mcp_pattern {cfg.mcp_pattern!r}")
    if cfg.task_mode not in ("disjoint", "overlapping", "conflict"):
        raise ConfigError(f"unknown task_mode {cfg.task_mode!r}")
    if cfg.task_mode == "conflict" and cfg.n_tasks < 2:
        raise ConfigError("conflict mode needs at least two tasks")
    rng = np.random.default_rng(seed)
    m, n = cfg.n_channels, cfg.n_instances
    kinds = list(cfg.kinds) if cfg.kinds else _default_kinds(m)
    if len(kinds) != m:
        raise ConfigError("kinds must list one kind per channel")

    # channel specs; MCP channels pair with the preceding category channel
    cat_idx = [i for i, k in enumerate(kinds) if k == "category"]
    mcp_source = {}
    if cfg.mcp_pattern == "copy":
        for j in range(min(cfg.n_mcp, len(cat_idx) // 2)):
            mcp_source[cat_idx[2 * j + 1]] = cat_idx[2 * j]
    else:
        for j in range(min(cfg.n_mcp, len(cat_idx))):
            mcp_source[cat_idx[j]] = None
    lo, hi = cfg.category_vocab
    vocabs = {}
    specs = []
    width = max(2, len(str(m - 1)))
    for i, kind in enumerate(kinds):
        name = f"{kind[:3]}{i:0{width}d}"
        if kind == "dense":
            specs.append(ChannelSpec(name, "dense"))
            continue
        if kind == "id":
            v = cfg.id_vocab
            specs.append(ChannelSpec(name, "id", v, cfg.id_dim, False, cfg.id_shards))
        else:
            src = mcp_source.get(i)
            v = vocabs[src] if src is not None else int(lo + (i * 7919) % max(1, hi - lo))
            specs.append(ChannelSpec(name, "category", v, cfg.category_dim, i in mcp_source))
        vocabs[i] = v

    lengths = _lengths(cfg, rng)
    n_max = int(lengths.max()) if n else 0
    valid = np.arange(n_max)[None, :] < lengths[:, None]
    arrays = {}
    for i, kind in enumerate(kinds):
        if kind == "dense":
            offset = rng.normal(size=(n, 1))
            arrays[i] = offset + 0.5 * rng.normal(size=(n, n_max))
        elif i in mcp_source:
            v = vocabs[i]
            perm = FIRST_TOKEN + rng.permutation(v - FIRST_TOKEN)
            if cfg.mcp_pattern == "copy":
                arrays[i] = perm[arrays[mcp_source[i]] - FIRST_TOKEN]
            elif cfg.mcp_pattern == "markov":
                seq = np.empty((n, n_max), dtype=np.int64)
                seq[:, 0] = rng.integers(FIRST_TOKEN, v, size=n)
                for t in range(1, n_max):
                    seq[:, t] = perm[seq[:, t - 1] - FIRST_TOKEN]
                arrays[i] = seq
            else:
                arrays[i] = rng.integers(FIRST_TOKEN, v, size=(n, n_max))
        elif kind == "id":
            arrays[i] = _zipf_tokens(rng, vocabs[i], (n, n_max))
        else:
            arrays[i] = rng.integers(FIRST_TOKEN, vocabs[i], size=(n, n_max))

    features = _sequence_features(kinds, vocabs, arrays, valid, mcp_source)
    labels, task_specs = _task_labels(cfg, features, rng)
    indicators = (rng.random(labels.shape) < cfg.indicator_rate).astype(np.int64)
    n_users = cfg.n_users or n
    user_ids = np.arange(n) % n_users

    instances = []
    for r in range(n):
        ln = int(lengths[r])
        chans = {}
        for i, spec in enumerate(specs):
            seq = arrays[i][r, :ln]
            chans[spec.name] = seq.astype(np.float64) if spec.kind == "dense" else seq.astype(np.int64)
        instances.append(Instance(
            int(user_ids[r]), chans,
            {t.name: float(labels[r, k]) for k, t in enumerate(task_specs)},
            {t.name: int(indicators[r, k]) for k, t in enumerate(task_specs)},
        ))
    return Dataset(Schema(specs, task_specs), instances, "train")


def _sequence_features(kinds, vocabs, arrays, valid, mcp_source):
    """Standardised per-instance features used to plant task labels."""
    counts = valid.sum(axis=1).clip(min=1)
    cols = []
    for i, kind in enumerate(kinds):
        if i in mcp_source:
            continue
        if kind == "dense":
            f = (arrays[i] * valid).sum(axis=1) / counts
        else:
            v = vocabs[i]
            signal = arrays[i] < FIRST_TOKEN + max(1, (v - FIRST_TOKEN) // 4)
            f = (signal & valid).sum(axis=1) / counts
        sd = f.std()
        cols.append((f - f.mean()) / (sd if sd > 0 else 1.0))
    if not cols:
        return np.zeros((valid.shape[0], 0))
    return np.stack(cols, axis=1)


def _task_labels(cfg, features, rng):
    n, p = features.shape
    k = cfg.n_tasks
    n_reg = min(cfg.n_regression_tasks, k)
    specs = [TaskSpec(f"task{t}", "regression" if t >= k - n_reg else "binary-classification")
             for t in range(k)]
    scores = np.zeros((n, k))
    if p == 0 or k == 0:
        return scores, specs
    if cfg.task_mode == "conflict":
        shared = features[:, 0]
        rest = features[:, 1:] if p > 1 else np.zeros((n, 1))
        groups = np.array_split(np.arange(rest.shape[1]), k)
        for t in range(k):
            own = rest[:, groups[t]].sum(axis=1) / math.sqrt(max(1, len(groups[t])))
            sign = 1.0 if t == 0 else -1.0 if t == 1 else 0.0
            scores[:, t] = sign * cfg.conflict_strength * shared + own
    else:
        if cfg.task_mode == "disjoint":
            groups = np.array_split(np.arange(p), k)
        else:
            size = max(1, math.ceil(2 * p / (k + 1)))
            step = max(1, size // 2)
            groups = [np.arange(t * step, t * step + size) % p for t in range(k)]
        for t in range(k):
            g = groups[t] if len(groups[t]) else np.array([t % p])
            w = rng.choice([-1.0, 1.0], size=len(g))
            scores[:, t] = features[:, g] @ w / math.sqrt(len(g))
    strengths = np.asarray(cfg.task_strengths or [1.0] * k, dtype=np.float64)
    scores = scores * strengths[None, :]
    noisy = scores + cfg.label_noise * rng.normal(size=scores.shape)
    labels = np.empty_like(noisy)
    for t, spec in enumerate(specs):
        labels[:, t] = noisy[:, t] if not spec.is_classification else (noisy[:, t] > 0).astype(np.float64)
    return labels, specs
