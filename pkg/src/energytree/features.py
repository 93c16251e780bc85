"""Per-node feature vectors built from aggregated multi-GPU runtime metrics.

Runtime metrics are collapsed across GPUs into population mean/std/min/max, so
the vector length does not depend on the number of GPUs. Node-level columns
(kind indicator, work, communication volume, expected synchronization wait)
are appended. The column order below is frozen per ``FEATURE_SCHEMA_VERSION``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Sequence

import numpy as np

from .config import Activation, ModelArch, NormKind, ParallelismConfig, WorkloadConfig
from .errors import DataError
from .tree import (COMM_KINDS, ModelTree, ModuleKind, TreeNode, comm_ring_steps,
                   comm_tensor_bytes, ring_schedule)

FEATURE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class GpuRecord:
    cpu_util: float
    cpu_mem_util: float
    gpu_util: float
    gpu_mem_util: float
    cpu_clock: float        # GHz
    cpu_mem_clock: float    # GHz
    memory_bytes: float
    gpu_clock: float        # GHz
    gpu_mem_clock: float    # GHz
    gpu_energy_counter: float  # Wh, GPU-only reading

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self))


RUNTIME_METRICS = tuple(f.name for f in fields(GpuRecord))
_FRACTIONS = ("cpu_util", "cpu_mem_util", "gpu_util", "gpu_mem_util")
STATS = ("mean", "std", "min", "max")


@dataclass(frozen=True)
class RuntimeSample:
    """Per-GPU metrics of one profiling run plus its synchronization sampling.

    ``sync_wait_wall`` is the mean wall-clock wait per synchronization event,
    ``sync_wait_gpu`` the mean idle GPU-seconds per event and
    ``sync_wait_std`` the spread of the wall-clock waits.
    """
    gpus: tuple[GpuRecord, ...]
    sync_wait_wall: float = 0.0
    sync_wait_gpu: float = 0.0
    sync_wait_std: float = 0.0

    def validate(self) -> list[str]:
        out = []
        if not self.gpus:
            out.append("runtime sample needs at least one GPU record")
        for i, g in enumerate(self.gpus):
            for name in RUNTIME_METRICS:
                v = getattr(g, name)
                if not np.isfinite(v) or v < 0:
                    out.append(f"gpu[{i}].{name} must be finite and >= 0")
                elif name in _FRACTIONS and v > 1:
                    out.append(f"gpu[{i}].{name} must be a fraction in [0, 1]")
        return out

    @property
    def gpu_energy_total(self) -> float:
        return float(sum(g.gpu_energy_counter for g in self.gpus))


def aggregate(sample: RuntimeSample | Sequence[GpuRecord]) -> dict[str, dict[str, float]]:
    """Population mean/std/min/max of every runtime metric across GPUs."""
    gpus = sample.gpus if isinstance(sample, RuntimeSample) else tuple(sample)
    if not gpus:
        raise DataError("cannot aggregate an empty GPU record list")
    arr = np.array([g.as_tuple() for g in gpus], dtype=float)
    stats = _stats(arr)
    return {m: dict(zip(STATS, stats[i])) for i, m in enumerate(RUNTIME_METRICS)}


def _stats(arr: np.ndarray) -> np.ndarray:
    # sorting first makes the reductions independent of GPU order, bit for bit
    arr = np.sort(arr, axis=0)
    # clipping first also pins std to exactly 0 when every GPU reports the same value
    mean = np.clip(arr.mean(axis=0), arr[0], arr[-1])
    std = np.sqrt(((arr - mean) ** 2).mean(axis=0))
    return np.stack([mean, std, arr[0], arr[-1]], axis=1)


# -- FLOPs -------------------------------------------------------------------

def attention_flops_per_token(arch: ModelArch) -> float:
    h = arch.hidden_size
    return 2.0 * (h * h + 2 * h * arch.kv_dim + h * h)


def mlp_flops_per_token(arch: ModelArch) -> float:
    mats = 3 if arch.activation_kind is Activation.GATED else 2
    return 2.0 * mats * arch.hidden_size * arch.ffn_dim


def flops_per_token(arch: ModelArch) -> float:
    """Projection + MLP matmul FLOPs of every block plus the LM head.

    Sequence-dependent attention score/value products are left out.
    """
    block = attention_flops_per_token(arch) + mlp_flops_per_token(arch)
    return arch.num_layers * block + 2.0 * arch.hidden_size * arch.vocab_size


def node_flops_per_token(arch: ModelArch, kind: ModuleKind) -> float:
    h = arch.hidden_size
    if kind is ModuleKind.SELF_ATTENTION:
        return attention_flops_per_token(arch)
    if kind is ModuleKind.MLP:
        return mlp_flops_per_token(arch)
    if kind is ModuleKind.LM_HEAD:
        return 2.0 * h * arch.vocab_size
    if kind is ModuleKind.NORM:
        return (5.0 if arch.norm_kind is NormKind.LAYER_NORM else 4.0) * h
    if kind is ModuleKind.EMBEDDING:
        return 1.0 * h
    return 0.0


def comm_bytes_over_run(arch: ModelArch, work: WorkloadConfig, node: TreeNode,
                        p: int) -> tuple[float, float]:
    """(bytes moved by all GPUs, bytes sent per GPU) by a comm leaf over one run."""
    if node.kind not in COMM_KINDS:
        return 0.0, 0.0
    total = per_gpu = 0.0
    for phase, count in (("prefill", 1), ("decode", work.seq_out)):
        t = comm_tensor_bytes(arch, work, node.site, phase)
        if node.kind is ModuleKind.P2P_TRANSFER:
            total += count * t
            per_gpu += count * t
        else:
            coll = "allreduce" if node.kind is ModuleKind.ALL_REDUCE else "allgather"
            sent = ring_schedule(p, t, coll).bytes_sent_per_gpu
            per_gpu += count * sent
            total += count * sent * p
    return total, per_gpu


# -- aggregated features & vectors ---------------------------------------------

@dataclass(frozen=True)
class AggregatedFeatures:
    arch: ModelArch
    num_gpus: int
    batch_size: int
    seq_in: int
    seq_out: int
    execution_time: float
    runtime: np.ndarray          # shape (len(RUNTIME_METRICS), 4): mean, std, min, max
    sync_wait_wall: float = 0.0
    sync_wait_gpu: float = 0.0
    sync_wait_std: float = 0.0

    @property
    def flops_per_token(self) -> float:
        return flops_per_token(self.arch)

    @property
    def work(self) -> WorkloadConfig:
        return WorkloadConfig(self.batch_size, self.seq_in, self.seq_out)


def aggregate_features(arch: ModelArch, par: ParallelismConfig, work: WorkloadConfig,
                       sample: RuntimeSample, execution_time: float) -> AggregatedFeatures:
    if not sample.gpus:
        raise DataError("runtime sample has no GPU records")
    arr = np.array([g.as_tuple() for g in sample.gpus], dtype=float)
    return AggregatedFeatures(
        arch=arch, num_gpus=par.degree, batch_size=work.batch_size,
        seq_in=work.seq_in, seq_out=work.seq_out, execution_time=execution_time,
        runtime=_stats(arr), sync_wait_wall=sample.sync_wait_wall,
        sync_wait_gpu=sample.sync_wait_gpu, sync_wait_std=sample.sync_wait_std)


_NODE_KINDS = tuple(k for k in ModuleKind if k is not ModuleKind.ROOT)

RUNTIME_FEATURES = tuple(f"{m}_{s}" for m in RUNTIME_METRICS for s in STATS)
EXECUTION_FEATURES = ("batch_size", "seq_in", "seq_out", "flops_per_token_g",
                      "execution_time_s", "time_per_gflop_s", "num_gpus")
WAIT_FEATURES = ("sync_wait_wall_s", "sync_wait_gpu_s", "sync_wait_std_s",
                 "node_wait_wall_s", "node_wait_gpu_s")
STRUCTURE_FEATURES = ("ffn_dim", "num_layers", "hidden_size", "num_heads", "num_kv_heads")
NODE_FEATURES = (tuple(f"is_{k.value}" for k in _NODE_KINDS)
                 + ("node_gflops", "node_gflops_per_gpu", "comm_mbytes",
                    "comm_mbytes_per_gpu", "ring_steps"))

FEATURE_NAMES = (RUNTIME_FEATURES + EXECUTION_FEATURES + WAIT_FEATURES
                 + STRUCTURE_FEATURES + NODE_FEATURES)
N_FEATURES = len(FEATURE_NAMES)


def _index(names) -> np.ndarray:
    return np.array([FEATURE_NAMES.index(n) for n in names], dtype=int)


WAIT_IDX = _index(WAIT_FEATURES)
STRUCTURE_IDX = _index(STRUCTURE_FEATURES)


def _run_part(agg: AggregatedFeatures) -> np.ndarray:
    a = agg.arch
    gflops_run = agg.flops_per_token * agg.batch_size * (agg.seq_in + agg.seq_out) / 1e9
    execution = [agg.batch_size, agg.seq_in, agg.seq_out, agg.flops_per_token / 1e9,
                 agg.execution_time, agg.execution_time / gflops_run, agg.num_gpus]
    waits = [agg.sync_wait_wall, agg.sync_wait_gpu, agg.sync_wait_std]
    structure = [a.ffn_dim, a.num_layers, a.hidden_size, a.num_heads, a.num_kv_heads]
    return np.concatenate([agg.runtime.ravel(), execution, waits, [0.0, 0.0], structure])


def _node_part(node: TreeNode, agg: AggregatedFeatures) -> tuple[np.ndarray, float]:
    """Node columns plus the number of comm leaves in the subtree."""
    arch, work, p = agg.arch, agg.work, agg.num_gpus
    tokens = agg.batch_size * (agg.seq_in + agg.seq_out)
    gflops = total = per_gpu = 0.0
    n_comm = 0
    for leaf in node.leaves():
        gflops += node_flops_per_token(arch, leaf.kind) * tokens / 1e9
        if leaf.kind in COMM_KINDS:
            t, g = comm_bytes_over_run(arch, work, leaf, p)
            total += t
            per_gpu += g
            n_comm += 1
    onehot = [1.0 if node.kind is k else 0.0 for k in _NODE_KINDS]
    cols = onehot + [gflops, gflops / p, total / 1e6, per_gpu / 1e6,
                     float(comm_ring_steps(node, p))]
    return np.array(cols), n_comm


def feature_vector(node: TreeNode, agg: AggregatedFeatures) -> np.ndarray:
    """Fixed-length feature vector of ``node`` under the run described by ``agg``."""
    vec = _run_part(agg)
    node_cols, n_comm = _node_part(node, agg)
    events = n_comm * (1 + agg.seq_out)
    vec[FEATURE_NAMES.index("node_wait_wall_s")] = agg.sync_wait_wall * events
    vec[FEATURE_NAMES.index("node_wait_gpu_s")] = agg.sync_wait_gpu * events
    return np.concatenate([vec, node_cols])


@lru_cache(maxsize=1024)
def node_static(tree: ModelTree, work: WorkloadConfig) -> tuple[np.ndarray, np.ndarray]:
    """Node columns (pre-order rows) and synchronization events per node."""
    agg = AggregatedFeatures(tree.arch, tree.par.degree, work.batch_size, work.seq_in,
                             work.seq_out, 1.0, np.zeros((len(RUNTIME_METRICS), 4)))
    cols, events = [], []
    for node in tree.root.walk():
        c, n_comm = _node_part(node, agg)
        cols.append(c)
        events.append(n_comm * work.forward_steps)
    out = np.array(cols), np.array(events, dtype=float)
    for a in out:
        a.flags.writeable = False
    return out


_I_WALL = FEATURE_NAMES.index("node_wait_wall_s")
_I_GPU = FEATURE_NAMES.index("node_wait_gpu_s")


def feature_tensor(tree: ModelTree, aggs: Sequence[AggregatedFeatures]) -> np.ndarray:
    """Features of every node for several runs of one (arch, par, workload) cell.

    Shape (runs, nodes, N_FEATURES); nodes in ``tree.nodes()`` order.
    """
    if not aggs:
        return np.zeros((0, len(tree.nodes()), N_FEATURES))
    cols, events = node_static(tree, aggs[0].work)
    run = np.stack([_run_part(a) for a in aggs])
    R, N = len(aggs), len(events)
    X = np.empty((R, N, N_FEATURES))
    X[:, :, :run.shape[1]] = run[:, None, :]
    X[:, :, run.shape[1]:] = cols[None, :, :]
    X[:, :, _I_WALL] = run[:, None, FEATURE_NAMES.index("sync_wait_wall_s")] * events
    X[:, :, _I_GPU] = run[:, None, FEATURE_NAMES.index("sync_wait_gpu_s")] * events
    return X


def feature_matrix(tree: ModelTree, agg: AggregatedFeatures) -> np.ndarray:
    """Rows follow ``tree.nodes()`` (pre-order)."""
    return feature_tensor(tree, [agg])[0]


# -- standardization ---------------------------------------------------------

class Standardizer:
    """Per-column z-scoring with population std; constant columns map to 0."""

    def __init__(self, mean, scale, constant=None):
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        if constant is None:
            constant = np.zeros(self.mean.shape, dtype=bool)
        self.constant = np.asarray(constant, dtype=bool)

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] < 2:
            raise DataError("standardizer needs at least 2 training vectors")
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        # constant up to rounding noise
        const = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        return cls(mean, np.where(const, 1.0, std), const)

    def transform(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=float) - self.mean) / self.scale
        Z[..., self.constant] = 0.0
        return Z

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(d["mean"], d["scale"], d["constant"])


def fit_standardizer(vectors) -> Standardizer:
    return Standardizer.fit(vectors)
