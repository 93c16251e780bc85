"""Parametric multi-GPU energy oracle.

Every leaf of the model tree gets an energy split into four phases:

* ``compute``  -- energy_per_flop * FLOPs of the module over the run
* ``transfer`` -- energy_per_byte * bytes moved on the links
* ``wait``     -- idle_power * idle GPU-seconds (synchronization skew, and the
  pipeline bubble for P2P boundaries)
* ``base``     -- the share of base_system_power * wall_time attributed to the
  module's execution window, the way a wall-socket meter would see it

Interior nodes hold the sum of their children, so the root equals the sum of
all leaf GPU-side energy plus ``base_system_power * wall_time``.

Synchronization skew is log-normal; nothing here is tied to a real GPU.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .config import ModelArch, ParallelismConfig, Strategy, WorkloadConfig, validate
from .errors import DataError, ParseError, ValidationError
from .features import (AggregatedFeatures, GpuRecord, RuntimeSample, aggregate_features,
                       node_flops_per_token)
from .tree import (ModelTree, ModuleKind, TreeNode, cached_tree, comm_tensor_bytes,
                   ring_schedule)

log = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1
WH = 3600.0  # joules per watt-hour


@dataclass(frozen=True)
class SimParams:
    energy_per_flop: float = 6.9e-12     # Wh/FLOP, about 250 W at the default throughput
    energy_per_byte: float = 1.1e-10     # Wh/byte on the link
    idle_power: float = 200.0            # W drawn by a GPU waiting on a peer
    base_system_power: float = 80.0      # W, CPU and rest of system
    link_bandwidth: float = 2.0e8        # bytes/s
    skew_sigma: float = 0.5
    skew_scale: float = 5.0e-4           # s, median wait per synchronization
    noise_rel: float = 0.05
    seed: int = 0
    gpu_flops_per_s: float = 1.0e10
    pp_microbatches: int = 4
    clock_jitter: float = 0.03           # per-run relative spread of GPU clocks
    util_jitter: float = 0.02
    gpu_memory_bytes: float = 64e6

    def validate(self) -> list[str]:
        out = []
        for name in ("energy_per_flop", "energy_per_byte", "idle_power",
                     "base_system_power", "skew_sigma", "skew_scale", "clock_jitter",
                     "util_jitter"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                out.append(f"{name} must be finite and >= 0")
        if not 0 <= self.noise_rel <= 0.5:
            out.append("noise_rel must lie in [0, 0.5]")
        for name in ("link_bandwidth", "gpu_flops_per_s", "gpu_memory_bytes"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be > 0")
        if self.pp_microbatches < 1:
            out.append("pp_microbatches must be >= 1")
        if self.clock_jitter >= 1:
            out.append("clock_jitter must be < 1")
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParseError(f"unknown simulator parameter {sorted(unknown)[0]!r}")
        return cls(**d)


@dataclass(frozen=True)
class NodeEnergy:
    compute: float = 0.0
    transfer: float = 0.0
    wait: float = 0.0
    base: float = 0.0

    @property
    def total(self) -> float:
        return self.compute + self.transfer + self.wait + self.base

    @property
    def gpu_side(self) -> float:
        return self.compute + self.transfer + self.wait

    def as_list(self) -> list[float]:
        return [self.compute, self.transfer, self.wait, self.base]

    def __add__(self, other: "NodeEnergy") -> "NodeEnergy":
        return NodeEnergy(self.compute + other.compute, self.transfer + other.transfer,
                          self.wait + other.wait, self.base + other.base)

    def scaled(self, f: float) -> "NodeEnergy":
        return NodeEnergy(self.compute * f, self.transfer * f, self.wait * f, self.base * f)


@dataclass
class MeasurementRecord:
    arch: ModelArch
    par: ParallelismConfig
    work: WorkloadConfig
    nodes: dict[str, NodeEnergy]     # every node of the tree, pre-order
    wall_time: float
    runtime_sample: RuntimeSample
    cell: int = 0
    run: int = 0

    @property
    def tree(self) -> ModelTree:
        return cached_tree(self.arch, self.par)

    @property
    def model_total_energy(self) -> float:
        return self.nodes["root"].total

    @property
    def gpu_energy_counter(self) -> float:
        return self.runtime_sample.gpu_energy_total

    @property
    def features(self) -> AggregatedFeatures:
        return aggregate_features(self.arch, self.par, self.work, self.runtime_sample,
                                  self.wall_time)

    def comm_energy(self) -> float:
        return sum(self.nodes[node.id].total for node in self.tree.leaves() if node.is_comm)

    def validate(self) -> list[str]:
        out = validate(self.arch, self.par, self.work) + self.runtime_sample.validate()
        ids = [node.id for node in self.tree.root.walk()]
        if list(self.nodes) != ids:
            out.append("node energies do not match the tree of (arch, par)")
        for k, e in self.nodes.items():
            if min(e.as_list()) < 0 or not np.isfinite(e.as_list()).all():
                out.append(f"node {k}: energies must be finite and >= 0")
        if self.gpu_energy_counter > self.model_total_energy * (1 + 1e-12):
            out.append("gpu_energy_counter exceeds model_total_energy")
        return out


# -- synchronization skew --------------------------------------------------------

def sample_skew(p: int, steps: int, params: SimParams, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. log-normal waits (seconds), median ``skew_scale``, shape ``skew_sigma``."""
    if p < 2:
        raise ValueError("synchronization needs at least 2 GPUs")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = rng.standard_normal(steps)
    if params.skew_scale == 0:
        return np.zeros(steps)
    return params.skew_scale * np.exp(params.skew_sigma * z)


# -- one run ------------------------------------------------------------------------

def _stage_of(tree: ModelTree) -> dict[str, int]:
    out = {}
    if tree.par.strategy is Strategy.PIPELINE:
        stages = [child for child in tree.root.children if child.kind is ModuleKind.STAGE]
        for k, st in enumerate(stages):
            for node in st.walk():
                out[node.id] = k
    return out


def _param_bytes(arch: ModelArch) -> tuple[float, float]:
    """(bytes per transformer block, bytes of embedding + head)."""
    h = arch.hidden_size
    mats = 3 if arch.activation_kind.value == "gated" else 2
    block = 2 * h * h + 2 * h * arch.kv_dim + mats * h * arch.ffn_dim + 2 * h
    return block * arch.dtype_bytes, 2 * arch.vocab_size * h * arch.dtype_bytes


def simulate_clean(arch, par, work, params: SimParams, rng: np.random.Generator):
    """Noise-free leaf energies, wall time and per-GPU bookkeeping for one run."""
    tree = cached_tree(arch, par)
    p, s = par.degree, par.degree
    B = work.batch_size
    strategy = par.strategy
    clock = 1.0 + rng.uniform(-params.clock_jitter, params.clock_jitter)
    thr = params.gpu_flops_per_s * clock
    phases = (("prefill", work.seq_in, 1), ("decode", 1, work.seq_out))
    n_inv = work.forward_steps
    stage_of = _stage_of(tree)

    leaves = tree.leaves()
    energy: dict[str, NodeEnergy] = {}
    windows: dict[str, float] = {}
    compute_ids = [node.id for node in leaves if not node.is_comm]

    # compute leaves
    stage_step = np.zeros((s if strategy is Strategy.PIPELINE else 1, 2))
    for node in leaves:
        if node.is_comm:
            continue
        fpt = node_flops_per_token(arch, node.kind)
        flops = fpt * B * work.tokens
        energy[node.id] = NodeEnergy(compute=params.energy_per_flop * flops)
        if strategy is Strategy.PIPELINE:
            windows[node.id] = flops / thr
            for j, (_, tok, _) in enumerate(phases):
                stage_step[stage_of[node.id], j] += fpt * B * tok / thr
        else:
            windows[node.id] = flops / (p * thr)

    if strategy is Strategy.PIPELINE:
        m = min(params.pp_microbatches, B)
        fill = 1.0 + (s - 1) / m
        compute_wall = sum(count * stage_step[:, j].max() * fill
                           for j, (_, _, count) in enumerate(phases))
        if s > 1:
            bubble_phase = [(s * stage_step[:, j].max() * fill - stage_step[:, j].sum()) / (s - 1)
                            for j in range(2)]
        else:
            bubble_phase = [0.0, 0.0]
    else:
        compute_wall = sum(windows[i] for i in compute_ids)
        bubble_phase = [0.0, 0.0]

    # communication leaves
    wall_events, gpu_events = [], []
    sent_by_stage = np.zeros(max(s, 1))
    for node in leaves:
        if not node.is_comm:
            continue
        T = np.array([comm_tensor_bytes(arch, work, node.site, ph) for ph, _, c in phases
                      for _ in range(c)], dtype=float)
        waits = sample_skew(p, n_inv, params, rng)
        if node.kind is ModuleKind.P2P_TRANSFER:
            sent = T
            moved = T
            bubble = np.array([bubble_phase[0]] + [bubble_phase[1]] * work.seq_out)
            idle_gpu_s = bubble + waits
            sent_by_stage[node.site.index] += moved.sum()
        else:
            coll = "allreduce" if node.kind is ModuleKind.ALL_REDUCE else "allgather"
            sent = np.array([ring_schedule(p, t, coll).bytes_sent_per_gpu for t in T])
            moved = sent * p
            idle_gpu_s = (p - 1) * waits
        tx_time = sent / params.link_bandwidth
        energy[node.id] = NodeEnergy(
            transfer=params.energy_per_byte * moved.sum(),
            wait=params.idle_power * idle_gpu_s.sum() / WH)
        windows[node.id] = float(tx_time.sum() + waits.sum())
        wall_events.append(waits)
        gpu_events.append(idle_gpu_s)

    comm_wall = sum(windows[node.id] for node in leaves if node.is_comm)
    wall = compute_wall + comm_wall

    # base power attributed to execution windows; overlapped pipeline stages share it
    sum_compute_windows = sum(windows[i] for i in compute_ids)
    overlap = compute_wall / sum_compute_windows if sum_compute_windows > 0 else 0.0
    for node in leaves:
        w = windows[node.id] * (1.0 if node.is_comm else overlap)
        e = energy[node.id]
        energy[node.id] = NodeEnergy(e.compute, e.transfer, e.wait,
                                  params.base_system_power * w / WH)

    if wall_events:
        we, ge = np.concatenate(wall_events), np.concatenate(gpu_events)
        sync = (float(we.mean()), float(ge.mean()), float(we.std()))
    else:
        sync = (0.0, 0.0, 0.0)
    return tree, energy, windows, wall, sync, clock, stage_step, sent_by_stage


def _gpu_records(tree, energy, windows, wall, clock, params, work, stage_step,
                 rng) -> tuple[GpuRecord, ...]:
    arch, par = tree.arch, tree.par
    p = par.degree
    leaves = tree.leaves()
    comp = sum(energy[node.id].compute for node in leaves)
    tx = sum(energy[node.id].transfer for node in leaves)
    block_b, edge_b = _param_bytes(arch)
    kv = 2 * arch.num_layers * arch.kv_dim * work.batch_size * work.tokens * arch.dtype_bytes
    stage_of = _stage_of(tree)

    if par.strategy is Strategy.PIPELINE:
        counter, busy, mem = [], [], []
        for k, (lo, hi) in enumerate(tree.stage_ranges):
            ids = [node.id for node in leaves if stage_of.get(node.id) == k]
            c = sum(energy[i].compute for i in ids)
            t = energy[f"p2p{k}"].transfer if k < p - 1 else 0.0
            counter.append(c + t)
            busy.append(sum(windows[i] for i in ids if not tree.node(i).is_comm) / wall)
            frac = (hi - lo) / arch.num_layers
            mem.append(block_b * (hi - lo) + edge_b / 2 * ((k == 0) + (k == p - 1)) + kv * frac)
    else:
        share = 1.0 / p
        busy_all = sum(windows[node.id] for node in leaves if not node.is_comm) / wall
        counter = [(comp + tx) * share] * p
        busy = [busy_all] * p
        if par.strategy is Strategy.TENSOR:
            mem = [(block_b * arch.num_layers + edge_b + kv) / p] * p
        else:
            mem = [block_b * arch.num_layers + edge_b + kv / p] * p

    j = params.util_jitter
    out = []
    for g in range(p):
        noise = rng.standard_normal(8)
        u = busy[g]
        out.append(GpuRecord(
            cpu_util=float(np.clip(0.15 + 0.25 * (1 - u) + j * noise[0], 0, 1)),
            cpu_mem_util=float(np.clip(0.2 + 0.05 * p / 4 + j * noise[1], 0, 1)),
            gpu_util=float(np.clip(0.05 + 0.9 * u + j * noise[2], 0, 1)),
            gpu_mem_util=float(np.clip(mem[g] / params.gpu_memory_bytes + j * noise[3], 0, 1)),
            cpu_clock=float(2.8 * (1 + 0.01 * noise[4])),
            cpu_mem_clock=float(1.6 * (1 + 0.005 * noise[5])),
            memory_bytes=float(mem[g]),
            gpu_clock=float(1.8 * clock * (1 + 0.003 * noise[6])),
            gpu_mem_clock=float(8.0 * (1 + 0.003 * noise[7])),
            gpu_energy_counter=float(counter[g]),
        ))
    return tuple(out)


def _compose(tree: ModelTree, leaf_energy: dict[str, NodeEnergy]) -> dict[str, NodeEnergy]:
    out: dict[str, NodeEnergy] = {}

    def rec(node: TreeNode) -> NodeEnergy:
        if node.is_leaf:
            e = leaf_energy[node.id]
        else:
            e = NodeEnergy()
            for child in node.children:
                e = e + rec(child)
        out[node.id] = e
        return e

    rec(tree.root)
    return {node.id: out[node.id] for node in tree.root.walk()}


def simulate_run(arch: ModelArch, par: ParallelismConfig, work: WorkloadConfig,
                 params: SimParams, rng: np.random.Generator, cell: int = 0,
                 run: int = 0) -> MeasurementRecord:
    violations = validate(arch, par, work) + params.validate()
    if violations:
        raise ValidationError(violations)
    tree, energy, windows, wall, sync, clock, stage_step, _ = simulate_clean(
        arch, par, work, params, rng)
    if params.noise_rel > 0:
        eps = rng.uniform(-params.noise_rel, params.noise_rel, size=len(energy))
        energy = {k: e.scaled(1.0 + x) for (k, e), x in zip(energy.items(), eps)}
    gpus = _gpu_records(tree, energy, windows, wall, clock, params, work, stage_step, rng)
    sample = RuntimeSample(gpus, *sync)
    return MeasurementRecord(arch, par, work, _compose(tree, energy), wall, sample,
                             cell, run)


# -- datasets ---------------------------------------------------------------------

Cell = tuple  # (ModelArch, ParallelismConfig, WorkloadConfig)


def make_grid(archs: Sequence[ModelArch], pars: Sequence[ParallelismConfig],
              works: Sequence[WorkloadConfig], skip_invalid: bool = False) -> list[Cell]:
    grid = []
    for a in archs:
        for p in pars:
            for w in works:
                v = validate(a, p, w)
                if v:
                    if skip_invalid:
                        continue
                    raise ValidationError([f"{a.variant_name}/{p.strategy.value}"
                                           f"/{p.degree}: {x}" for x in v])
                grid.append((a, p, w))
    return grid


def cell_to_dict(cell: Cell) -> dict:
    a, p, w = cell
    return {"arch": a.to_dict(), "parallelism": p.to_dict(), "workload": w.to_dict()}


def cell_from_dict(d: dict) -> Cell:
    return (ModelArch(**d["arch"]), ParallelismConfig(**d["parallelism"]),
            WorkloadConfig(**d["workload"]))


def cell_seed_sequence(seed: int, cell: Cell) -> np.random.SeedSequence:
    """Stream keyed by the cell's content, so sub-grids reproduce the same records."""
    digest = hashlib.sha256(json.dumps(cell_to_dict(cell), sort_keys=True).encode()).digest()
    key = tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))
    return np.random.SeedSequence(entropy=seed, spawn_key=key)


@dataclass
class Dataset:
    records: list[MeasurementRecord]
    grid: list[Cell] = field(default_factory=list)
    params: SimParams = field(default_factory=SimParams)
    seed: int = 0
    runs_per_cell: int = 1
    schema_version: int = DATASET_SCHEMA_VERSION

    def __len__(self):
        return len(self.records)

    def subset(self, idx: Iterable[int]) -> "Dataset":
        return Dataset([self.records[i] for i in idx], self.grid, self.params, self.seed,
                       self.runs_per_cell, self.schema_version)

    def comm_share(self) -> float:
        comm = sum(r.comm_energy() for r in self.records)
        total = sum(r.model_total_energy for r in self.records)
        return comm / total if total > 0 else 0.0


def _run_cell(args):
    i, cell, runs, params, seed = args
    ss = cell_seed_sequence(seed, cell)
    out = []
    for r, child in enumerate(ss.spawn(runs)):
        rng = np.random.Generator(np.random.PCG64(child))
        out.append(simulate_run(*cell, params, rng, cell=i, run=r))
    return out


def gen_dataset(grid: Sequence[Cell], runs_per_cell: int, params: SimParams,
                seed: int | None = None, workers: int = 1) -> Dataset:
    if not grid:
        raise DataError("grid is empty")
    if runs_per_cell < 1:
        raise DataError("runs_per_cell must be >= 1")
    violations = params.validate()
    for a, p, w in grid:
        violations += validate(a, p, w)
    if violations:
        raise ValidationError(violations)
    seed = params.seed if seed is None else seed
    jobs = [(i, c, runs_per_cell, params, seed) for i, c in enumerate(grid)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_cell, jobs))
    else:
        chunks = [_run_cell(j) for j in jobs]
    records = [r for chunk in chunks for r in chunk]
    return Dataset(records, list(grid), params, seed, runs_per_cell)


# -- dataset files ------------------------------------------------------------------

def _record_to_dict(r: MeasurementRecord) -> dict:
    s = r.runtime_sample
    return {
        "cell": r.cell, "run": r.run, "wall_time": r.wall_time,
        "nodes": {k: e.as_list() for k, e in r.nodes.items()},
        "gpus": [list(g.as_tuple()) for g in s.gpus],
        "sync": [s.sync_wait_wall, s.sync_wait_gpu, s.sync_wait_std],
    }


def dumps_dataset(ds: Dataset, extra_header: dict | None = None) -> str:
    header = {
        "format": "energytree-dataset", "schema_version": ds.schema_version,
        "tool_version": __version__, "seed": ds.seed, "runs_per_cell": ds.runs_per_cell,
        "sim_params": ds.params.to_dict(), "grid": [cell_to_dict(c) for c in ds.grid],
    }
    if extra_header:
        header.update(extra_header)
    lines = [json.dumps(header, separators=(",", ":"))]
    lines += [json.dumps(_record_to_dict(r), separators=(",", ":")) for r in ds.records]
    return "\n".join(lines) + "\n"


def loads_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise ParseError("dataset file is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"line 1: {exc.msg}") from None
    if header.get("format") != "energytree-dataset":
        raise ParseError("line 1: not an energytree dataset header")
    if header.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise ParseError(f"dataset schema version {header.get('schema_version')} is not "
                         f"supported (expected {DATASET_SCHEMA_VERSION})")
    grid = [cell_from_dict(c) for c in header["grid"]]
    params = SimParams.from_dict(header["sim_params"])
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            arch, par, work = grid[d["cell"]]
            gpus = tuple(GpuRecord(*g) for g in d["gpus"])
            rec = MeasurementRecord(
                arch, par, work, {k: NodeEnergy(*v) for k, v in d["nodes"].items()},
                d["wall_time"], RuntimeSample(gpus, *d["sync"]), d["cell"], d["run"])
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise ParseError(f"line {ln}: malformed record ({exc})") from None
        bad = rec.validate()
        if bad:
            raise DataError(f"line {ln}: {bad[0]}")
        records.append(rec)
    return Dataset(records, grid, params, header["seed"], header["runs_per_cell"])


def save_dataset(ds: Dataset, path, extra_header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_dataset(ds, extra_header))


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return loads_dataset(fh.read())
