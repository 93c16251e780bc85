"""Module-level model trees with communication nodes per parallelism strategy."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Optional

from .config import ModelArch, ParallelismConfig, Strategy, WorkloadConfig, validate
from .errors import DataError, ValidationError


class ModuleKind(str, enum.Enum):
    EMBEDDING = "Embedding"
    SELF_ATTENTION = "SelfAttention"
    MLP = "MLP"
    NORM = "Norm"
    LM_HEAD = "LMHead"
    ALL_REDUCE = "AllReduce"
    P2P_TRANSFER = "P2PTransfer"
    BATCH_OUTPUT_ALL_GATHER = "BatchOutputAllGather"
    TRANSFORMER_BLOCK = "TransformerBlock"
    STAGE = "Stage"
    ROOT = "Root"


COMPUTE_KINDS = (ModuleKind.EMBEDDING, ModuleKind.SELF_ATTENTION, ModuleKind.MLP,
                 ModuleKind.NORM, ModuleKind.LM_HEAD)
COMM_KINDS = (ModuleKind.ALL_REDUCE, ModuleKind.P2P_TRANSFER,
              ModuleKind.BATCH_OUTPUT_ALL_GATHER)
LEAF_KINDS = COMPUTE_KINDS + COMM_KINDS
INTERIOR_KINDS = (ModuleKind.TRANSFORMER_BLOCK, ModuleKind.STAGE, ModuleKind.ROOT)


@dataclass(frozen=True)
class CommSite:
    """Where a communication node sits.

    ``position`` is one of ``attn_out`` / ``mlp_out`` (AllReduce, with ``index``
    the layer), ``stage_boundary`` (P2P, ``index`` = producing stage) or
    ``batch_output`` (the terminal AllGather).
    """
    kind: ModuleKind
    position: str
    index: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "position": self.position, "index": self.index}


@dataclass(frozen=True)
class TreeNode:
    id: str
    kind: ModuleKind
    children: tuple["TreeNode", ...] = ()
    site: Optional[CommSite] = None
    layer: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def is_comm(self) -> bool:
        return self.kind in COMM_KINDS

    def walk(self) -> Iterator["TreeNode"]:
        """Pre-order traversal."""
        yield self
        for child in self.children:
            yield from child.walk()

    def leaves(self) -> Iterator["TreeNode"]:
        return (node for node in self.walk() if node.is_leaf)


@dataclass(frozen=True)
class ModelTree:
    root: TreeNode
    arch: ModelArch
    par: ParallelismConfig
    stage_ranges: tuple[tuple[int, int], ...] = field(default=())

    def nodes(self) -> list[TreeNode]:
        return list(self.root.walk())

    def leaves(self) -> list[TreeNode]:
        return list(self.root.leaves())

    def count(self, kind: ModuleKind) -> int:
        return sum(1 for node in self.root.walk() if node.kind is kind)

    def node(self, node_id: str) -> TreeNode:
        for node in self.root.walk():
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    @property
    def signature(self) -> str:
        """Key shared by every tree built from the same (arch, par)."""
        return f"{self.arch.variant_name}|{self.par.strategy.value}|{self.par.degree}"


def stage_partition(num_layers: int, stages: int) -> list[tuple[int, int]]:
    """Contiguous half-open layer ranges, balanced, front-loaded."""
    if stages < 1 or num_layers < 1:
        raise ValueError("num_layers and stages must be positive")
    if stages > num_layers:
        raise ValueError(f"stages ({stages}) exceeds num_layers ({num_layers})")
    base, extra = divmod(num_layers, stages)
    ranges, start = [], 0
    for k in range(stages):
        size = base + (1 if k < extra else 0)
        ranges.append((start, start + size))
        start += size
    return ranges


def _block(layer: int, tp: bool) -> TreeNode:
    p = f"block{layer}"
    kids = [TreeNode(f"{p}.norm_attn", ModuleKind.NORM, layer=layer),
            TreeNode(f"{p}.attn", ModuleKind.SELF_ATTENTION, layer=layer)]
    if tp:
        kids.append(TreeNode(f"{p}.allreduce_attn", ModuleKind.ALL_REDUCE, layer=layer,
                             site=CommSite(ModuleKind.ALL_REDUCE, "attn_out", layer)))
    kids += [TreeNode(f"{p}.norm_mlp", ModuleKind.NORM, layer=layer),
             TreeNode(f"{p}.mlp", ModuleKind.MLP, layer=layer)]
    if tp:
        kids.append(TreeNode(f"{p}.allreduce_mlp", ModuleKind.ALL_REDUCE, layer=layer,
                             site=CommSite(ModuleKind.ALL_REDUCE, "mlp_out", layer)))
    return TreeNode(p, ModuleKind.TRANSFORMER_BLOCK, tuple(kids), layer=layer)


def build_tree(arch: ModelArch, par: ParallelismConfig) -> ModelTree:
    violations = validate(arch, par)
    if violations:
        raise ValidationError(violations)
    p = par.degree
    L = arch.num_layers
    embed = TreeNode("embed", ModuleKind.EMBEDDING)
    final_norm = TreeNode("final_norm", ModuleKind.NORM)
    head = TreeNode("lm_head", ModuleKind.LM_HEAD)
    ranges: tuple = ()

    if par.strategy is Strategy.TENSOR:
        kids = [embed, *(_block(i, p > 1) for i in range(L)), final_norm, head]
    elif par.strategy is Strategy.DATA:
        kids = [embed, *(_block(i, False) for i in range(L)), final_norm, head]
        if p > 1:
            kids.append(TreeNode("allgather", ModuleKind.BATCH_OUTPUT_ALL_GATHER,
                                 site=CommSite(ModuleKind.BATCH_OUTPUT_ALL_GATHER,
                                               "batch_output")))
    else:
        ranges = tuple(stage_partition(L, p))
        kids = []
        for k, (lo, hi) in enumerate(ranges):
            members = [embed] if k == 0 else []
            members += [_block(i, False) for i in range(lo, hi)]
            if k == p - 1:
                members += [final_norm, head]
            kids.append(TreeNode(f"stage{k}", ModuleKind.STAGE, tuple(members)))
            if k < p - 1:
                kids.append(TreeNode(f"p2p{k}", ModuleKind.P2P_TRANSFER,
                                     site=CommSite(ModuleKind.P2P_TRANSFER,
                                                   "stage_boundary", k)))
    root = TreeNode("root", ModuleKind.ROOT, tuple(kids))
    return ModelTree(root, arch, par, ranges)


@lru_cache(maxsize=512)
def cached_tree(arch: ModelArch, par: ParallelismConfig) -> ModelTree:
    return build_tree(arch, par)


# -- communication sizing ----------------------------------------------------

def step_tokens(work: WorkloadConfig, phase: str) -> int:
    if phase == "prefill":
        return work.seq_in
    if phase == "decode":
        return 1
    raise ValueError(f"unknown phase {phase!r}")


def comm_tensor_bytes(arch: ModelArch, work: WorkloadConfig, site: CommSite,
                      phase: str = "decode") -> int:
    """Bytes of the tensor exchanged at ``site`` during one forward step.

    Hidden activations (AllReduce, P2P) scale with the step's token count;
    the batch-output gather moves one row of logits per sequence.
    """
    if site.kind in (ModuleKind.ALL_REDUCE, ModuleKind.P2P_TRANSFER):
        return (work.batch_size * step_tokens(work, phase) * arch.hidden_size
                * arch.dtype_bytes)
    if site.kind is ModuleKind.BATCH_OUTPUT_ALL_GATHER:
        return work.batch_size * arch.vocab_size * arch.dtype_bytes
    raise DataError(f"unknown communication site kind {site.kind!r}")


@dataclass(frozen=True)
class RingSchedule:
    total_steps: int
    bytes_sent_per_gpu: float
    reduce_scatter_steps: int  # phase boundary: steps before the gather phase
    chunk_bytes: float


def ring_schedule(p: int, tensor_bytes: float, collective: str = "allreduce") -> RingSchedule:
    """Closed-form cost of a ring collective over ``p`` GPUs.

    AllReduce is ReduceScatter (p-1 steps) then AllGather (p-1 steps), each
    step sending one 1/p chunk. A bare ``allgather`` is the second phase only.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    if tensor_bytes < 0:
        raise ValueError("tensor_bytes must be >= 0")
    chunk = tensor_bytes / p
    if collective == "allreduce":
        steps, rs = 2 * (p - 1), p - 1
    elif collective == "allgather":
        steps, rs = p - 1, 0
    else:
        raise ValueError(f"unknown collective {collective!r}")
    # one division keeps the per-GPU total correctly rounded for integer sizes
    return RingSchedule(steps, steps * tensor_bytes / p, rs, chunk)


def comm_ring_steps(node: TreeNode, p: int) -> int:
    if node.kind is ModuleKind.ALL_REDUCE:
        return 2 * (p - 1)
    if node.kind is ModuleKind.BATCH_OUTPUT_ALL_GATHER:
        return p - 1
    if node.kind is ModuleKind.P2P_TRANSFER:
        return 1
    return 0


# -- dumping -----------------------------------------------------------------

def tree_to_dict(node: TreeNode) -> dict:
    d = {"id": node.id, "kind": node.kind.value}
    if node.site is not None:
        d["site"] = node.site.to_dict()
    d["children"] = [tree_to_dict(child) for child in node.children]
    return d


def tree_to_text(tree: ModelTree) -> str:
    lines = [f"# {tree.arch.variant_name} {tree.par.strategy.value} degree={tree.par.degree}"]

    def rec(node: TreeNode, depth: int):
        extra = f"  [{node.site.position}:{node.site.index}]" if node.site else ""
        lines.append(f"{'  ' * depth}{node.id} ({node.kind.value}){extra}")
        for child in node.children:
            rec(child, depth + 1)

    rec(tree.root, 0)
    return "\n".join(lines) + "\n"


def tree_to_json(tree: ModelTree) -> str:
    doc = {"arch": tree.arch.variant_name, "parallelism": tree.par.to_dict(),
           "root": tree_to_dict(tree.root)}
    return json.dumps(doc, indent=1)
