"""Node/core/GPU inventory, disjoint partitioning, and slot bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import _kernels


class InvalidSpec(ValueError):
    pass


class PartitionError(ValueError):
    pass


class NeverFits(Exception):
    """The request exceeds what the slot map could ever provide."""


class UnknownAssignment(KeyError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    cores_per_node: int = 56
    gpus_per_node: int = 8
    smt: int = 1

    def __post_init__(self):
        if self.cores_per_node < 1:
            raise InvalidSpec(f"cores_per_node must be >= 1, got {self.cores_per_node}")
        if self.gpus_per_node < 0:
            raise InvalidSpec(f"gpus_per_node must be >= 0, got {self.gpus_per_node}")
        if self.smt < 1:
            raise InvalidSpec(f"smt must be >= 1, got {self.smt}")

    @property
    def cores(self) -> int:
        """Schedulable cores per node (hardware threads)."""
        return self.cores_per_node * self.smt


@dataclass(frozen=True)
class Allocation:
    node_count: int
    spec: NodeSpec = NodeSpec()

    @property
    def nodes(self) -> list[int]:
        return list(range(self.node_count))

    @property
    def total_cores(self) -> int:
        return self.node_count * self.spec.cores

    @property
    def total_gpus(self) -> int:
        return self.node_count * self.spec.gpus_per_node


def build_allocation(node_count: int, spec: NodeSpec | None = None) -> Allocation:
    if not isinstance(node_count, (int, np.integer)) or node_count < 1:
        raise InvalidSpec(f"node_count must be a positive integer, got {node_count!r}")
    return Allocation(int(node_count), spec or NodeSpec())


@dataclass(frozen=True)
class SlotAssignment:
    task_uid: str
    nodes: Mapping[int, tuple[int, int]]

    @property
    def cores(self) -> int:
        return sum(c for c, _ in self.nodes.values())

    @property
    def gpus(self) -> int:
        return sum(g for _, g in self.nodes.values())

    def __str__(self) -> str:
        return ",".join(f"n{n}:{c}c{g}g" for n, (c, g) in sorted(self.nodes.items()))


def _plan(free_c, free_g, cap_c, cap_g, cores, gpus, locality):
    """Pick (index, cores, gpus) triples for a request, or None if it does not fit now.

    Requests that fit on one node go to the first node with room. Larger
    requests fill nodes in ascending order. ``locality`` spreads the request
    evenly over exactly that many nodes.
    """
    n = free_c.shape[0]
    if locality is not None:
        if locality > n:
            return None
        share_c = [cores // locality + (1 if j < cores % locality else 0) for j in range(locality)]
        share_g = [gpus // locality + (1 if j < gpus % locality else 0) for j in range(locality)]
        picked = []
        for i in range(n):
            j = len(picked)
            if free_c[i] >= share_c[j] and free_g[i] >= share_g[j]:
                picked.append((i, share_c[j], share_g[j]))
                if len(picked) == locality:
                    return picked
        return None
    if np.any((cap_c >= cores) & (cap_g >= gpus)):
        i = _kernels.first_fit(free_c, free_g, cores, gpus)
        return None if i < 0 else [(i, cores, gpus)]
    if free_c.sum() < cores or free_g.sum() < gpus:
        return None
    picked = []
    rem_c, rem_g = cores, gpus
    for i in range(n):
        c = min(int(free_c[i]), rem_c)
        g = min(int(free_g[i]), rem_g)
        if c or g:
            picked.append((i, c, g))
            rem_c -= c
            rem_g -= g
            if rem_c == 0 and rem_g == 0:
                return picked
    return None


class SlotMap:
    """Free core/GPU counters for a set of nodes plus a ledger of holders."""

    def __init__(self, node_ids, spec: NodeSpec):
        self.node_ids = tuple(int(n) for n in node_ids)
        if not self.node_ids:
            raise InvalidSpec("slot map needs at least one node")
        self.spec = spec
        k = len(self.node_ids)
        self.cap_cores = np.full(k, spec.cores, dtype=np.int64)
        self.cap_gpus = np.full(k, spec.gpus_per_node, dtype=np.int64)
        self.free_cores = self.cap_cores.copy()
        self.free_gpus = self.cap_gpus.copy()
        self.ledger: dict[str, SlotAssignment] = {}
        self._index = {n: i for i, n in enumerate(self.node_ids)}

    @property
    def capacity_cores(self) -> int:
        return int(self.cap_cores.sum())

    @property
    def capacity_gpus(self) -> int:
        return int(self.cap_gpus.sum())

    @property
    def used_cores(self) -> int:
        return self.capacity_cores - int(self.free_cores.sum())

    def fits_capacity(self, cores: int, gpus: int = 0, locality: int | None = None) -> bool:
        return _plan(self.cap_cores, self.cap_gpus, self.cap_cores, self.cap_gpus,
                     cores, gpus, locality) is not None

    def plan(self, cores, gpus=0, locality=None, free_cores=None, free_gpus=None):
        fc = self.free_cores if free_cores is None else free_cores
        fg = self.free_gpus if free_gpus is None else free_gpus
        return _plan(fc, fg, self.cap_cores, self.cap_gpus, cores, gpus, locality)

    def acquire(self, uid: str, cores: int, gpus: int = 0, locality: int | None = None) -> SlotAssignment | None:
        """Place a request first-fit; ``None`` means busy for now.

        Raises :class:`NeverFits` when even an empty map could not hold it.
        """
        if cores < 1:
            raise ValueError("cores must be >= 1")
        if uid in self.ledger:
            raise ValueError(f"{uid} already holds slots")
        picked = self.plan(cores, gpus, locality)
        if picked is None:
            if not self.fits_capacity(cores, gpus, locality):
                raise NeverFits(f"{uid}: {cores} cores/{gpus} gpus exceed {self.capacity_cores}/{self.capacity_gpus}")
            return None
        return self._commit(uid, picked)

    def acquire_on(self, uid: str, node_id: int, cores: int, gpus: int = 0) -> SlotAssignment | None:
        i = self._index[node_id]
        if cores > self.cap_cores[i] or gpus > self.cap_gpus[i]:
            raise NeverFits(f"{uid}: {cores}c/{gpus}g exceed node {node_id}")
        if self.free_cores[i] < cores or self.free_gpus[i] < gpus:
            return None
        return self._commit(uid, [(i, cores, gpus)])

    def _commit(self, uid, picked) -> SlotAssignment:
        nodes = {}
        for i, c, g in picked:
            self.free_cores[i] -= c
            self.free_gpus[i] -= g
            nodes[self.node_ids[i]] = (c, g)
        a = SlotAssignment(uid, nodes)
        self.ledger[uid] = a
        return a

    def release(self, assignment: SlotAssignment) -> None:
        held = self.ledger.get(assignment.task_uid)
        if held is None or held != assignment:
            raise UnknownAssignment(assignment.task_uid)
        del self.ledger[assignment.task_uid]
        for node, (c, g) in assignment.nodes.items():
            i = self._index[node]
            self.free_cores[i] += c
            self.free_gpus[i] += g

    def index_of(self, node_id: int) -> int:
        return self._index[node_id]

    def snapshot(self) -> tuple:
        return (tuple(self.free_cores.tolist()), tuple(self.free_gpus.tolist()),
                tuple(sorted((u, tuple(sorted(a.nodes.items()))) for u, a in self.ledger.items())))

    def conserved(self) -> bool:
        used_c = np.zeros_like(self.free_cores)
        used_g = np.zeros_like(self.free_gpus)
        for a in self.ledger.values():
            for node, (c, g) in a.nodes.items():
                i = self._index[node]
                used_c[i] += c
                used_g[i] += g
        return bool(
            np.all(self.free_cores >= 0) and np.all(self.free_gpus >= 0)
            and np.array_equal(used_c + self.free_cores, self.cap_cores)
            and np.array_equal(used_g + self.free_gpus, self.cap_gpus)
        )


def acquire(slotmap: SlotMap, uid: str, cores: int, gpus: int = 0, locality: int | None = None):
    return slotmap.acquire(uid, cores, gpus, locality)


def release(slotmap: SlotMap, assignment: SlotAssignment) -> None:
    slotmap.release(assignment)


@dataclass
class Partition:
    id: int
    node_ids: tuple[int, ...]
    slotmap: SlotMap = field(repr=False)

    @property
    def capacity_cores(self) -> int:
        return self.slotmap.capacity_cores

    @property
    def capacity_gpus(self) -> int:
        return self.slotmap.capacity_gpus


def partition_sizes(node_count: int, n: int) -> list[int]:
    base, extra = divmod(node_count, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


def partition_allocation(alloc: Allocation, n: int) -> list[Partition]:
    """Split the allocation into ``n`` disjoint node ranges, sizes within one of each other."""
    if n < 1:
        raise PartitionError(f"need at least one partition, got {n}")
    if n > alloc.node_count:
        raise PartitionError(f"TooManyPartitions: {n} partitions for {alloc.node_count} nodes")
    parts = []
    start = 0
    for pid, size in enumerate(partition_sizes(alloc.node_count, n)):
        ids = tuple(range(start, start + size))
        parts.append(Partition(pid, ids, SlotMap(ids, alloc.spec)))
        start += size
    return parts
