"""Seeded workload generators: null and sleep tasks, and a six-stage synthetic campaign."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .core import Modality, TaskDescription
from .resources import Allocation, NodeSpec

TASKS_PER_CORE = 4
CAMPAIGN_DURATION_S = 180.0
FLOOR_PER_BLOCK = 102
BLOCK_NODES = 128
ADAPTIVE_CEILING = 1.2


class WorkloadKind(str, Enum):
    NULL = "null"
    DUMMY = "dummy"
    CAMPAIGN = "campaign"


class InfeasibleStage(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    kind: WorkloadKind = WorkloadKind.DUMMY
    duration_s: float | None = 180.0
    count: int | None = None
    mix_func: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mix_func <= 1.0:
            raise ValueError(f"mix_func must be in [0, 1], got {self.mix_func}")
        if self.count is not None and self.count < 1:
            raise ValueError("count must be >= 1")
        if self.kind is WorkloadKind.DUMMY and (self.duration_s is None or self.duration_s < 0):
            raise ValueError("dummy workloads need a non-negative duration")


def task_count(spec: WorkloadSpec, alloc: Allocation) -> int:
    return spec.count if spec.count is not None else alloc.total_cores * TASKS_PER_CORE


def generate_uniform(spec: WorkloadSpec, alloc: Allocation, prefix: str = "task") -> list[TaskDescription]:
    """Single-core null or sleep tasks; the function share is placed by a seeded permutation."""
    if spec.kind is WorkloadKind.CAMPAIGN:
        raise ValueError("use generate_campaign for campaign workloads")
    n = task_count(spec, alloc)
    n_func = int(round(n * spec.mix_func))
    is_func = np.zeros(n, dtype=bool)
    if 0 < n_func < n:
        is_func[np.random.default_rng(spec.seed).permutation(n)[:n_func]] = True
    elif n_func == n:
        is_func[:] = True
    duration = None if spec.kind is WorkloadKind.NULL else float(spec.duration_s)
    return [
        TaskDescription(f"{prefix}.{i:06d}", Modality.FUNCTION if f else Modality.EXECUTABLE, 1, 0, duration)
        for i, f in enumerate(is_func.tolist())
    ]


# -- campaign -----------------------------------------------------------------

@dataclass(frozen=True)
class CampaignStage:
    name: str
    cores_min: int
    cores_max: int
    gpus_min: int
    gpus_max: int
    max_nodes: int
    share: float | None = None
    modality: Modality = Modality.EXECUTABLE
    duration_s: float = CAMPAIGN_DURATION_S
    adaptive: bool = False

    def __post_init__(self):
        if not 1 <= self.cores_min <= self.cores_max:
            raise ValueError(f"{self.name}: bad core range")
        if not 0 <= self.gpus_min <= self.gpus_max:
            raise ValueError(f"{self.name}: bad gpu range")
        if self.max_nodes < 1:
            raise ValueError(f"{self.name}: max_nodes must be >= 1")

    @property
    def weight(self) -> float:
        return self.max_nodes if self.share is None else self.share


DEFAULT_STAGES: tuple[CampaignStage, ...] = (
    CampaignStage("docking", 1, 7168, 0, 0, 128),
    CampaignStage("sst_train", 1, 56, 1, 32, 4),
    CampaignStage("sst_infer", 1, 7168, 1, 1024, 128),
    CampaignStage("scoring", 1, 7168, 0, 128, 128),
    CampaignStage("esmacs", 1, 56, 0, 8, 625, adaptive=True),
    CampaignStage("reinvent", 1, 56, 1, 8, 1),
)

FAITHFUL_NODES = {256: 550, 1024: 1800}


def campaign_total(nodes: int) -> int:
    """Task budget: 550 at 256 nodes, 1800 at 1024, linear between, proportional outside."""
    lo, hi = 256, 1024
    if nodes <= lo:
        return max(1, round(FAITHFUL_NODES[lo] * nodes / lo))
    if nodes >= hi:
        return round(FAITHFUL_NODES[hi] * nodes / hi)
    return round(FAITHFUL_NODES[lo] + (nodes - lo) * (FAITHFUL_NODES[hi] - FAITHFUL_NODES[lo]) / (hi - lo))


def stage_counts(total: int, stages=DEFAULT_STAGES) -> list[int]:
    """Largest-remainder split of ``total`` by stage weight, at least one task per stage."""
    w = np.array([s.weight for s in stages], dtype=np.float64)
    exact = total * w / w.sum()
    counts = np.maximum(np.floor(exact).astype(int), 1)
    rem = exact - np.floor(exact)
    for i in np.argsort(-rem, kind="stable"):
        if counts.sum() >= total:
            break
        counts[i] += 1
    return counts.tolist()


def adaptive_floor(nodes: int) -> int:
    return math.ceil(FLOOR_PER_BLOCK * nodes / BLOCK_NODES)


def bounded_pareto(rng: np.random.Generator, lo: int, hi: int, size: int, alpha: float = 1.0) -> np.ndarray:
    """Integer draws from a Pareto law truncated to [lo, hi]; lo must be >= 1."""
    if lo == hi:
        return np.full(size, lo, dtype=np.int64)
    u = rng.random(size)
    ratio = (lo / hi) ** alpha
    x = lo / (1.0 - u * (1.0 - ratio)) ** (1.0 / alpha)
    return np.clip(np.floor(x).astype(np.int64), lo, hi)


def _effective(stage: CampaignStage, nodes: int, spec: NodeSpec, scaled: bool) -> CampaignStage:
    cap_c = min(stage.max_nodes, nodes) * spec.cores
    cap_g = min(stage.max_nodes, nodes) * spec.gpus_per_node
    if not scaled:
        if stage.cores_max > cap_c or stage.gpus_max > cap_g:
            raise InfeasibleStage(
                f"{stage.name}: up to {stage.cores_max}c/{stage.gpus_max}g exceeds {cap_c}c/{cap_g}g")
        return stage
    cmax = max(stage.cores_min, min(stage.cores_max, cap_c))
    gmax = min(stage.gpus_max, cap_g)
    gmin = min(stage.gpus_min, gmax)
    if stage.cores_min > cap_c:
        raise InfeasibleStage(f"{stage.name}: needs at least {stage.cores_min} cores")
    return replace(stage, cores_max=cmax, gpus_max=gmax, gpus_min=gmin)


@dataclass
class Campaign:
    """A staged campaign plus the state needed to grow its adaptive stage."""

    nodes: int
    spec: NodeSpec
    seed: int
    stages: list[CampaignStage]
    tasks: list[list[TaskDescription]]
    generated: list[int] = field(default_factory=list)
    _rngs: list = field(default_factory=list, repr=False)

    @property
    def floor(self) -> int:
        return adaptive_floor(self.nodes)

    def ceiling(self, k: int) -> int:
        return math.ceil(ADAPTIVE_CEILING * self.generated[k])

    def all_tasks(self) -> list[TaskDescription]:
        return [t for stage in self.tasks for t in stage]

    def draw(self, k: int, n: int) -> list[TaskDescription]:
        """Append ``n`` more tasks to stage ``k`` and return them."""
        st = self.stages[k]
        rng = self._rngs[k]
        cores = bounded_pareto(rng, st.cores_min, st.cores_max, n)
        if st.gpus_min >= 1:
            gpus = bounded_pareto(rng, st.gpus_min, st.gpus_max, n)
        elif st.gpus_max > 0:
            gpus = bounded_pareto(rng, 1, st.gpus_max + 1, n) - 1
        else:
            gpus = np.zeros(n, dtype=np.int64)
        start = len(self.tasks[k])
        new = [TaskDescription(f"{st.name}.{start + i:06d}", st.modality, int(c), int(g), st.duration_s,
                               stage=st.name)
               for i, (c, g) in enumerate(zip(cores.tolist(), gpus.tolist()))]
        self.tasks[k].extend(new)
        return new


def generate_campaign(nodes: int, spec: NodeSpec | None = None, seed: int = 0, stages=DEFAULT_STAGES,
                      scaled: bool | None = None, total: int | None = None) -> Campaign:
    spec = spec or NodeSpec()
    if nodes < 1:
        raise ValueError("nodes must be >= 1")
    scaled = nodes not in FAITHFUL_NODES if scaled is None else scaled
    eff = [_effective(s, nodes, spec, scaled) for s in stages]
    counts = stage_counts(campaign_total(nodes) if total is None else total, eff)
    floor = adaptive_floor(nodes)
    counts = [max(c, floor) if s.adaptive else c for c, s in zip(counts, eff)]
    camp = Campaign(nodes, spec, seed, eff, [[] for _ in eff], list(counts),
                    [np.random.default_rng([seed, k]) for k in range(len(eff))])
    for k, c in enumerate(counts):
        camp.draw(k, c)
    return camp


def adaptive_scale(free_cores_now: int, stage: CampaignStage, current_count: int, alloc: Allocation,
                   ceiling: int | None = None) -> int:
    """Extra tasks to add to an active adaptive stage.

    ``free_cores_now`` is idle capacity net of queued demand. The floor
    deficit is always made up when capacity is idle; beyond it, growth fills
    free slots up to ``ceiling``.
    """
    if free_cores_now <= 0:
        return 0
    deficit = max(0, adaptive_floor(alloc.node_count) - current_count)
    ceiling = current_count if ceiling is None else ceiling
    fill = min(free_cores_now // stage.cores_min, max(0, ceiling - current_count))
    return max(deficit, fill)
