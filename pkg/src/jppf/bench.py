"""Wall-clock comparison of the joint fusion and the two-stage baseline."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable, Sequence

from .config import FusionConfig
from .detections import Detection
from .fusion import jppf, panoptic_fuse_two
from .merge import part_map_from_logits, top_down_merge
from .taxonomy import ClassCatalog


def median_times(fns: Sequence[Callable[[], object]], reps: int, warmup: int = 1):
    """Median seconds per function over ``reps`` rounds, plus the last results.

    Functions run interleaved within each round so that drift in machine load
    affects all of them alike.
    """
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    results = [None] * len(fns)
    for _ in range(warmup):
        results = [fn() for fn in fns]
    times = [[] for _ in fns]
    for _ in range(reps):
        for i, fn in enumerate(fns):
            start = time.perf_counter()
            results[i] = fn()
            times[i].append(time.perf_counter() - start)
    return [statistics.median(t) for t in times], results


@dataclass(frozen=True)
class BenchReport:
    fusion_s: float
    merge_path_s: float
    reps: int
    height: int
    width: int

    @property
    def ratio(self) -> float:
        return self.merge_path_s / self.fusion_s if self.fusion_s > 0 else float("inf")

    def to_text(self) -> str:
        return (f"image          {self.height}x{self.width}\n"
                f"repetitions    {self.reps}\n"
                f"jppf           {1000 * self.fusion_s:10.2f} ms (median)\n"
                f"fuse+merge     {1000 * self.merge_path_s:10.2f} ms (median)\n"
                f"ratio          {self.ratio:10.3f}\n")

    def to_kv(self) -> str:
        return (f"fusion_ms = {1000 * self.fusion_s!r}\nmerge_path_ms = {1000 * self.merge_path_s!r}\n"
                f"ratio = {self.ratio!r}\nreps = {self.reps}\nheight = {self.height}\nwidth = {self.width}\n")


def run_bench(sem, parts, dets: Sequence[Detection], catalog: ClassCatalog,
              config: FusionConfig = FusionConfig(), reps: int = 5, n_jobs: int = 1):
    """Time (a) jppf and (b) panoptic_fuse_two + part argmax + top_down_merge.

    Inputs are already in memory, so no file I/O is timed. Returns the report
    and both outputs.
    """
    def fusion():
        return jppf(sem, parts, dets, catalog, config, n_jobs)

    def merge_path():
        panoptic = panoptic_fuse_two(sem, dets, catalog, config, n_jobs)
        return top_down_merge(panoptic, part_map_from_logits(parts), catalog)

    (t_fusion, t_merge), (fused, merged) = median_times([fusion, merge_path], reps)
    h, w = sem.shape[1:]
    return BenchReport(t_fusion, t_merge, reps, h, w), fused, merged
