"""Effect of the submap window T on how many true loops are accepted.

Single scans from sensors with different fields of view overlap poorly, so
few candidates validate. Accumulating neighbouring frames into submaps
fills in the shared structure until, past some window, nothing more is
gained.
"""
import time

from mapmerge.evaluation import classify_loops
from mapmerge.pipeline import PipelineConfig, accumulate_map, find_inter_loops, initial_alignment
from mapmerge.scenario import ScenarioSpec, generate_scenario

sc = generate_scenario(ScenarioSpec(seed=0, n_nodes=200))
cfg = PipelineConfig(loop_stride=10)
T = initial_alignment(accumulate_map(sc.central, cfg.voxel_map), accumulate_map(sc.query, cfg.voxel_map),
                      cfg.voxel_map, cfg)

print(f"{'T':>4} {'candidates':>11} {'accepted':>9} {'true':>5} {'seconds':>8}")
for window in (1, 5, 10, 20, 40):
    t0 = time.perf_counter()
    loops = find_inter_loops(sc.central, sc.query, T, cfg.replace(window=window))
    acc = [lc for lc in loops if lc.accepted]
    tp, _ = classify_loops(acc, (sc.gt_central, sc.gt_query_world()))
    print(f"{window:>4} {len(loops):>11} {len(acc):>9} {tp:>5} {time.perf_counter() - t0:>8.1f}")
