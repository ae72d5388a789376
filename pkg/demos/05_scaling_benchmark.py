"""Wall-time and memory scaling: TTT layer vs softmax attention.

The TTT layer never materializes an N x N object, so its time and peak
transient memory grow linearly with sequence length, while softmax attention
is quadratic. Uses short sequences by default; pass --full for the long sweep.
"""

import sys

import numpy as np

from tttlab.harness import RunConfig, bench_layer_once, cmd_bench, loglog_slope
from tttlab.inner import InnerTrainConfig

lengths = (256, 512, 1024, 2048, 4096, 8192) if "--full" in sys.argv else (256, 512, 1024, 2048)

rc = RunConfig(command="bench", out_dir="runs/bench-demo", dim=128, heads=4)
report = cmd_bench(rc, lengths=lengths, reps=5, warmup=2)
print(f"{'layer':>8s} {'N':>6s} {'p50 ms':>9s} {'peak MB':>8s} {'GFLOP':>7s}")
for row in report["rows"]:
    print(f"{row['layer']:>8s} {row['N']:>6d} {row['p50_ms']:>9.2f} "
          f"{row['peak_bytes'] / 1e6:>8.1f} {row['flops'] / 1e9:>7.3f}")

for kind in ("ttt", "softmax"):
    sub = [r for r in report["rows"] if r["layer"] == kind]
    slope = loglog_slope([r["N"] for r in sub], [r["p50_ms"] for r in sub])
    print(f"{kind}: log-log wall-time slope {slope:.2f}")

# structural check: the largest buffer on the TTT tape is O(N), not O(N^2)
tape, _ = bench_layer_once("ttt", 2048, 64, 4, InnerTrainConfig(),
                           np.random.default_rng(0))()
biggest = max(node.value.size for node in tape.nodes)
print(f"largest TTT tape buffer at N=2048: {biggest} elements "
      f"({biggest / 2048:.0f} per token; N^2 would be {2048 * 2048})")
print(f"CSV written to {report['csv']}")
