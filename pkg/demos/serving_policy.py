"""
Memory-driven conversion in a serving loop
==========================================

Replays the bundled 10k-request multi-turn trace twice: once with every
layer kept as softmax attention and once with the adaptive controller,
which converts a prefix of the sensitivity order to dual-state layers when
KV memory runs high.  Converted layers keep a fixed-size state instead of
a growing cache, so more requests fit and long prefills get cheaper.
"""

import dataclasses
import time

import numpy as np

from dsla.serve.calibration import bundled_trace, load_calibration
from dsla.serve.cost import kv_cache_bytes
from dsla.serve.simulator import GIB, simulate
from dsla.serve.trace import bucket_shares

profile, controller, cost = load_calibration()
trace = bundled_trace()

print(f"{len(trace)} requests, prompt bucket shares {np.round(bucket_shares(trace), 3).tolist()}")
per_req = kv_cache_bytes(profile.n, 1, 4096, profile.h, profile.d_h, profile.bytes_per_elem)
print(f"a 4096-token request holds {per_req / GIB:.2f} GiB of KV cache; capacity {profile.capacity_bytes / GIB:.0f} GiB")
print(f"prefill crossover (softmax slower above): {cost.prefill_crossover():.0f} tokens\n")

reports = {}
for name, cfg in (("policy off", dataclasses.replace(controller, enabled=False)), ("policy on", controller)):
    t0 = time.perf_counter()
    reports[name] = rep = simulate(trace, profile, cfg, cost, seed=0)
    s = rep.summary()
    print(
        f"{name:<11} mean {s['mean_normalized_latency_ms']:7.2f} ms/token  p99 {s['p99_normalized_latency_ms']:8.2f}  "
        f"queue {s['mean_queue_delay_ms'] / 1e3:7.1f} s  converted {s['converted_requests']:5d}  "
        f"({time.perf_counter() - t0:.1f}s)"
    )

off, on = (reports[k].summary()["mean_normalized_latency_ms"] for k in ("policy off", "policy on"))
print(f"\nspeedup {off / on:.2f}x")

# conversion depth by prompt length under the policy
rep = reports["policy on"]
prompts = np.array([r.prompt_tokens for r in sorted(trace, key=lambda r: r.arrival_time)])
for lo, hi in ((1, 2048), (2048, 4096), (4096, 8192), (8192, None)):
    sel = (prompts >= lo) & (prompts < (hi or np.inf))
    print(f"prompts {lo:>5}-{hi or '':<5} mean converted layers {rep.conversions[sel].mean():5.2f} of {profile.n}")
