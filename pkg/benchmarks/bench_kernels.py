"""Compare the Cython and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--number 200]

Times every kernel on the shapes the models actually use, then one bridged
closed-loop episode end to end. Prints a table of per-call microseconds.
"""
import argparse
import timeit

import numpy as np

from latentbridge import env as envmod
from latentbridge import scheduler as sch
from latentbridge.pipeline import new_bridge
from latentbridge.teacher import Backbone, BackboneConfig, Head, HeadConfig, Policy
from latentbridge.tensorkit import kernels


def kernel_cases(g):
    x = g.standard_normal((64, 10, 32))        # bridge/backbone rows
    s = g.standard_normal((64, 4, 10, 10))     # attention scores
    k = g.standard_normal((64, 4, 10, 8))      # per-head keys
    ang = g.uniform(0, 3, (10, 8))
    cos, sin = np.cos(ang), np.sin(ang)
    xh, rs = kernels.layernorm_fwd(x, 1e-8)
    y = kernels.softmax_fwd(s)
    return {
        "layernorm_fwd": lambda: kernels.layernorm_fwd(x, 1e-8),
        "layernorm_bwd": lambda: kernels.layernorm_bwd(x, xh, rs),
        "softmax_fwd": lambda: kernels.softmax_fwd(s),
        "softmax_bwd": lambda: kernels.softmax_bwd(s, y),
        "gelu_fwd": lambda: kernels.gelu_fwd(x),
        "gelu_bwd": lambda: kernels.gelu_bwd(x, x),
        "rope_fwd": lambda: kernels.rope_fwd(k, cos, sin),
        "rope_inv": lambda: kernels.rope_inv(k, cos, sin),
    }


def episode_case():
    backbone = Backbone(BackboneConfig())
    policy = Policy(backbone, Head(HeadConfig(), backbone.cfg))
    bridge = new_bridge(policy)
    g = np.random.default_rng(0)
    for name in bridge.store.names():   # nonzero so the bridge path does real work
        if not np.any(bridge.store[name]):
            bridge.store[name][...] = g.standard_normal(bridge.store[name].shape) * 0.05
    bundle = sch.PolicyBundle(policy, bridge)
    task = envmod.preset("base")
    return lambda: sch.run_episode(bundle, sch.SchedulePolicy("fixed", 3), task, 0)


def bench(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number * 1e6


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args()
    backends = kernels.available_backends()
    results = {}
    prev = kernels.backend_name()
    try:
        for b in backends:
            kernels.use_backend(b)
            cases = kernel_cases(np.random.default_rng(0))
            results[b] = {n: bench(fn, args.repeat, args.number) for n, fn in cases.items()}
            results[b]["episode (fixed:3)"] = bench(episode_case(), args.repeat, 1)
    finally:
        kernels.use_backend(prev)
    names = list(results[backends[0]])
    head = f"{'kernel':<20s}" + "".join(f"{b + ' us':>14s}" for b in backends)
    if "native" in results and "python" in results:
        head += f"{'speedup':>10s}"
    print(head)
    for n in names:
        line = f"{n:<20s}" + "".join(f"{results[b][n]:>14.1f}" for b in backends)
        if "native" in results and "python" in results:
            line += f"{results['python'][n] / results['native'][n]:>9.2f}x"
        print(line)
    if len(backends) == 1:
        print(f"(only the {backends[0]} backend is available)")


if __name__ == "__main__":
    main()
