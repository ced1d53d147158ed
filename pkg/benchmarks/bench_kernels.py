"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Also times one training step of the two-cell classifier under each backend.
"""

import argparse
import json
import timeit

import numpy as np

from cmlsnn import _kernels


def cases(rng):
    # a B=32, T=4 batch through an 8-channel 32x32 cell
    x = rng.standard_normal((128, 8, 32, 32)).astype(np.float32)
    x2 = rng.standard_normal((4, 32 * 8 * 32 * 32)).astype(np.float32)
    pooled, idx = _kernels.BACKENDS["python"].maxpool_fwd(x, 2, 2)
    s, h, v = _kernels.BACKENDS["python"].lif_fwd(x2, 2.0, 1.0, 0.0, False, 4.0)
    # behind a 2x2 max pool only one position in four receives gradient
    sparse = np.where(rng.random(x2.shape) < 0.25, x2, 0).astype(np.float32)
    return {
        "im2col 128x8x32x32 k3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "maxpool_fwd 128x8x32x32 s2": lambda k: k.maxpool_fwd(x, 2, 2),
        "maxpool_bwd 128x8x32x32 s2": lambda k: k.maxpool_bwd(pooled, idx, x.shape, 2, 2),
        "avgpool_fwd 128x8x32x32 s2": lambda k: k.avgpool_fwd(x, 2, 2),
        "lif_fwd T=4 M=262144": lambda k: k.lif_fwd(x2, 2.0, 1.0, 0.0, False, 4.0),
        "lif_bwd T=4 full-bptt": lambda k: k.lif_bwd(x2, h, v, s, 2.0, 1.0, 0.0, 4.0, True, False, False),
        "lif_bwd T=4 detached 1/4 dense": lambda k: k.lif_bwd(sparse, h, v, s, 2.0, 1.0, 0.0, 4.0, False, False,
                                                                False),
    }


def bench_step(backend_name, repeat):
    """One forward+backward+Adam step, with kernels patched to ``backend_name``."""
    from cmlsnn import tensor, layers
    from cmlsnn.train import RunConfig, build_model, load_dataset
    from cmlsnn import functional as F
    from cmlsnn.autodiff import Tape
    from cmlsnn.optim import Adam

    module = _kernels.BACKENDS[backend_name]
    saved = {name: getattr(_kernels, name) for name in _kernels.__all__[2:]}
    for name in saved:
        setattr(_kernels, name, getattr(module, name))
    try:
        cfg = RunConfig(arch="baseline", synth_size=32, synth_per_class=16, timesteps=4)
        ds = load_dataset(cfg)
        model = build_model(cfg, ds)
        opt = Adam(model.parameters())
        xb, yb = ds.x_train[:32], ds.y_train[:32]

        def step():
            tape = Tape()
            loss = F.cross_entropy(model.forward(tape, xb), yb)
            tape.backward(loss)
            opt.step([tape.grad_of(p) for p in model.parameters()])

        return min(timeit.repeat(step, number=1, repeat=repeat))
    finally:
        for name, fn in saved.items():
            setattr(_kernels, name, fn)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    names = list(_kernels.BACKENDS)
    results = {}
    print(f"{'kernel':34s}" + "".join(f"{n:>12s}" for n in names) + "   speedup")
    for label, fn in cases(rng).items():
        times = {n: min(timeit.repeat(lambda: fn(_kernels.BACKENDS[n]), number=1, repeat=args.repeat))
                 for n in names}
        results[label] = times
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:34s}" + "".join(f"{times[n] * 1e3:10.2f}ms" for n in names) + f"   {speed:6.1f}x")
    step = {n: bench_step(n, args.repeat) for n in names}
    results["train step (B=32, T=4, 32x32)"] = step
    speed = step["python"] / step["cython"] if "cython" in step else float("nan")
    print(f"{'train step B=32 T=4 32x32':34s}" + "".join(f"{step[n] * 1e3:10.2f}ms" for n in names)
          + f"   {speed:6.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
