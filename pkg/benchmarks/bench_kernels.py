"""Compare the compiled row kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--dtype float32|float64]

Prints per-kernel best-of-N timings for both backends, the speedup, and
the wall time of one desk-scale supervised training step per backend.
"""

import argparse
import timeit

import numpy as np

from vitapes import kernels
from vitapes.data import GenConfig, generate_dataset, stack
from vitapes.encoder import build_model, named_config
from vitapes.objectives import supervised_loss
from vitapes.optim import AdamW


def kernel_cases(dtype, rng):
    # shapes seen in a desk forward pass: attention rows, token rows, MLP rows
    scores = rng.normal(size=(32 * 2 * 32, 32)).astype(dtype)
    tokens = rng.normal(size=(32 * 32, 64)).astype(dtype)
    hidden = rng.normal(size=(32 * 32, 256)).astype(dtype)
    g, b = np.ones(64, dtype), np.zeros(64, dtype)
    y = kernels.softmax(scores)
    _, mean, rstd = kernels.layer_norm(tokens, g, b, 1e-5)
    return {
        "softmax fwd": lambda: kernels.softmax(scores),
        "softmax bwd": lambda: kernels.softmax_grad(y, scores),
        "log_softmax": lambda: kernels.log_softmax(scores),
        "layernorm fwd": lambda: kernels.layer_norm(tokens, g, b, 1e-5),
        "layernorm bwd": lambda: kernels.layer_norm_grad(tokens, tokens, mean, rstd, g),
        "gelu fwd": lambda: kernels.gelu(hidden),
        "gelu bwd": lambda: kernels.gelu_grad(hidden, hidden),
    }


def best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def train_step_time(repeat):
    pairs = generate_dataset(GenConfig(image_side=32, samples_per_class=8))
    batch = stack(pairs[:32])
    model = build_model(named_config("desk"), 0)
    opt = AdamW(model.named_parameters(), lr=1e-3)

    def step():
        opt.zero_grad()
        supervised_loss(model, batch).backward()
        opt.step()

    step()
    return best(step, repeat, 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    ap.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    args = ap.parse_args()

    try:
        kernels.use_backend("cython")
        backends = ("python", "cython")
    except ImportError:
        print("compiled extension not built; timing the numpy fallback only")
        backends = ("python",)

    rng = np.random.default_rng(0)
    times = {}
    for name in backends:
        kernels.use_backend(name)
        cases = kernel_cases(np.dtype(args.dtype), rng)
        for label, fn in cases.items():
            times[(label, name)] = best(fn, args.repeat, args.number)
        times[("train step (desk, B=32)", name)] = train_step_time(args.repeat)

    labels = list(dict.fromkeys(k[0] for k in times))
    head = f"{'kernel':26s}" + "".join(f"{b:>12s}" for b in backends)
    if len(backends) == 2:
        head += f"{'speedup':>10s}"
    print(head)
    for label in labels:
        row = f"{label:26s}" + "".join(f"{times[(label, b)] * 1e3:10.3f}ms" for b in backends)
        if len(backends) == 2:
            row += f"{times[(label, 'python')] / times[(label, 'cython')]:9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
