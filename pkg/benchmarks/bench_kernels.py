"""Compare the numba kernels against their numpy fallbacks.

Kernel timings call both implementations in-process. The end-to-end number
runs one training step in a subprocess per path, toggled by FATE_NUMBA.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fate import _accel

STEP_SNIPPET = """
import time, numpy as np
from fate import vit, vision, toy, data
from fate.optim import OptimizerState
aux, train, test = toy.make_toy_task(0, aux_per_class=2, train_per_class=40, test_per_class=2)
bb = vit.VisionBackbone().freeze()
split = data.make_one_shot_split(train, 1, 0)
model = vit.PromptModel(bb)
model.dp = vit.PromptSet(12, bb.d, "DP", np.random.default_rng(0), trainable=False)
cfg = vision.ClassificationConfig()
model.cp = vit.PromptSet(12, bb.d, "CP", np.random.default_rng(1))
model.head = vision.ClassifierHead(bb.d, train.num_classes)
sampler = data.BatchSampler(split, train.labels, train.num_classes, 32, 1.0, np.random.default_rng(0))
opt = OptimizerState(total_steps=1000, lr0=0.03)
vision.classification_step(model, train, sampler.sample(), opt, cfg, 0)  # warm-up / jit
t = time.perf_counter()
for _ in range({steps}):
    vision.classification_step(model, train, sampler.sample(), opt, cfg, 0)
print((time.perf_counter() - t) / {steps})
"""


def kernel_cases(rng):
    x = rng.standard_normal((64 * 41, 64)).astype(np.float32)
    h = rng.standard_normal((64 * 41, 256)).astype(np.float32)
    s = rng.standard_normal((64 * 4 * 41, 41)).astype(np.float32)
    img = rng.random((28, 28, 1)).astype(np.float32)
    inv = np.array([[0.9, 0.3, 0.0], [-0.3, 0.9, 0.0]])
    xhat, rstd = _accel.np_layernorm_fwd(x, 1e-5)
    y = _accel.np_softmax_fwd(s)
    cases = {
        "layernorm_fwd": ((x, np.float32(1e-5)), _accel.np_layernorm_fwd),
        "layernorm_bwd": ((x, xhat, rstd), _accel.np_layernorm_bwd),
        "gelu_fwd": ((h,), _accel.np_gelu_fwd),
        "gelu_bwd": ((h, h), _accel.np_gelu_bwd),
        "softmax_fwd": ((s,), _accel.np_softmax_fwd),
        "softmax_bwd": ((s, y), _accel.np_softmax_bwd),
        "warp_nearest": ((img, inv, np.float32(0.0)), _accel.np_warp_nearest),
    }
    return cases


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5, help="training steps per end-to-end timing")
    args = ap.parse_args()

    if not _accel.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (inputs, np_fn) in kernel_cases(rng).items():
        nb_fn = getattr(_accel, f"_nb_{name}")
        nb_fn(*inputs)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: np_fn(*inputs), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: nb_fn(*inputs), number=1, repeat=args.repeat))
        print(f"{name:<16}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.2f}x")

    print("\nend-to-end classification step (B=32, mu=1, DP+CP):")
    code = STEP_SNIPPET.format(steps=args.steps)
    for flag in ("0", "1"):
        env = dict(os.environ, FATE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        label = "numba" if flag == "1" else "numpy"
        print(f"  FATE_NUMBA={flag} ({label}): {float(out.stdout.strip()) * 1e3:.1f} ms/step")


if __name__ == "__main__":
    main()
