"""Tape-based reverse-mode autodiff on a two-layer perceptron.

Builds a tiny regression model out of the tensor primitives, records the
forward pass on a Tape, replays it backwards for gradients, and confirms
every parameter gradient against central finite differences. Also shows
the recorded-elements counter, the activation-memory proxy the benchmark
harness reports.

Run: python demos/01_autograd_basics.py [--seed N]
"""

import argparse

import numpy as np

from hybridbert import Tape, Tensor, backward, gelu, matmul, zero_grads
from hybridbert.gradcheck import grad_check


def mlp(x, w1, b1, w2, b2):
    h = gelu(matmul(x, w1) + b1)
    return matmul(h, w2) + b2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    # float64 keeps the finite-difference comparison meaningful
    x = Tensor(rng.normal(size=(8, 5)).astype(np.float64))
    y = rng.normal(size=(8, 2)).astype(np.float64)
    params = {
        "w1": Tensor(rng.normal(scale=0.3, size=(5, 16)), requires_grad=True),
        "b1": Tensor(np.zeros(16), requires_grad=True),
        "w2": Tensor(rng.normal(scale=0.3, size=(16, 2)), requires_grad=True),
        "b2": Tensor(np.zeros(2), requires_grad=True),
    }

    with Tape() as tape:
        pred = mlp(x, *params.values())
        loss = ((pred - Tensor(y)) * (pred - Tensor(y))).mean()
        backward(loss)

    print(f"loss                {float(loss.data):.6f}")
    print(f"recorded elements   {tape.recorded_elements()}")
    for name, p in params.items():
        print(f"grad[{name}] mean abs   {np.abs(p.grad).mean():.6f}")

    # central differences, h=1e-5, relative error |a-n|/max(|a|,|n|,1e-8)
    zero_grads(params.values())
    err = grad_check(lambda *ts: mlp(x, *ts).mean(),
                     list(params.values()), h=1e-5)
    print(f"max relative error  {err:.3e}  ({'ok' if err < 1e-7 else 'FAIL'})")


if __name__ == "__main__":
    main()
