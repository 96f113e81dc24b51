"""A tour of the tensor engine: graphs, backward passes, gradient checks.

Run with: python3 demos/01_autodiff_basics.py
"""

import numpy as np

from shapeprior import Tensor, grad_check, no_grad


def main():
    # d/dx of (x^2 + 3x) is 2x + 3; check at x = 2
    x = Tensor(np.array(2.0), requires_grad=True)
    y = x * x + x * 3.0
    y.backward()
    print(f"f(x) = x^2 + 3x at x=2:  f = {y.item():.1f}, df/dx = {x.grad}")

    # gradients accumulate on leaves across backward calls, which is what a
    # gradient-accumulation training loop relies on
    x.zero_grad()
    for _ in range(4):
        (x * x).backward()
    print(f"four backward passes of x^2 accumulate: {x.grad} (expect 16.0)")

    # broadcasting folds gradients back to the leaf's shape
    w = Tensor(np.ones((3, 1)), requires_grad=True)
    out = (w * Tensor(np.ones((3, 5)))).sum()
    out.backward()
    print(f"broadcast (3,1)*(3,5): grad shape {w.grad.shape}, "
          f"each entry {w.grad[0, 0]} (expect 5)")

    # no_grad() turns the tape off, e.g. for validation passes
    with no_grad():
        z = x * x
    print(f"inside no_grad: requires_grad={z.requires_grad}")

    # and the checker that the whole package is built on: central finite
    # differences against backward(), in float64
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    res = grad_check(lambda a, b: (a @ b).sum(), [a, b], name="matmul-sum")
    print(res)


if __name__ == "__main__":
    main()
