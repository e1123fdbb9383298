"""Tour of the tensor engine: tapes, gradients, and checkpoints.

Run with: python3 demos/autodiff_basics.py
"""

import os
import tempfile

import numpy as np

from rmot import tensor as T


def main():
    # Every differentiable value is a Tensor recorded on the active tape.
    with T.fresh_tape():
        x = T.tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
        w = T.tensor(np.array([[0.5], [-0.25]]), requires_grad=True)
        y = T.relu(T.matmul(x, w) + 1.0)
        loss = T.tsum(y * y)
        print("forward value:", float(loss.data))

        T.backward(loss)
        print("d loss / d x:\n", x.grad)
        print("d loss / d w:\n", w.grad)

    # grad_check compares the tape's gradient against central differences.
    with T.fresh_tape():
        probe = T.tensor(np.linspace(-1.0, 1.0, 6).reshape(2, 3), requires_grad=True)

        def f(t):
            return T.tsum(T.sigmoid(T.matmul(t, T.permute(t, (1, 0)))))

        err = T.grad_check(f, probe)
        print(f"max relative gradient error: {err:.2e} (target <= 1e-4)")

    # Named tensors round-trip through the binary checkpoint format bit-exactly.
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "demo.ckpt")
        T.save_tensors(path, {"w": w, "count": np.array(3.0)})
        back = T.load_tensors(path)
        print("checkpoint round-trip exact:", np.array_equal(back["w"], w.data))


if __name__ == "__main__":
    main()
