"""Build a tiny network with the numpy autodiff core and check its gradients.

Run: python3 walkthroughs/03_autodiff.py
"""

import numpy as np

from bevroad import tensor_core as tc
from bevroad.tensor_core import Tensor

rng = np.random.default_rng(0)
kernel = Tensor(rng.normal(size=(3, 3, 2, 4)) * 0.3, requires_grad=True)
bias = Tensor(np.zeros(4), requires_grad=True)
x = Tensor(rng.normal(size=(1, 8, 8, 2)))


def net(k):
    h = tc.relu(tc.conv2d(x, k, bias))
    return tc.sum(tc.sigmoid(tc.maxpool2(h)))


loss = net(kernel)
tc.backward(loss)
print("loss", float(loss.data))
print("kernel grad norm", np.linalg.norm(kernel.grad))

# central differences agree with the analytic gradient
err = tc.finite_diff_check(net, kernel.data)
print(f"relative error vs finite differences: {err:.2e}")

# parameters round-trip bit-exactly through the checkpoint format
tc.save_parameters("tiny.ckpt", {"kernel": kernel.data, "bias": bias.data}, {"note": "walkthrough"})
params, meta = tc.load_parameters("tiny.ckpt")
print("restored", sorted(params), meta, params["kernel"].tobytes() == kernel.data.tobytes())
