"""Walk through the autodiff tape and the model container.

Run with ``python3 demos/01_tape_and_models.py``.
"""
import numpy as np

from sparseft.autodiff import Tape, backward, finite_diff_grad
from sparseft.models import Checkpoint, ModelSpec, augment_equivalent, build_model, param_groups

# --- a two-layer computation by hand ---
tape = Tape()
X = tape.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
W = tape.leaf(np.array([[0.5], [-0.25]]))
h = tape.tanh(tape.matmul(X, W))
loss = tape.mse(h, np.zeros((2, 1)))
grads = backward(tape, loss)
print("loss", loss.data.item())
print("dL/dW", grads[W.node_id].ravel())

# --- the same model through the flat parameter vector ---
spec = ModelSpec(input_dim=3, hidden_dims=(5,), activation="tanh", head="classification", n_outputs=2)
model = build_model(spec, seed=0)
print("parameters:", model.n_params, "body:", model.n_body, "head:", model.head_indices.size)
for name, idx in sorted(param_groups(model).items()):
    if "." in name:
        print(f"  {name:14s} {idx.size:3d} params")

rng = np.random.default_rng(1)
Xs, ys = rng.standard_normal((8, 3)), rng.integers(0, 2, 8)
_, g = model.loss_and_grad(model.theta, Xs, ys)
fd = finite_diff_grad(lambda t: model.loss(t, Xs, ys), model.theta)
print("max |backward - finite diff|:", np.abs(g - fd).max())

# --- equivalent models: zero-initialized up-projections leave the function intact ---
ckpt = Checkpoint(spec, model.theta.copy())
probe = rng.standard_normal((100, 3))
for kind, dim in (("adapter", 2), ("lora", 1)):
    aug = augment_equivalent(ckpt, kind, dim, seed=3)
    diff = np.abs(aug.predict(probe) - model.predict(probe)).max()
    print(f"{kind:8s} extra params {aug.n_params - model.n_params:3d}, max output diff {diff}")
