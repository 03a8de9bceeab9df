"""Low-rank adapters: zero-start, training, and merging into the base.

The adapter adds scale * (x @ down) @ up next to a frozen projection.
Because up starts at zero the wrapped model is bit-identical to the
base model, and after training the whole update folds back into the
base matrix with no behavioral change.
"""
import numpy as np

from langlift import model as md
from langlift import numcore as nc

config = md.ModelConfig(vocab_size=50, n_layers=2, d_model=32, n_heads=2, d_ff=64,
                        max_seq_len=16, lora_rank=4, lora_alpha=8.0, lora_dropout=0.0)
weights = md.init_weights(config, seed=0)
adapters = md.init_adapters(config, seed=1)
ids = [3, 14, 15, 9, 2]

# %% a fresh adapter changes nothing, bit for bit
base_logits = md.forward(ids, weights).logits.data
wrapped_logits = md.forward(ids, weights, adapters).logits.data
print("zero-init adapter forward identical:",
      np.array_equal(base_logits, wrapped_logits))

# %% train only the adapters for a few steps
bundle = md.ModelBundle(config=config, weights=weights, adapters=adapters)
md.set_trainable(bundle, "lora")
frozen_before = {n: t.data.copy() for n, t in weights.base_matrices()}
for step in range(30):
    with nc.tape():
        out = md.forward(ids, weights, adapters)
        loss = nc.cross_entropy(out.logits, ids[1:] + [0])
        nc.backward(loss)
    for name, t in bundle.trainable_parameters():
        t.data = t.data - 0.05 * t.grad
        t.grad = None
print(f"loss after 30 adapter steps: {loss.item():.4f}")
print("base projections untouched:",
      all(np.array_equal(frozen_before[n], t.data) for n, t in weights.base_matrices()))

# %% merging folds scale * down @ up into the base weights
adapted = md.forward(ids, weights, adapters).logits.data
md.merge_adapters(weights, adapters)
merged = md.forward(ids, weights).logits.data
rel = np.abs(merged - adapted).max() / np.abs(adapted).max()
print(f"merged vs adapter forward, relative error: {rel:.2e}")

# %% a second merge is refused; the adapters were consumed
try:
    md.merge_adapters(weights, adapters)
except md.MergeError as e:
    print("second merge:", e)
