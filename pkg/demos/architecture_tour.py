# Walk the default model: layer trace, skip connections, parameter budget.

import numpy as np

from cropstress.model import build_model, count_parameters, expected_parameter_count
from cropstress.tensor import Tensor

model = build_model(seed=0)

# one train-mode forward records (name, shape) at every stage
trace = []
x = np.random.default_rng(0).uniform(0, 1, size=(1, 224, 224, 3)).astype(np.float32)
model.forward(Tensor(x, dtype=np.float32), mode="train", trace=trace)

print("stage trace for a 224x224 RGB input:")
for name, shape in trace:
    print(f"  {name:<18} {tuple(shape)}")

# identity skips exist only where stride is 1 and channels are preserved
print("skip connections per bottleneck:", model.skip_flags())

trainable, frozen, rows = count_parameters(model)
print(f"\ntrainable parameters:     {trainable}")
print(f"non-trainable (BN stats): {frozen}")
print(f"closed-form prediction:   {expected_parameter_count(model.config)}")

# the ten largest tensors dominate the budget
rows = sorted(rows, key=lambda r: -r[2])[:10]
print("\nlargest tensors:")
for name, shape, count, is_trainable in rows:
    print(f"  {name:<34} {str(shape):<18} {count:>7}")
