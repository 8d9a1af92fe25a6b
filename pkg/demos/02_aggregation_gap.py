"""Why averaging two-factor adapters is not the same as averaging models.

FedAvg averages the factors B and A separately, but the model update is
their product: mean(B) @ mean(A) differs from mean(B @ A) as soon as clients
diverge. With A frozen at its shared initialization, the update is linear in
B and the two averages coincide exactly.
"""

import dataclasses

import numpy as np

from fedtune.adapters import AdapterConfig, AdapterKind, effective_weight, init_adapter
from fedtune.federation import aggregation_gap, fedavg
from fedtune.linalg import RngStream

# Scalar example first: two clients, shared base 0, scaling 1.
cfg = AdapterConfig(kind=AdapterKind.LORA, rank=1, alpha=1.0)
base = init_adapter(cfg, np.array([[0.0]]))
c1 = dataclasses.replace(base, b=np.array([[1.0]]), a=np.array([[2.0]]))
c2 = dataclasses.replace(base, b=np.array([[3.0]]), a=np.array([[4.0]]))

merged = fedavg([c1, c2], [0.5, 0.5])
print("two-factor scalar example:")
print("  client shifts:           1*2 = 2 and 3*4 = 12, mean = 7")
print(f"  after factor averaging:  mean(B)*mean(A) = {effective_weight(merged)[0, 0]:g}")
print(f"  aggregation gap:         {aggregation_gap([c1, c2], [0.5, 0.5]):g}\n")

# The frozen-A version of the same situation has no gap at all.
fcfg = AdapterConfig(kind=AdapterKind.FFA_LORA, rank=1, alpha=1.0)
fbase = init_adapter(fcfg, np.array([[0.0]]))
fbase = dataclasses.replace(fbase, a=np.array([[2.0]]))
f1 = dataclasses.replace(fbase, b=np.array([[1.0]]))
f2 = dataclasses.replace(fbase, b=np.array([[3.0]]))
print("frozen-A scalar example (shared A = 2):")
print(f"  aggregation gap:         {aggregation_gap([f1, f2], [0.5, 0.5]):g}\n")

# And it stays exactly zero for arbitrary random client states.
rng = RngStream(7, "demo-gap")
d, k, r, clients = 16, 8, 4, 5
lcfg = AdapterConfig(kind=AdapterKind.LORA, rank=r, alpha=float(r), seed=3)
fcfg = AdapterConfig(kind=AdapterKind.FFA_LORA, rank=r, alpha=float(r), seed=3)
w0 = rng.normal((d, k))
lora_base = init_adapter(lcfg, w0)
ffa_base = init_adapter(fcfg, w0)
weights = [1 / clients] * clients

print(f"{clients} random clients, {d}x{k} base, rank {r}, 20 draws:")
worst_lora, worst_ffa = 0.0, 0.0
for _ in range(20):
    lora_states = [
        dataclasses.replace(lora_base, b=rng.normal((d, r)), a=rng.normal((r, k)))
        for _ in range(clients)
    ]
    ffa_states = [dataclasses.replace(ffa_base, b=rng.normal((d, r)))
                  for _ in range(clients)]
    worst_lora = max(worst_lora, aggregation_gap(lora_states, weights))
    worst_ffa = max(worst_ffa, aggregation_gap(ffa_states, weights))
print(f"  max two-factor gap: {worst_lora:.3f}")
print(f"  max frozen-A gap:   {worst_ffa:.2e}  (exact commutation)")
