"""Walk through how the prototype bank routes incoming vectors.

    python demos/prototype_bank.py

A vector close to an existing centroid (cosine >= tau1) joins that cluster,
one far from all of them (cosine < tau2) opens a new cluster, and anything in
between is dropped. Both levels evict oldest-first when full.
"""
import numpy as np

from s4m.atpm import PrototypeBank

bank = PrototypeBank(K1=3, K2=2, tau1=0.9, tau2=0.6, top_k=2)
bank.new_cluster(np.array([1.0, 0.0, 0.0]))

steps = [
    ("near the first centroid", [1.0, 0.1, 0.0]),
    ("orthogonal, new cluster", [0.0, 1.0, 0.0]),
    ("45 degrees, skipped", [1.0, 1.0, 0.0]),
    ("third direction", [0.0, 0.0, 1.0]),
    ("fourth cluster evicts the oldest", [-1.0, 0.0, 0.0]),
    ("two more members, K2=2 keeps the last two", [0.0, 1.0, 0.05]),
    ("", [0.0, 1.0, -0.05]),
]
for label, v in steps:
    route = bank.write_one(np.array(v))
    print(f"{route:8s} {label}")

print()
print(bank.dump())
