"""Reference projections for uncentered PCA, from numpy's LAPACK SVD."""

import json
import os

import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))
rng = np.random.default_rng(7)
# anisotropic so the leading components are well separated
x = rng.standard_normal((200, 32)) * np.linspace(3.0, 0.1, 32) + 0.5
k = 5
u, s, vt = np.linalg.svd(x, full_matrices=False)
proj = x @ vt[:k].T
with open(os.path.join(HERE, "oracle.json"), "w") as f:
    json.dump({"x": x.tolist(), "k": k, "singular_values": s.tolist(), "basis": vt[:k].tolist(),
               "projections": proj.tolist()}, f)
