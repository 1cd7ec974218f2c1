"""
Penalized clustering on a 10 x 10 grid
======================================

A 4-neighbour grid graph is clustered into 15 nodes. Some voxel pairs are
marked as "keep apart": the whole first row against the whole second row,
and one horizontal neighbour pair in every row. Raising lambda pushes those
pairs into different nodes, at the price of nodes that are no longer
connected on the grid.
"""
import numpy as np

from sbparcel.simulation import LatticeSpec, run_lattice_experiment

spec = LatticeSpec()
runs = run_lattice_experiment(spec, K=15, lambdas=(0.0, 5.0, 10.0))

for run in runs:
    print(f"\nlambda = {run['lambda']:g}")
    print(np.array2string(run["labels"], formatter={"int": lambda v: f"{v:2d}"}))
    print("forbidden pairs sharing a node:", run["co_clustered_forbidden_pairs"])
    print("nodes split into pieces:       ", run["non_contiguous_nodes"])
    print("total penalty:                 ", run["total_penalty"])
