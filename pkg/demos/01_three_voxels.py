"""
Three voxels, two ways to group them
====================================

Grouping voxels by how strongly they are connected is not the same as
grouping them so that the edges *between* groups track an outcome.
"""
from sbparcel.simulation import toy_three_voxel

rep = toy_three_voxel()

for e in rep["edges"]:
    print(f"{e['pair'][0]}-{e['pair'][1]}  strength {e['strength']}  association {e['association']}")

# merging the strongest pair leaves only weakly associated edges between nodes
print("homogeneity grouping:", rep["homogeneity_partition"], "->", rep["homogeneity_score"])

# keeping the most associated edge between nodes does better
print("supervised grouping: ", rep["supervised_partition"], "->", rep["supervised_score"])
print("all singletons:      ", rep["singletons_score"])
