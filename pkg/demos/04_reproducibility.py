"""
How stable are the nodes?
=========================

Refit on 20 random 75% subsamples of subjects and match each node of the
first fit to its best Dice partner in the others.
"""
from sbparcel.evaluation import reproducibility
from sbparcel.simulation import synth_cohort, three_block_spec

cohort = synth_cohort(three_block_spec(seed=0))
rep = reproducibility(cohort, K=3, lambda_star=0.0, n_samples=20, fraction=0.75, seed=0)

print("per-node mean Dice:", [round(x, 3) for x in rep.per_node_mean_dice])
print("size-weighted mean:", round(rep.weighted_mean_dice, 3))
print("by voxel tag:      ", rep.per_group_mean_dice)
print("node sizes in the reference fit:", rep.node_size_summary[0]["all"])
