"""Descriptor size and PCA cost: NetVLAD against grouped OptLAD.

For C = 1024 features, standard NetVLAD with K = 128 clusters gives a
131072-d descriptor, and projecting it to 4096 dims costs about 537M PCA
weights. OptLAD with K = 64, expansion 2 and 8 groups gives 16384 dims,
a quarter of the PCA cost of NetVLAD at the same K.
"""

from clusvpr.optlad import format_param_report, param_count_report

report = param_count_report(channels=1024, clusters=64, expansion=2, groups=8, out_dim=4096, standard_clusters=128)
print(format_param_report(report))
