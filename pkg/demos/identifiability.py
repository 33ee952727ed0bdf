"""
Checking identifiability conditions
===================================

Given a loading matrix and its group structure, report which of the
checkable sufficient and necessary conditions hold.
"""

import numpy as np

from bifactor_alm import check_conditions, generate_bifactor_truth

# A generated truth: five items per group and every group loading at least
# 0.1 in magnitude. All conditions should hold.
truth = generate_bifactor_truth(J=15, G=3, rng_seed=0)
report = check_conditions(truth.Lambda_star, truth.labels, truth.Phi_star)
print("generated truth")
for key, value in report.to_dict().items():
    print(f"  {key}: {value}")

# Groups of two items, as in a small questionnaire. The stronger condition
# fails; the weaker necessary one can still hold.
rng = np.random.default_rng(1)
labels = np.repeat([1, 2, 3, 4], 2)
Lambda = np.zeros((8, 5))
Lambda[:, 0] = rng.uniform(0.3, 0.9, 8)
Lambda[np.arange(8), labels] = rng.uniform(0.4, 0.8, 8)
small = check_conditions(Lambda, labels)
print("\ngroups of two items")
print("  |Q_g|:", [len(q) for q in small.Q_sets])
print("  condition 2:", small.condition2)
print("  condition 3:", small.condition3)
print("  condition 5:", small.condition5)

# Make one group's loadings proportional to the general column. The block
# loses rank and the group drops out of H.
Lambda[labels == 1, 1] = 0.5 * Lambda[labels == 1, 0]
print("\nproportional block: H =", check_conditions(Lambda, labels).H_set)
