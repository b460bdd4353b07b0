"""Response probabilities do not change when items and abilities move together.

A 2D simple-structure MC item and a 5-category CR item are re-expressed under
a rotation-plus-scaling transform. The matching theta moves with the same
transform, and every probability agrees to machine precision.
"""

import numpy as np

from mirtlink import DichotomousItem, Family, Format, PolytomousItem, Transform, transform_item, transform_theta
from mirtlink.model import prob_dichotomous, prob_polytomous

mc = DichotomousItem("mc1", (1.2, 0.0), -0.3, 0.18, Format.MC, Family.SIMPLE)
cr = PolytomousItem("cr1", (0.0, 0.9), (0.8, 0.1, -0.4, -1.0), Format.CR, Family.SIMPLE)
t = Transform([[1.1, 0.2], [-0.1, 0.85]], [0.3, -0.2])
theta = np.array([0.5, -1.0])

print("transform A =", t.A.tolist(), "B =", t.B.tolist())
print("moved MC slopes:", np.round(transform_item(mc, t).a, 4), "(the zero loading is no longer zero)")
print("P(MC) before/after:", prob_dichotomous(mc, theta), prob_dichotomous(transform_item(mc, t), transform_theta(theta, t)))
before = prob_polytomous(cr, theta)
after = prob_polytomous(transform_item(cr, t), transform_theta(theta, t))
print("CR category probabilities:", np.round(before, 6))
print("max |difference|:", float(np.abs(before - after).max()))
