"""Forward kinematics, the geometric Jacobian and one damped-least-squares solve."""

import numpy as np

from armplan.kinematics import IKParams, fk_matrix, jacobian, load_robot, solve_ik

np.set_printoptions(precision=4, suppress=True)
ur5 = load_robot("ur5")
q = ur5.home
T = fk_matrix(ur5, q)
print("tip position at home:", T[:3, 3])
print("Jacobian condition number:", np.linalg.cond(jacobian(ur5, q)))

target = T.copy()
target[:3, 3] += [0.05, -0.10, 0.08]
q_new, frames = solve_ik(ur5, q, target, IKParams())
print("joint change:", q_new - q)
print("reached:", frames[-1][:3, 3], "wanted:", target[:3, 3])
