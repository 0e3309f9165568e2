"""
SGD with momentum and L-BFGS on small test problems
===================================================
"""
import numpy as np

from pdegen.optim import LbfgsState, SgdState, lbfgs_step, sgd_step


def rosenbrock(th):
    x, y = th
    f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
    return f, np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])


th = np.array([-1.2, 1.0])
state = LbfgsState(history=10)
for k in range(1, 61):
    th = lbfgs_step(state, th, rosenbrock)
    if k % 10 == 0:
        print(f"L-BFGS iter {k:2d}: f = {rosenbrock(th)[0]:.3e}  evaluations {state.last_evals}  pairs {len(state.pairs)}")

th = np.array([-1.2, 1.0])
sgd = SgdState(lr=1e-3, momentum=0.9)
for k in range(1, 5001):
    th = sgd_step(sgd, th, rosenbrock(th)[1])
print(f"SGD after 5000 steps: f = {rosenbrock(th)[0]:.3e}")

# An ill-conditioned quadratic: L-BFGS needs only a handful of iterations
diag = np.array([1.0, 10.0])
th = np.ones(2)
state = LbfgsState()
for k in range(10):
    th = lbfgs_step(state, th, lambda t: (0.5 * t @ (diag * t), diag * t))
print("quadratic after 10 L-BFGS iterations:", np.linalg.norm(th))
