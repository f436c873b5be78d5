"""Two instances whose transport cost is known by hand.

One Dirac at the origin and a unit segment starting there: every point of
the segment travels to the origin, so W2^2 = int_0^1 t^2 dt = 1/3.

Two half-mass Diracs at 0 and 1 and the segment [-1/2, 3/2] with uniform
density: each Dirac collects the half of the segment within 1/2 of it,
so W2^2 = 1/12 and the dual is already optimal at phi = 0.
"""
import numpy as np

from polyot import AtomicMeasure, PolylineMeasure, evaluate, hessian

one = evaluate(AtomicMeasure([[0, 0]], [1.0]), PolylineMeasure([[0, 0], [1, 0]], [1.0]),
               np.zeros(1))
print(f"single Dirac:  W2^2 = {one.cost:.16f}   (1/3 = {1 / 3:.16f})")

mu = AtomicMeasure([[0, 0], [1, 0]], [0.5, 0.5])
nu = PolylineMeasure([[-0.5, 0], [1.5, 0]], [1.0])
two = evaluate(mu, nu, np.zeros(2))
print(f"two Diracs:    W2^2 = {two.cost:.16f}   (1/12 = {1 / 12:.16f})")
print(f"               gradient at phi = 0: {two.gradient}")
print("               segment cells:", two.trace.as_lists()[0])

# raising phi_0 enlarges the first Laguerre cell along the segment
shifted = evaluate(mu, nu, np.array([0.1, 0.0]))
print(f"phi = (0.1, 0): cell masses {shifted.cell_mass}, gradient {shifted.gradient}")
print("Hessian at phi = 0:\n", hessian(mu, nu, np.zeros(2), two.trace).toarray())
