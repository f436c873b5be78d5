"""How the dual solvers compare on one random instance.

The hybrid solver runs L-BFGS until every Laguerre cell receives mass and
then switches to Newton steps on the sparse Hessian; the first-order
methods only see gradients.  The table reports the gradient norm reached
within a fixed iteration budget.

    python demos/02_solver_comparison.py [n] [p] [iterations]
"""
import sys

from polyot.bench import compare_solvers, format_rows

n = int(sys.argv[1]) if len(sys.argv) > 1 else 500
p = int(sys.argv[2]) if len(sys.argv) > 2 else 50
iterations = int(sys.argv[3]) if len(sys.argv) > 3 else 300

histories = {}
rows = compare_solvers(n, p, seeds=(0,), iterations=iterations, histories=histories)
print(format_rows(rows))

hybrid = histories[("hybrid", 0)]
print("\nhybrid endgame (iteration, branch, |grad|):")
for r in hybrid.records[-8:]:
    print(f"  {r.iteration:4d}  {r.branch:12s}  {r.grad_norm:.3e}")
