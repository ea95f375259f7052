"""Run the built-in oracles that guard the numerical core.

Four independent lines of defense: finite differences against the tape
gradients, closed-form contrastive loss values, the calculus behind the
optimal gate argument (checked analytically and with an off-the-shelf root
finder), and first-order bounds on the discretization.
"""

from rclmamba import (
    build_rcl_graph,
    check_gate_stationarity,
    check_zoh_bounds,
    closed_form_cases,
    finite_diff_check,
    gate_gradient,
    optimal_gates,
    run_suite,
)
from rclmamba.verify import sigma_sweep

# 1. the whole contrastive objective, differentiated end to end
g = build_rcl_graph(seed=0)
report = finite_diff_check(g, max_coords=40, seed=0)
print(f"finite differences vs tape: max abs err {report.max_abs_err:.3e} "
      f"over {report.n_coords} coordinates")

# 2. gate stationarity: the closed-form (a*, b*) really is a critical point
a_star, b_star, bound = optimal_gates(h=0.8, x=0.5, sigma=0.3, x_next=0.9)
ga, gb = gate_gradient(a_star, b_star, h=0.8, x=0.5, sigma=0.3, x_next=0.9)
print(f"\ngate optimum a*={a_star:.4f} b*={b_star:.4f}  gradient ({ga:.2e}, {gb:.2e})")
print("stationarity over 200 random instances:",
      check_gate_stationarity(n_instances=200, seed=2).ok())

# the optimal input gate shrinks as augmentation noise grows
print("\nsigma    b*")
for sigma, _, b_s, _ in sigma_sweep(sigmas=[0.0, 0.2, 0.4, 0.8]):
    print(f"{sigma:5.2f}  {b_s:8.4f}")

# 3. loss values with hand-computable answers
print("\nclosed forms:")
for case in closed_form_cases():
    print(f"  {case.name:14s} expected {case.expected:.6f}  "
          f"computed {case.computed:.6f}  err {case.error:.1e}")

# 4. discretization stays within the first-order hold bounds
zoh = check_zoh_bounds(seed=4)
print(f"\nzero-order hold bounds hold: {zoh.all_within} "
      f"(worst excess {zoh.worst_excess:.2e})")

# the same checks are packaged as suites for the command line
result = run_suite("closed-form", seed=0)
print(f"\nsuite {result.suite}: "
      f"{sum(c.passed for c in result.checks)}/{len(result.checks)} checks passed")
