"""Library-wide numerical tolerances.

All thresholds used by the recurrence engine, the operator assembly and
the solvers live in one record so they can be adjusted together.
"""

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class Tolerances:
    bootstrap: float = 1e-13       # Stieltjes refinement stopping threshold
    bootstrap_max_refine: int = 8  # number of x1.5 discretization refinements allowed
    chi_guard: float = 1e-14       # smallest admissible |chi_n| in a lift
    left_inverse: float = 1e-13    # D_n^T A_n = I check
    boundary_clamp: float = 1e-12  # |t| slack tolerated at the edge of [gamma, delta]
    solve_residual: float = 1e-11  # relative residual certified by BBB solves
    refine_steps: int = 3          # iterative refinement sweeps
    quad_guard: int = 2            # guard points added to exact Gauss orders
    qr_fallback_max: int = 6000    # largest system retried with dense QR after an LU miss


TOL = Tolerances()


def set_tolerances(**changes):
    """Replace entries of the global tolerance record and return the new one."""
    global TOL
    TOL = replace(TOL, **changes)
    return TOL


def get_tolerances():
    return TOL
