"""Numerical settings shared by the engine modules."""

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class SolverSettings:
    """
    Numerics of one experiment.

    Attributes:
        seed: Root seed; every stream is derived from it.
        paths: Monte Carlo paths per simulation.
        steps_per_period: Euler steps per evaluation period.
        grid_nodes: Nodes of the factor grid carrying A(y).
        grid_width: Half-width of the grid in factor standard deviations.
        policy_bins: Cells of the piecewise-constant policy / dual controls.
        tol: A-posteriori sup-norm tolerance of the fixed-point iteration.
        max_iterations: Iteration cap of the fixed-point iteration.
        seed_schedule: "rotate" draws fresh paths every sweep, "frozen"
            reuses one path set.
        policy_max_iter: Projected-gradient iterations of the policy search.
        policy_tol: Step-size stop of the policy search.
        dual_sweeps: Coordinate-descent sweeps of the dual search.
        dual_rel_tol: Relative improvement stop of the dual search.
        dual_max_evals: Objective evaluations per node in a dual step.
        eta_bound: Bound on |eta| in the dual search.
        periods: Evaluation periods of a rollout.
        x0: Initial wealth of a rollout.
        log_cap: Bound on |log X| before a wealth path is declared exploding.
        antithetic: Use antithetic Brownian pairs.
        workers: Threads used for random number generation.
        certify: Record the dual value next to the primal in Psi sweeps.
    """

    seed: int
    paths: int = 65536
    steps_per_period: int = 64
    grid_nodes: int = 41
    grid_width: float = 5.0
    policy_bins: int = 5
    tol: float = 1e-4
    max_iterations: int = 200
    seed_schedule: str = "rotate"
    policy_max_iter: int = 200
    policy_tol: float = 1e-8
    dual_sweeps: int = 30
    dual_rel_tol: float = 1e-7
    dual_max_evals: int = 60
    eta_bound: float = 2.0
    periods: int = 8
    x0: float = 1.0
    log_cap: float = 700.0
    antithetic: bool = True
    workers: int = 1
    certify: bool = True

    def with_overrides(self, **changes) -> "SolverSettings":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})
