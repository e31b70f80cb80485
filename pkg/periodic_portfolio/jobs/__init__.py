"""
Asset jobs over the experiment graph.

``solve_job`` stops at the policy table, ``simulate_job`` and ``verify_job``
reuse the artifacts it wrote, and ``all_assets_job`` runs the chain end to end.
"""

from dagster import (
    AssetSelection,
    Backoff,
    Jitter,
    RetryPolicy,
    define_asset_job,
)

from ..assets.experiment import (
    assumption_report,
    experiment_config,
    fixed_point_solution,
    periodic_policy,
    rollout_summary,
    verification_report,
)

# Retries cover transient I/O; assumption and verification failures raise
# Failure(allow_retries=False)
DEFAULT_RETRY_POLICY = RetryPolicy(
    max_retries=2,
    delay=10,
    backoff=Backoff.EXPONENTIAL,
    jitter=Jitter.PLUS_MINUS,
)

solve_job = define_asset_job(
    name="solve_job",
    description="Check the assumptions, solve for A* and tabulate the policy",
    selection=AssetSelection.assets(
        experiment_config,
        assumption_report,
        fixed_point_solution,
        periodic_policy,
    ),
    op_retry_policy=DEFAULT_RETRY_POLICY,
)

simulate_job = define_asset_job(
    name="simulate_job",
    description="Roll the solved policy forward and summarise the paths",
    selection=AssetSelection.assets(rollout_summary),
    op_retry_policy=DEFAULT_RETRY_POLICY,
)

verify_job = define_asset_job(
    name="verify_job",
    description="Run the verification checks on a solved experiment",
    selection=AssetSelection.assets(verification_report),
    op_retry_policy=DEFAULT_RETRY_POLICY,
)

all_assets_job = define_asset_job(
    name="all_assets_job",
    description="Validate, solve, simulate and verify one experiment",
    selection=AssetSelection.all(),
    op_retry_policy=DEFAULT_RETRY_POLICY,
)
