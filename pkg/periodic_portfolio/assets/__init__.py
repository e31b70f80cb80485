# Adds the experiment assets to dagster. Makes visible in the Dagster UI
from .experiment import *  # noqa: F403
