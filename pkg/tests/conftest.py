import numpy as np
import pytest

from nccipw import Cohort


@pytest.fixture
def toy_cohort():
    # six subjects, two markers, mixed events/censorings, no ties
    times = np.array([0.5, 0.8, 1.1, 1.4, 1.9, 2.3])
    deltas = np.array([1, 0, 1, 0, 1, 0])
    rng = np.random.default_rng(11)
    markers = rng.standard_normal((6, 2))
    return Cohort(times, deltas, markers)


def random_cohort(rng, n, p=2, with_match=False, censor_scale=1.0):
    """Small random survival cohort for property checks."""
    z = rng.standard_normal((n, p))
    t_event = rng.exponential(1.0, n) * np.exp(0.3 * z[:, 0] if p else 0.0)
    t_cens = rng.exponential(censor_scale, n) + 0.05
    times = np.minimum(t_event, t_cens)
    deltas = (t_event <= t_cens).astype(int)
    match = None
    if with_match:
        match = np.column_stack([rng.integers(0, 2, n).astype(float),
                                 rng.integers(0, 5, n).astype(float)])
    # at least one event and one censoring so the KM curves are nondegenerate
    deltas[0] = 1
    deltas[1] = 0
    return Cohort(times, deltas, z, match)
