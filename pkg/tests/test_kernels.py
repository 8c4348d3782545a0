import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escada.errors import DimensionError, SaturationError
from escada.kernels import (
    AbsoluteDoseMetric,
    KernelDoseMetric,
    KernelSpec,
    LipschitzCertificate,
    inverse_dose_metric,
    kernel_eval,
    kernel_matrix,
    kernel_metric,
)

SE1 = KernelSpec("squared-exponential", (1.0,), 1.0)
LAP1 = KernelSpec("laplacian", (1.0,), 1.0)

# kernel-consistent SE metric: q(r) = sqrt(2 - 2 exp(-r^2 / 2))
Q_SE_1 = 0.887095643419994
Q_SE_SQRT2 = 1.1243847729568004


def test_kernel_diagonal_is_variance():
    spec = KernelSpec("squared-exponential", (2.0, 3.0, 0.5), 4.0)
    assert kernel_eval(spec, [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 4.0


def test_se_and_laplacian_hand_values():
    assert kernel_eval(SE1, [0.0], [1.0]) == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert kernel_eval(SE1, [0.0], [1.0]) == pytest.approx(0.60653, abs=1e-5)
    assert kernel_eval(LAP1, [0.0], [2.0]) == pytest.approx(math.exp(-2.0), abs=1e-15)


def test_kernel_dimension_mismatch():
    spec = KernelSpec("laplacian", (1.0, 1.0, 1.0), 1.0)
    with pytest.raises(DimensionError):
        kernel_eval(spec, [0.0, 0.0], [0.0, 0.0, 0.0])
    with pytest.raises(DimensionError):
        kernel_matrix(spec, np.zeros((3, 2)), np.zeros((2, 3)))


def test_metric_identical_points_zero():
    spec = KernelSpec("squared-exponential", (10.0, 20.0, 3.0), 9.0)
    assert kernel_metric(spec, [40.0, 120.0, 2.0], [40.0, 120.0, 2.0]) == 0.0


def test_metric_frozen_values():
    assert kernel_metric(SE1, [0.0], [1.0]) == pytest.approx(Q_SE_1, abs=1e-12)
    assert kernel_metric(SE1, [0.0], [math.sqrt(2.0)]) == pytest.approx(Q_SE_SQRT2, abs=1e-12)
    # sqrt(2 - 2/e) is reached at |d1 - d2| = sqrt(2) under the kernel's own scaling
    assert Q_SE_SQRT2 == pytest.approx(math.sqrt(2 - 2 * math.exp(-1)), abs=1e-15)


def test_metric_approaches_supremum():
    spec = KernelSpec("squared-exponential", (1.0,), 2.5)
    assert kernel_metric(spec, [0.0], [50.0]) == pytest.approx(math.sqrt(5.0), abs=1e-12)


def test_inverse_frozen_values():
    assert inverse_dose_metric(SE1, (), 0.0) == 0.0
    assert inverse_dose_metric(SE1, (), math.sqrt(2 - 2 * math.exp(-1))) == pytest.approx(math.sqrt(2), abs=1e-12)
    assert inverse_dose_metric(SE1, (), Q_SE_1) == pytest.approx(1.0, abs=1e-12)


def test_inverse_saturation():
    with pytest.raises(SaturationError):
        inverse_dose_metric(SE1, (), math.sqrt(2.0))
    assert KernelDoseMetric(SE1).radius(np.array([2.0]))[0] == np.inf


def test_laplacian_inverse_matches_bisection():
    spec = KernelSpec("laplacian", (5.0, 5.0, 1.7), 3.0)
    ctx = (30.0, 120.0)

    def q(r):
        return kernel_metric(spec, [*ctx, 0.0], [*ctx, r])

    for rho in np.linspace(0.05, 0.98 * math.sqrt(6.0), 25):
        lo, hi = 0.0, 1.0
        while q(hi) < rho:
            hi *= 2
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if q(mid) < rho else (lo, mid)
        assert inverse_dose_metric(spec, ctx, rho) == pytest.approx(0.5 * (lo + hi), rel=1e-9, abs=1e-12)


vec3 = st.lists(st.floats(-50, 50, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=200, deadline=None)
@given(vec3, vec3, vec3, st.sampled_from(["squared-exponential", "laplacian"]))
def test_metric_axioms(a, b, c, family):
    spec = KernelSpec(family, (3.0, 7.0, 2.0), 2.0)
    ab = kernel_metric(spec, a, b)
    assert ab >= 0
    assert ab == pytest.approx(kernel_metric(spec, b, a), abs=1e-12)
    assert ab <= kernel_metric(spec, a, c) + kernel_metric(spec, c, b) + 1e-9
    assert ab <= math.sqrt(2 * spec.variance) + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 20.0), st.sampled_from(["squared-exponential", "laplacian"]))
def test_dose_metric_round_trip(r, family):
    metric = KernelDoseMetric(KernelSpec(family, (1.0, 1.0, 3.0), 4.0))
    q = float(metric.forward(r))
    if q < 0.999 * metric.supremum:
        assert float(metric.radius(q)) == pytest.approx(r, rel=1e-8, abs=1e-9)


def test_dose_metric_matches_kernel_metric():
    spec = KernelSpec("squared-exponential", (40.0, 60.0, 6.0), 22500.0)
    metric = KernelDoseMetric(spec)
    for r in (0.0, 0.3, 2.0, 9.0):
        direct = kernel_metric(spec, [50.0, 120.0, 1.0], [50.0, 120.0, 1.0 + r])
        assert float(metric.forward(r)) == pytest.approx(direct, rel=1e-12, abs=1e-12)


def test_absolute_metric_and_certificate():
    m = AbsoluteDoseMetric(2.0)
    assert float(m.distance(1.0, 4.0)) == 6.0
    assert float(m.radius(6.0)) == 3.0
    with pytest.raises(ValueError):
        LipschitzCertificate(-1.0, m)
    with pytest.raises(ValueError):
        LipschitzCertificate(float("inf"), m)
