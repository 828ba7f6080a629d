import os

# BLAS must see these before numpy loads, so reductions stay single-threaded
# and float32 results are identical from run to run.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest  # noqa: E402


@pytest.fixture(autouse=True)
def _reset_diagnostics():
    from stainkit.autodiff import diagnostics

    diagnostics.reset()
    yield
