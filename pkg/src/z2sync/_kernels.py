"""Hot loops of the heat-bath sampler, in numba and plain numpy.

Both backends consume the same pregenerated uniforms and perform the same
floating-point operations in the same order, so for a given input they
return the same chain.
"""

from __future__ import annotations

import math

import numpy as np

from . import _accel


def _sweeps_numpy(J, fields, spins, uniforms, scales, trace):
    n_sweeps, n = uniforms.shape
    record = trace.shape[0] > 0
    for s in range(n_sweeps):
        c = scales[s]
        for x in range(n):
            p_up = 0.5 * (1.0 + math.tanh(c * fields[x]))
            new = 1 if uniforms[s, x] < p_up else -1
            if new != spins[x]:
                fields += J[x] * float(new - spins[x])
                spins[x] = new
        if record:
            trace[s] = spins
    return spins


@_accel.njit
def _sweeps_numba(J, fields, spins, uniforms, scales, trace):
    n_sweeps, n = uniforms.shape
    record = trace.shape[0] > 0
    for s in range(n_sweeps):
        c = scales[s]
        for x in range(n):
            p_up = 0.5 * (1.0 + math.tanh(c * fields[x]))
            new = 1 if uniforms[s, x] < p_up else -1
            if new != spins[x]:
                step = float(new - spins[x])
                for y in range(n):
                    fields[y] += J[x, y] * step
                spins[x] = new
        if record:
            for x in range(n):
                trace[s, x] = spins[x]
    return spins


def heat_bath_sweeps(J, fields, spins, uniforms, scales, trace, backend=None):
    """Systematic-scan heat-bath sweeps, updating ``spins`` and ``fields`` in place.

    ``fields`` must equal ``J @ spins + h`` on entry.  Site ``x`` of sweep ``s``
    becomes +1 with probability ``(1 + tanh(c_s h_x)) / 2`` where ``c_s =
    scales[s]`` (1 for plain sampling, <1 during an annealed burn-in).
    ``trace`` has shape ``(n_sweeps, n)`` to record every sweep or ``(0, n)``.
    """
    use_numba = _accel.USE_NUMBA if backend is None else backend == "numba"
    fn = _sweeps_numba if use_numba else _sweeps_numpy
    return fn(J, fields, spins, uniforms, scales, trace)
