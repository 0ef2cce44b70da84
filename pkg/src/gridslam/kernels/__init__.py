"""Hot numeric kernels, dispatched once at import time.

``gridslam.backend`` reads GRIDSLAM_BACKEND and this module binds the
chosen implementation's functions at package import. Library code
imports names from here; benchmarks and twin-consistency tests import
``numpy_impl`` / ``numba_impl`` directly.
"""

from ..backend import resolve_backend

ACTIVE_BACKEND = resolve_backend()

if ACTIVE_BACKEND == "numba":
    from . import numba_impl as impl
else:
    from . import numpy_impl as impl

gather_weighted = impl.gather_weighted
scatter_weighted = impl.scatter_weighted
gather_dot = impl.gather_dot
conv3d = impl.conv3d
conv3d_backward = impl.conv3d_backward
scatter_mean = impl.scatter_mean
primitive_sdf = impl.primitive_sdf
sphere_trace = impl.sphere_trace
min_dists = impl.min_dists

PRIM_SPHERE = impl.PRIM_SPHERE
PRIM_BOX = impl.PRIM_BOX
PRIM_HOLLOW_ROOM = impl.PRIM_HOLLOW_ROOM
