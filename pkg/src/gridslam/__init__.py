"""Multiresolution feature-grid SLAM on signed distance fields.

Submodules import numpy (and optionally numba) on first use; this
package root stays import-light so the CLI can pin thread counts
before any numeric library loads.
"""

__version__ = "0.1.0"
