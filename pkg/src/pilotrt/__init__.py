"""Pilot-style task runtime with pluggable executor backends and a sim/real experiment harness.

Submodules are imported on demand so that pool workers start quickly.
"""

__version__ = "0.1.0"
