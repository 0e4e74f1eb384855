"""Mixed finite elements for rate-independent ferroelectric polarization.

Displacement, dielectric displacement, remanent polarization and the
electric-potential multiplier are solved monolithically per load increment;
the dielectric displacement is exactly divergence free by construction.
"""

__version__ = "0.1.0"
