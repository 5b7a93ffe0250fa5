"""expanderlab: desk-scale monotonicity checks for long-time Ricci flow.

The package evolves symmetry-reduced testbed geometries (Milnor-frame
homogeneous metrics, 2-D conformal torus grids, constant-curvature model
spaces), constructs the associated unit-mass conjugate-heat densities,
and verifies the expanding-direction monotone quantities: the expander
entropy and its pointwise identity, the variational mu/nu functionals,
the scaled volume and first-eigenvalue functionals, and the forward
reduced length / reduced volume built from action-minimizing space-time
paths.
"""

__version__ = "0.1.0"
