"""Subspace method of moments for 3-D reconstruction from 2-D projections.

Modules: tensorkit (sketching and Tucker algebra), specfun (special
functions), quadrature (sphere and SO(3) rules), forward (bases and the
projection simulator), moments (streaming compressed moments), recon
(sequential moment matching), evaluation (rendering, alignment, FSC),
container/store (binary files) and cli.
"""
__version__ = "0.1.0"
