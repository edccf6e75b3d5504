"""Numerical tests of Jensen's inequality for plane-wave gradient Young
measures: torus weights, discrete rank-one convexification, laminate
screening, rank-one connection counts and the randomized search."""

__version__ = "0.1.0"
