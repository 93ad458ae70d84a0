"""
Sparse linear algebra, finite elements and randomized eigensolvers.
"""
