"""
Prior, inverse-problem contract, Newton-CG and the Laplace posterior.
"""
