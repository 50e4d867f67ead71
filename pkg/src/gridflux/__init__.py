"""gridflux: A Python package for sparse AC power flow by gradient descent, with Newton-Raphson and DC baselines."""
