"""Set estimation of dynamic discrete choice cost parameters with orthogonal moment inequalities."""
__version__ = "0.1.0"
