"""Return-method control laboratory for Vlasov-Poisson on the 2-torus."""
__version__ = "0.1.0"
