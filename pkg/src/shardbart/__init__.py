"""Sharded Bayesian additive regression trees."""
