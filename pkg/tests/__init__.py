"""
Tests package for the federated heterogeneity simulator
"""
