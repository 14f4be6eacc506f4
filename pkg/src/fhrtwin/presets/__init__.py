"""Shipped scenario configurations."""
