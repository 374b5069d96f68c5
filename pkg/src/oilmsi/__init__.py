"""Multispectral assessment of coconut-oil adulteration and reuse."""
