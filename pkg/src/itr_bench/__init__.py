"""CATE / ITR estimation for high-dimensional data."""
