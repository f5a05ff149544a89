"""Inverse-problem phase aberration correction for contrast ultrasound."""
