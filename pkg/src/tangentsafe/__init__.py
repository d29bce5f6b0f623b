"""Safety layer that projects velocity actions onto the tangent space of a
slack-augmented constraint manifold, plus kinematics, geometry and an
evaluation harness."""

__version__ = "0.1.0"
