"""PINN pipeline: physics-informed network training with a command line and an MCP tool server."""

__version__ = "1.0.0"
