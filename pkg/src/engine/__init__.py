"""Training engine: autodiff, networks, loss weighting, problems, training loop, reference solver and diagnostics."""
