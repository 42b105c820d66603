"""Top-level package for the neural-ODE keyword spotting apps."""
