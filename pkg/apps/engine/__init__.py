"""Neural-ODE keyword spotting engine."""
