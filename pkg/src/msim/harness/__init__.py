"""Data generation, noise, training, rollouts and the verification suites."""
