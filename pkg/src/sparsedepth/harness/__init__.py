"""Training, evaluation, experiments and the command-line interface."""
