"""Training, checkpoints, cross-validation and run reports."""
