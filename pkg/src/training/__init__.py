"""Training harness: datasets, config files, run records, checkpoints and the training loop."""
