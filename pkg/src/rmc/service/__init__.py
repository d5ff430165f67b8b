"""HTTP service wrapping the package: submit training runs, evaluate checkpoints."""
