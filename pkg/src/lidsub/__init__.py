"""LID-based characterisation of adversarial subspaces."""
