"""Training of the two task models and the checkpoint format."""
