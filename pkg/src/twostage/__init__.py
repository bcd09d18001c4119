"""Two-stage pre-train/fine-tune risk laboratory."""
