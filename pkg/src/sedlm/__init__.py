"""Sound event detection with a learned activity language model."""
