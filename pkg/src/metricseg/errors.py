class ValidationError(ValueError):
    """Bad input: a violated precondition, malformed file, or bad config value."""


class CheckpointError(ValidationError):
    pass
