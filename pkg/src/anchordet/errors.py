class ConfigError(ValueError):
    """Invalid model or run configuration."""
