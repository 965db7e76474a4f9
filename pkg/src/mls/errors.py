class ConfigError(ValueError):
    """Invalid configuration value."""
