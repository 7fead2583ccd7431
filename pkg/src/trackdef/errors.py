"""Exception types shared across the package."""


class TrackdefError(Exception):
    """Base class for package-specific errors."""


class ConfigError(TrackdefError):
    """Invalid or inconsistent configuration (bad file, unknown key, missing checkpoint)."""


class CheckpointError(TrackdefError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


class TrainingDiverged(TrackdefError):
    """Training aborted because a loss or gradient became non-finite."""


class DataFormatError(TrackdefError):
    """Malformed sequence directory or annotation file."""
