"""Knowledge tracing with ability-attribute grouping and exercise-concept attention."""

__version__ = "0.1.0"
