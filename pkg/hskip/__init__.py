__all__ = [
    "config",
    "core",
    "errors",
    "experiments",
    "oracle",
    "protocol",
    "renderer",
    "scaling",
    "simnet",
]

__version__ = "0.1.0"
