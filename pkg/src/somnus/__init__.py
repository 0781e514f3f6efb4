"""somnus: sleep-period estimation from multi-device WiFi association logs."""

__version__ = "0.1.0"
