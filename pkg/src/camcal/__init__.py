"""camcal - long-tailed classification with class activation map calibration"""

__version__ = "0.1.0"
