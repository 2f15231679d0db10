"""YOLO-PPA traffic-sign detector on a numpy autodiff core."""

__version__ = "0.1.0"
