"""ecglite: PTB-XL ECG classification pipeline for small devices."""
from ._accel import backend

__version__ = "0.1.0"
