"""convtrack: convolutional regression tracking with gated online updates."""

from .config import TrackerConfig, desk_defaults, load_config, reference_defaults
from .densemap import DenseMap, MapStats, gaussian_label, hann2d, map_stats, xcorr2d_valid
from .features import ConvLayer, ConvStack, Patch, Window, apply_window, crop_and_resize, extract
from .regression import FilterBank, SgdState, TrainSample, loss, grad_filters, sgd_step
from .tracker import TargetState, Tracker, UpdateHistory, pnr, should_update

__version__ = "0.1.0"
