from .checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from .layers import BatchNorm2d, Conv2d, Linear, Module, ReLU, Sequential
from .models import DEFAULT_TAPS, FAMILIES, Model, ModelSpec, ModelSpecError, build_model
