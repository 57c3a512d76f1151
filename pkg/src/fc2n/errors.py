"""Exception types raised across the package."""


class FC2NError(Exception):
    """Base class for all package errors."""


class DimensionError(FC2NError, ValueError):
    """Tensor or image shapes are incompatible with an operation."""


class UnsupportedKernelError(FC2NError, ValueError):
    """Convolution kernel has an even spatial size."""


class StaleTapeError(FC2NError, RuntimeError):
    """A tape was asked to run backward a second time."""


class ConfigError(FC2NError, ValueError):
    """Invalid model, training or run configuration."""


class ImageFormatError(FC2NError, OSError):
    """Image file is unreadable, truncated or in an unsupported format."""


class UnsupportedDepthError(ImageFormatError):
    """Image file uses a bit depth other than 8 bits per sample."""


class ImageTooSmallError(FC2NError, ValueError):
    """Image is smaller than the requested patch; the caller should skip it."""


class CheckpointError(FC2NError, OSError):
    """Checkpoint file is corrupt, truncated or has the wrong version."""


class NonFiniteLossError(FC2NError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, lr: float, grad_norms: dict):
        self.step = step
        self.lr = lr
        self.grad_norms = grad_norms
        worst = sorted(grad_norms.items(), key=lambda kv: -_nan_last(kv[1]))[:5]
        detail = ", ".join(f"{k}={v:.3g}" for k, v in worst)
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3g}); largest grad norms: {detail}")


def _nan_last(v: float) -> float:
    return float("inf") if v != v else v
