"""
    Configuration of the multi-channel segmentation head.
"""

from dataclasses import dataclass
from typing import Final, Literal, Sequence

from penseg.utils import ConfigurationError, validate_choice

GtAssignment = Literal["kmeans", "random", "single"]

GT_ASSIGNMENTS: Final[Sequence[str]] = ("kmeans", "random", "single")


@dataclass(frozen=True)
class HeadConfig:
    """
    Hyperparameters of the segmentation head, its targets and its
    flow-following post-processing.

    `n_out` is the number of depth-bucketed output channels; cells are
    assigned to channels by 1D k-means on their z-centroids (`"kmeans"`),
    uniformly at random (`"random"`), or all to a single channel
    (`"single"`, which requires `n_out == 1`).
    """

    n_out: int = 3
    gt_assignment: GtAssignment = "kmeans"
    unet_levels: int = 3
    unet_base_width: int = 16
    cellprob_threshold: float = 0.5
    flow_steps: int = 200
    flow_step_size: float = 1.0
    cross_channel_suppression: bool = False
    min_instance_size: int = 9

    def __post_init__(self):
        validate_choice(self.gt_assignment, GT_ASSIGNMENTS, "ground-truth assignment")
        for name in ("n_out", "unet_levels", "unet_base_width", "flow_steps"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigurationError(f"Expected positive integer {name}, found {value!r}.")
        if self.gt_assignment == "single" and self.n_out != 1:
            raise ConfigurationError(
                f"Single-channel assignment requires n_out = 1, found {self.n_out}."
            )
        if not 0 < self.cellprob_threshold < 1:
            raise ConfigurationError(
                f"Expected cellprob_threshold in (0, 1), found {self.cellprob_threshold}."
            )
        if self.flow_step_size <= 0:
            raise ConfigurationError(
                f"Expected positive flow_step_size, found {self.flow_step_size}."
            )
        if self.min_instance_size < 0:
            raise ConfigurationError(
                f"Expected min_instance_size >= 0, found {self.min_instance_size}."
            )

    @property
    def stride(self) -> int:
        """
        Lateral sizes must be multiples of this to pass through the U-Net.
        """
        return 2**self.unet_levels
