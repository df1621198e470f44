"""
    The multi-channel flow-based segmentation head: channel assignment of
    ground-truth cells by depth, target synthesis, the U-Net predictor, its
    loss, and flow-following recovery of instances.
"""

from penseg.seghead.config import HeadConfig, GT_ASSIGNMENTS
from penseg.seghead.assignment import (
    ChannelAssignment,
    assign_channels,
    assignment_for,
    kmeans_1d,
    random_assignment,
)
from penseg.seghead.targets import SegTargets, heat_flow, make_targets
from penseg.seghead.unet import (
    HeadModel,
    SegPrediction,
    head_forward,
    head_init,
    head_state_arrays,
    load_head_state,
)
from penseg.seghead.loss import LossBreakdown, seg_loss
from penseg.seghead.instances import (
    flows_to_instances,
    follow_flows,
    suppress_cross_channel,
)
