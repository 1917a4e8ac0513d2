"""Joint continuous pose refinement and TV-regularised 3D reconstruction for cryo-EM."""

from .admm import AdmmConfig, admm_reconstruct
from .basis import DEFAULT_KBWF, KbwfParams
from .forward import DetectorGrid, Psf, build_psi_tables, backproject, compute_hth_kernel, project
from .geometry import EulerAngles, InPlaneShift, Pose, canonicalize, projection_matrix
from .joint import JointConfig, half_split_refine, joint_refine
from .metrics import fsc, pose_errors, resolution_at_threshold, volume_snr
from .refine import GdConfig, refine_latents_batched
from .simulate import SimConfig, generate_dataset, make_phantom

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig", "admm_reconstruct", "DEFAULT_KBWF", "KbwfParams", "DetectorGrid", "Psf",
    "build_psi_tables", "backproject", "compute_hth_kernel", "project", "EulerAngles",
    "InPlaneShift", "Pose", "canonicalize", "projection_matrix", "JointConfig",
    "half_split_refine", "joint_refine", "fsc", "pose_errors", "resolution_at_threshold",
    "volume_snr", "GdConfig", "refine_latents_batched", "SimConfig", "generate_dataset",
    "make_phantom",
]
