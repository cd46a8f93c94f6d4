"""Instance-embedded deformable Gaussians: splatting, identity estimation, resampling and evaluation."""

from .core import (
    FieldSample,
    GaussianSet,
    ModelState,
    ParameterLayout,
    effective_identities,
    effective_identity,
    field_query,
    load_checkpoint,
    pack_parameters,
    save_checkpoint,
    unpack_parameters,
)
from .data import FrameObservation, SceneDataset, SynthSpec, load_scene, synth_scene, write_scene, zigzag_merge
from .deform import DeformationField, encode
from .estimator import InstanceFieldModel
from .identity import estimate_identities
from .metrics import MetricReport, macc_inst, macc_pix, miou, panoptic_map
from .resample import resample_round, volume_adjust
from .splat import Camera, RenderBuffers, render, render_backward, render_reference
from .train import TrainConfig, fit, train_instance, train_reconstruction

__version__ = "0.1.0"

__all__ = [
    "Camera", "DeformationField", "FieldSample", "FrameObservation", "GaussianSet", "InstanceFieldModel",
    "MetricReport", "ModelState", "ParameterLayout", "RenderBuffers", "SceneDataset", "SynthSpec",
    "TrainConfig", "effective_identities", "effective_identity", "encode", "estimate_identities",
    "field_query", "fit", "load_checkpoint", "load_scene", "macc_inst", "macc_pix", "miou",
    "pack_parameters", "panoptic_map", "render", "render_backward", "render_reference",
    "resample_round", "save_checkpoint", "synth_scene", "train_instance", "train_reconstruction",
    "unpack_parameters", "volume_adjust", "write_scene", "zigzag_merge",
]
