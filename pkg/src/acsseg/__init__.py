"""ACS convolutions and 3D U-Nets for multimodal brain tumor segmentation, in NumPy."""
from .acs import acs_backward, acs_forward, split_channels
from .data import make_phantoms, read_volume, synth_dataset, write_volume
from .estimators import ETSuppressor, GradeClassifier, Segmenter
from .metrics import LabelVolume, dice, evaluate_case, hd95
from .network import build, build_classifier, build_jcs, count_parameters
from .plan import NetworkPlan, default_plan, load_plan, save_plan
from .postproc import PostprocConfig, threshold_et
from .transfer import WeightStore, load_store, resnet18_store, transfer_all, transfer_matching

__version__ = "0.1.0"

__all__ = [
    "ETSuppressor", "GradeClassifier", "LabelVolume", "NetworkPlan", "PostprocConfig",
    "Segmenter", "WeightStore", "acs_backward", "acs_forward", "build", "build_classifier",
    "build_jcs", "count_parameters", "default_plan", "dice", "evaluate_case", "hd95",
    "load_plan", "load_store", "make_phantoms", "read_volume", "resnet18_store", "save_plan",
    "split_channels", "synth_dataset", "threshold_et", "transfer_all", "transfer_matching",
    "write_volume",
]
