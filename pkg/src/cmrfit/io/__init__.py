from .dataset import Dataset, load_dataset, save_dataset
from .export import export_obj, read_obj
from .images import read_pnm, write_pnm
from .metrics import MetricsReport, eval_metrics, mask_iou
from .synth import SynthSpec, synth_generate

__all__ = [
    "Dataset", "load_dataset", "save_dataset", "export_obj", "read_obj", "read_pnm", "write_pnm",
    "MetricsReport", "eval_metrics", "mask_iou", "SynthSpec", "synth_generate",
]
