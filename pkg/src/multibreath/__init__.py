"""Multi-label respiratory sound classification with class-specific residual attention."""

from .csra import CsraHeadConfig, csra_logits, predict_labels
from .backbone import BackboneConfig
from .frontend import FrontendConfig, MaskSpec, Waveform, waveform_to_logmel
from .metrics import confusion, icbhi_metrics
from .model import MultiBreathModel

__version__ = "0.1.0"

__all__ = ["BackboneConfig", "CsraHeadConfig", "FrontendConfig", "MaskSpec", "MultiBreathModel", "Waveform",
           "confusion", "csra_logits", "icbhi_metrics", "predict_labels", "waveform_to_logmel"]
