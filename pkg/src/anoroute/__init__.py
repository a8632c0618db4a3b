"""Zero-shot anomaly detection engine over precomputed ViT embeddings.

Dual per-layer feature adapters (normal / anomaly branches) are blended by a
text-guided temperature-softmax router on top of a residual connection; maps
and scores come from patch/text cosine similarities. Training uses exact
hand-derived gradients with AdamW.
"""

from .adapter_net import AdapterParams, adapter_backward, adapter_forward, init_adapter
from .errors import (
    AnorouteError,
    ConfigError,
    FormatError,
    NumericalAbort,
    ValidationError,
)
from .fusion_scorer import (
    AnomalyOutput,
    ModelParams,
    aggregate_layers,
    forward_image,
    fuse,
    image_score,
    init_model,
    patch_anomaly_grid,
    upsample_bilinear,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    dice_loss,
    focal_loss,
    global_loss,
    loss_gradients,
    routing_loss,
    total_loss,
)
from .metrics import EvalReport, auroc, evaluate, max_f1, pixel_auroc
from .synth_data import SynthConfig, generate
from .tensor_store import (
    FeatureRecord,
    TensorContainer,
    TextBank,
    TextEntry,
    load_dataset,
    read_container,
    write_container,
)
from .text_router import RoutingDecision, cosine, project_text, route
from .trainer import OptimizerState, TrainConfig, adamw_step, resume, train

__version__ = "0.1.0"
