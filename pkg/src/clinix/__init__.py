"""Stage-wise HGCN / Mamba U-shaped segmentation network on a NumPy autodiff core."""

from .blocks import (HGCNBlock, HgConv, HgConvSpec, ResidualBlock, ResidualMambaBlock,
                     channel_partition)
from .errors import (BuildError, ClinixError, ConfigurationError, ConstructionError,
                     ContractError, DataError, FormatError, GenerationError, OracleError,
                     PlanError, ShapeError, StateError, TrainingError)
from .losses import (ConfusionCounts, LossConfig, RegionPartition, adaptive_alpha_beta,
                     compound, cross_entropy, dice_loss, one_hot, region_dice_loss,
                     region_tversky_loss, supervise, tversky_loss)
from .metrics import SegmentationMetrics, metrics
from .net import (Fingerprint, Network, NetworkPlan, ablation_plan, build, derive_plan, forward,
                  preset_plan)
from .scan import linear_recurrence, scan_parallel, scan_sequential, ssm_layer
from .storage import (Checkpoint, load_checkpoint, read_volume, save_checkpoint,
                      write_volume)
from .synth import SynthSpec, VolumeSample, synth_generate
from .tensor import GradMap, Tape, Tensor, backward, finite_difference_grad
from .train import TrainConfig, evaluate, from_checkpoint, to_checkpoint, train

__version__ = "0.1.0"
