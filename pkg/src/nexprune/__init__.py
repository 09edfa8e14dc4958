"""Structural filter pruning driven by activation-pattern expressiveness.

Numpy-only toolkit: a small CNN engine with residual adds, bit-packed
expressiveness scoring, dependency-aware channel removal, an iterative
bottom-k pruning loop and score-map comparison metrics.
"""

from .analysis import (MapRaster, SimilarityReport, compare_maps, map_similarity,
                       rasterize_map, sampling_similarity_report, ssim,
                       state_similarity_report)
from .bits import PatternSet, binarize, hamming, pack_bits, pairwise_dissimilarity, unpack_bits
from .errors import (BackwardBeforeForwardError, CouplingError, LayerCollapseError,
                     NexpruneError, NonFiniteError, NoPrunableGroupError,
                     ShapeMismatchError)
from .graph import (CompressionReport, CouplingGroup, apply_prune, build_coupling_groups,
                    compression_report, count_flops, count_params, zero_fanout)
from .layers import (Add, AvgPool2d, BatchNorm2d, Conv2d, Flatten, Linear, MaxPool2d,
                     ReLU)
from .models import ARCHITECTURES, build
from .network import (Network, cross_entropy_loss, load_checkpoint, save_checkpoint,
                      sgd_step)
from .pruning import PruneConfig, PruneRun, pai_sweep, run_pruning, select_bottom_k
from .sampling import (Dataset, SamplingSpec, kmeans, load_dataset, make_blobs_dataset,
                       make_train_test, sample_batch, save_dataset)
from .scoring import (ALPHA_GRID, HybridConfig, ScoreMap, group_l1_importance,
                      group_scores, hybrid_score, nexp_map, nexp_score)
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"
