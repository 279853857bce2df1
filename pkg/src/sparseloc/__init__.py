"""Sparse-voxel convolution engine and point-cloud place recognition pipeline."""

from .autodiff import Tape, Var
from .data import (Dataset, PointCloudRecord, TrainingTuple, build_tuples,
                   load_cloud, load_index, synth_dataset, write_cloud,
                   write_index)
from .evaluate import (DescriptorDatabase, EvalConfig, average_recall, knn,
                       load_database, one_percent_cutoff, recall_at_n,
                       recall_curve, save_database)
from .layers import (BatchNorm, SparseConv, relu, sparse_add, sparse_conv,
                     sparse_transposed_conv)
from .model import (Descriptor, MinkFPN, MinkLoc, ModelConfig, batch_tensor,
                    compute_descriptor, gem_pool, load_checkpoint, mac_pool,
                    save_checkpoint)
from .sparse import (KernelMap, PointCloud, SparseTensor, VoxelCoord,
                     build_kernel_map, downsample_coords, kernel_offsets,
                     quantize)
from .train import (Adam, AugmentConfig, SimilarityMasks, TrainingConfig,
                    augment, batch_hard_mine, build_batch, compute_masks,
                    dynamic_batch_expand, mined_triplet_loss, partition_epoch,
                    train, triplet_margin_loss)

__all__ = [name for name in dir() if not name.startswith("_")]
