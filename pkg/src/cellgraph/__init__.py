"""Toolkit for geo-referenced cell adjacency graphs.

Turns labeled 3D cell-segmentation volumes into adjacency graphs with
geometric node/edge features, evaluates node-classification
predictions, and trains a small graph-convolutional baseline. Synthetic
organs with analytic ground truth back every geometric algorithm.
"""

from .volume_io import (
    CLASS_CODES,
    LabelTable,
    LabeledVolume,
    merge_labels,
    read_label_table,
    read_volume,
    validate_connectivity,
    write_label_table,
    write_volume,
)
from .graph_build import CellGraph, build_adjacency, boundary_normal, contact_area, fps_sample
from .frames import (
    LocalAxes,
    ReferenceFrame,
    build_local_axes,
    global_frame,
    growth_axes,
    hops_to_surface,
    surface_axes,
    third_axis,
)
from .features import (
    RawFeatureBlock,
    compute_all_blocks,
    current_flow_closeness,
    edge_features,
    node_geometry_features,
    node_graph_features,
    optional_features,
)
from .homogenize import (
    FeatureBundle,
    assemble,
    clip_hops,
    read_bundle,
    rp2_embed,
    unit_norm,
    write_bundle,
    zscore,
)
from .evalkit import (
    EvalReport,
    SplitSpec,
    class_avg_accuracy,
    evaluate,
    make_splits,
    top1_accuracy,
)
from .baseline import (
    GcnParams,
    TrainConfig,
    adam_step,
    augment,
    forward,
    loss_and_grads,
    normalized_adjacency,
    train,
)
from .synth import SynthSpec, SynthTruth, make_cell_file, make_shell_organ

__version__ = "0.1.0"
