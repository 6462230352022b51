"""Key-node driven geometry codec for dynamic triangle mesh sequences."""

from .codec import (CodecConfig, decode_iframe, decode_sequence, encode_iframe,
                    encode_sequence, encode_sequence_with_references)
from .deform import (KeyNodeSet, TransformSet, WeightTable, apply_deformation,
                     build_node_graph, compute_influence_weights,
                     matrix_to_rotvec, rotvec_to_matrix)
from .entropy import (CauchyParams, Codebook, build_codebook, dequantize,
                      fit_cauchy, huffman_build, huffman_decode, huffman_encode,
                      quantize)
from .harness import report_components, sweep
from .keynodes import (decode_indices, encode_indices, generate_keynodes,
                       snap_to_vertices)
from .mesh import Mesh, MeshError, SurfaceIndex, farthest_point_sample, nearest_vertex
from .meshio import load_mesh, save_mesh
from .metrics import bd_rate, hausdorff, p2s_rmse
from .registration import (RegistrationParams, RegistrationReport, eval_loss,
                           extract_transforms)
from .residual import (ResidualConfig, ResidualFrame, ResidualOctree,
                       build_balanced_octree, compute_residuals,
                       cost_constrained_prune, decode_residual_frame,
                       encode_residual_frame, mark_ncoc, node_lambda)
from .synth import generate_sequence

__version__ = "0.1.0"
