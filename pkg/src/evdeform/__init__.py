"""Dense 2D deformation tracking from hybrid event streams and low-rate frames.

The deformation field is carried by a triangle mesh whose anchors move along
piecewise-linear trajectories. Events drive a contrast objective over images
of warped events; frames drive a normalized cross-correlation objective over
barycentric intensity samples. A coarse-to-fine and neighbourhood-greedy
optimizer fits the anchors window by window.
"""

from .errors import (ConfigError, DegenerateTriangleError, NoAssociatedEventsError,
                     NoSurvivorsError, NoTextureError, OutOfImageError, OutsideMeshError,
                     RigidStageDivergedError, TableMismatchError, TimeOutOfWindowError,
                     TooFewEventsError, TrackingError, ZeroVarianceError)
from .geometry import (AffineMap, SimplicialMesh, affine_from_triangles, barycentric_of,
                       build_hierarchy, make_grid_mesh, point_in_triangle, signed_side,
                       subdivide)
from .trajectory import (TimeGrid, TrajectoryField, constant_field, displacement_field,
                         locate_and_weights, position_at, subdivide_field, warp_point)
from .events import (Events, EventWindow, IWE, build_iwe, contrast, partition_bins,
                     read_events_csv, warp1_objective, warp2_objective, write_events_csv)
from .frames import (Frame, bilinear_sample, frame_objective, read_frame_manifest,
                     read_pgm, sample_grid, write_pgm, zncc)
from .strain import (StrainField, anchor_strain, green_strain, strain_continuity,
                     von_mises)
from .optimizer import (ConvergenceReport, TrackerConfig, TrackState, assess_convergence,
                        coarse_to_fine, greedy_round, init_state, load_config,
                        rigid_stage, save_config, total_objective, track_sequence,
                        track_window)
from .simulator import (GroundTruth, SceneSpec, deformation_model, generate_events,
                        grid_query_points, ground_truth, make_sequence, make_texture,
                        render_frame)
from .evaluation import (DisplacementTable, MetricReport, epe, metric_report, read_table,
                         sepe, survival, write_report, write_table)
from .cli import cli

__version__ = "0.1.0"
