//! Model cost accounting, attention-distance measurement, Grad-CAM and the
//! CSV/PGM writers for their reports.

mod attention;
mod cam;
mod cost;
mod export;

pub use attention::{attention_distance, grid_distances, mean_attention_distance, AttnDistanceReport, LayerDistance};
pub use cam::{cam_parts, grad_cam, target_logit, CamGrid, CamParts};
pub use cost::{count_macs, count_params, module_of, CostReport, CostRow};
pub use export::{export_attn_csv, export_cost_csv, export_pgm, parse_pgm, pgm_string};
