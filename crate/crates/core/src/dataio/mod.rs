//! Mesh input, conversion to voxel and point representations, and the
//! procedural primitive dataset.

pub mod cache;
mod dataset;
mod mesh;
mod points;
mod primitives;
mod rotate;
mod voxel;

pub use dataset::{capped_indices, subset_by_class_count, toy_dataset, Dataset, ShapeRecord, Split, ToySpec};
pub use mesh::{load_off, normalize_shape, parse_off, write_off, TriangleMesh, Vec3};
pub use points::{sample_points, sample_surface, PointCloud, DEFAULT_POINTS};
pub use primitives::{generate_primitive, uv_sphere, Primitive};
pub use rotate::{rotate_up_axis, step_cos_sin, RotateUp, UpAxis, STEPS_PER_TURN};
pub use voxel::{triangle_box_overlap, voxelize, VoxelGrid, DEFAULT_RESOLUTION};


pub(crate) use mesh::{cross, dot, scale, sub};
