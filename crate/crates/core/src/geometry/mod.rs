//! Rotated-box overlap, neighbor search and farthest point sampling.

mod fps;
mod iou;
mod neighbors;

pub use fps::farthest_point_sample;
pub use iou::{bev_intersection_area, clip_convex, iou3d, iou_bev, polygon_area, AREA_EPS};
pub use neighbors::{
    brute_force_query, neighbor_query, squared_distance, NeighborList, NeighborMode, SpatialHashGrid,
};
