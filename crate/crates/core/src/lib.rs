pub mod affordance;
pub mod bench;
pub mod geometry;
pub mod grasp;
pub mod io;
pub mod neural_render;
pub mod nn;
pub mod policy;
pub mod scene;
pub mod triplane;
pub mod tsdf;
