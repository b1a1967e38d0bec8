//! Part synthesis, material-removal meshes and STL I/O.

pub mod dataset;
pub mod mesh;
pub mod part;
pub mod stl;
pub mod synth;
pub mod vec3;
pub mod workpiece;

pub use mesh::{MeshEdge, TriMesh};
pub use part::{Family, FeatureKind, FeatureSpec, MainOp, OperationLabel, PartSpec, SubOp};
pub use stl::{read_stl, write_stl, StlFlavor};
pub use synth::{generate_dataset, GridSpec, SequenceSample};
pub use workpiece::{apply_operation, Workpiece};
