//! Dimensionality reduction: uncentered PCA and UMAP, with a shared
//! fit/transform interface and an on-disk format.

mod io;
pub mod knn;
mod pca;
mod umap;

pub use io::{reducer_from_bytes, reducer_load, reducer_save, reducer_to_bytes};
pub use knn::{KnnGraph, KnnMethod, Metric};
pub use pca::{pca_fit, pca_transform, PcaModel};
pub use umap::{
    fit_curve_params, fuzzy_simplicial_set, fuzzy_union, smooth_knn_calibrate, umap_fit,
    umap_transform, Calibration, FuzzyGraph, UmapModel, UmapParams, UmapReport,
};

use crate::error::Result;
use crate::linalg::Matrix;

/// A fitted reducer of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Reducer {
    Pca(PcaModel),
    Umap(UmapModel),
}

impl Reducer {
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Reducer::Pca(m) => pca_transform(m, x),
            Reducer::Umap(m) => umap_transform(m, x),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Reducer::Pca(m) => m.dim(),
            Reducer::Umap(m) => m.fit_data.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Reducer::Pca(m) => m.k(),
            Reducer::Umap(m) => m.out_dims,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Reducer::Pca(_) => "pca",
            Reducer::Umap(_) => "umap",
        }
    }
}
