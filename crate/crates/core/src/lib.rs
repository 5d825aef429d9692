//! Unsupervised texture prototypes for masked 3D scalar volumes.
//!
//! The crate covers the whole learning and prediction chain:
//!
//! * [`volume`]: volumes, masks, per-scan class labels and their on-disk formats.
//! * [`preprocess`]: HU-to-unit intensity mappings and uniform ROI sampling.
//! * [`features`]: the three 40-bin ROI descriptors (texton, DOG2, LBP2).
//! * [`clustering`]: K-means, prototype models, labeling and prototype histograms.
//! * [`merging`]: iterative prototype pruning by distance and spatial co-occurrence.
//! * [`regression`]: simplex-constrained least squares from histograms to class mixtures.
//! * [`evaluation`]: ICC, cross validation, split-half reproducibility, disease prototypes.
//! * [`synth`]: synthetic phantoms with planted textures and known mixtures.
//! * [`pipeline`]: configuration and the train / predict orchestration shared by the CLI.

pub mod clustering;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod merging;
pub mod pipeline;
pub mod preprocess;
pub mod regression;
pub mod seed;
pub mod synth;
pub mod volume;

pub use clustering::{
    assign_prototype, fit_prototypes, kmeans, label_volume, prototype_histogram, KMeansConfig,
    KMeansResult, LabelMap, LabeledPoint, PrototypeFit, PrototypeHistogram, PrototypeModel,
};
pub use error::{Error, Result};
pub use evaluation::{
    cross_validate, disease_prototypes, hungarian, icc, reproducibility, split_half_reproducibility,
    CvReport, IccEntry, ReproReport,
};
pub use features::{
    dog2_feature, lbp2_feature, lbp_code, texton_feature, train_texton_codebook, Dog2Calibration,
    FeatureKind, FeatureModel, RoiFeature, TextonCodebook, FEATURE_LEN,
};
pub use merging::{
    chi2_distance, cooccurrence, inter_prototype_distance, CooccurrenceMatrix, LineageEntry, Merger,
};
pub use pipeline::{PipelineConfig, ScanSamples, TrainedModel};
pub use preprocess::{map_intensity, sample_rois, IntensityMap, RoiMode, RoiPatch, SampleSpec};
pub use regression::{project_to_simplex, FitOptions, RegressionModel};
pub use synth::{generate_phantom, PhantomScan, PhantomSpec, TextureGenerator};
pub use volume::{read_labels, read_mask, read_volume, GlobalLabel, Mask, TissueClass, Volume};
