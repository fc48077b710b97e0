//! Crop extraction, t-SNE, and rater confusion statistics.

mod confusion;
mod crops;
mod tsne;

pub use confusion::{confusion_stats, responses_from_counts, ConfusionMatrix, Label, Response};
pub use crops::{area_resize, extract_crops, extract_images, Category, EmbeddingInput};
pub use tsne::{conditional_affinities, kl_divergence, tsne_embed, TsneConfig};
