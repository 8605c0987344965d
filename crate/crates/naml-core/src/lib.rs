//! NAML: attentive multi-view news recommendation.
//!
//! Pipeline: raw news and impression logs go through [`text`] into padded
//! token-ID form; [`news_encoder`] fuses title, body, category and
//! subcategory views with word- and view-level attention; [`user_encoder`]
//! pools browsed-news vectors with news-level attention; [`trainer`] fits
//! the model with a negative-sampling softmax loss and Adam; [`eval`]
//! reports per-impression AUC/MRR/nDCG; [`datagen`] produces synthetic
//! corpora with known latent structure for end-to-end verification.
//!
//! All numerics run on the from-scratch reverse-mode tape in [`tensor`].

pub mod data;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod news_encoder;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod user_encoder;
