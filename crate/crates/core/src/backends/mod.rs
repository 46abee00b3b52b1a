//! Every learned model sits behind one of these traits. In-process
//! implementations live in [`stub`]; [`remote`] speaks the JSON-lines wire
//! protocol in [`protocol`] over a [`transport::Transport`].

pub mod protocol;
pub mod remote;
pub mod stub;
pub mod transport;

use crate::action::{ActionChunk, Observation};
use crate::attribution::AttentionTensors;
use crate::error::Result;
use crate::image::Image;
use crate::mask::Mask;
use crate::regions::PromptTemplate;

/// The black-box policy `f(o, l)`.
pub trait PolicyBackend: Send + Sync {
    /// Samples `k` action chunks. `seed` makes stochastic backends replayable;
    /// deterministic backends may ignore it.
    fn predict(
        &self,
        obs: &Observation,
        instruction: &str,
        k: usize,
        seed: u64,
    ) -> Result<Vec<ActionChunk>>;
}

/// Vision-language model returning raw proposal text.
pub trait VlmBackend: Send + Sync {
    fn propose(&self, image: &Image, instruction: &str, template: &PromptTemplate)
        -> Result<String>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentHit {
    pub label: String,
    pub score: f64,
    pub mask: Mask,
}

/// Text-prompted segmentation.
pub trait SegBackend: Send + Sync {
    fn segment(
        &self,
        image: &Image,
        labels: &[String],
        box_threshold: f64,
        text_threshold: f64,
    ) -> Result<Vec<SegmentHit>>;
}

pub trait InpaintBackend: Send + Sync {
    /// `mask` is already dilated by `dilation` pixels.
    fn inpaint(&self, image: &Image, mask: &Mask, dilation: u32) -> Result<Image>;
}

/// Head-wise cross-attention weights and their gradients at one layer.
pub trait AttnBackend: Send + Sync {
    fn attention(&self, image: &Image, instruction: &str, layer: u32) -> Result<AttentionTensors>;
}

impl<T: PolicyBackend + ?Sized> PolicyBackend for &T {
    fn predict(&self, obs: &Observation, instruction: &str, k: usize, seed: u64) -> Result<Vec<ActionChunk>> {
        (**self).predict(obs, instruction, k, seed)
    }
}

impl<T: PolicyBackend + ?Sized> PolicyBackend for std::sync::Arc<T> {
    fn predict(&self, obs: &Observation, instruction: &str, k: usize, seed: u64) -> Result<Vec<ActionChunk>> {
        (**self).predict(obs, instruction, k, seed)
    }
}

/// Counts calls and sampled chunks of the wrapped policy.
pub struct CountingPolicy<P> {
    inner: P,
    calls: std::sync::atomic::AtomicUsize,
    chunks: std::sync::atomic::AtomicUsize,
}

impl<P> CountingPolicy<P> {
    pub fn new(inner: P) -> Self {
        CountingPolicy {
            inner,
            calls: Default::default(),
            chunks: Default::default(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }

    pub fn chunks(&self) -> usize {
        self.chunks.load(std::sync::atomic::Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, std::sync::atomic::Ordering::SeqCst);
        self.chunks.store(0, std::sync::atomic::Ordering::SeqCst);
    }
}

impl<P: PolicyBackend> PolicyBackend for CountingPolicy<P> {
    fn predict(&self, obs: &Observation, instruction: &str, k: usize, seed: u64) -> Result<Vec<ActionChunk>> {
        use std::sync::atomic::Ordering;
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.chunks.fetch_add(k, Ordering::SeqCst);
        self.inner.predict(obs, instruction, k, seed)
    }
}
