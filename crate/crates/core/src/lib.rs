//! Event-driven spiking transformer stack: LIF neurons, spike-driven self-attention,
//! Conv/Transformer SNN blocks with membrane shortcuts, a FLOPs/firing-rate energy
//! model, and toy-scale surrogate-gradient training.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); concrete aliases are
//! exported below.

pub mod attention;
pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod energy;
pub mod error;
pub mod event_file;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod neuron;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{
    firing_rate, from_events, to_events, DenseTensor, Event, EventList, IntTensor, SpikeTensor,
};

pub type Tensor32 = DenseTensor<f32>;
pub type Tensor64 = DenseTensor<f64>;
pub type LifParams32 = neuron::LifParams<f32>;
pub type LifParams64 = neuron::LifParams<f64>;
pub type ConvKernel32 = kernels::ConvKernel<f32>;
pub type ConvKernel64 = kernels::ConvKernel<f64>;
