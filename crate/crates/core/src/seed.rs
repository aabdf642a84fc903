//! Root-seed splitting. Every subsystem draws from its own ChaCha stream
//! derived from `(root seed, stream tag, counter)`, so each is reproducible
//! on its own and training can resume at any step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Scene = 2,
    Dropout = 3,
    Noise = 4,
    Sampler = 5,
    Timestep = 6,
    Eval = 7,
    Test = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, stream: Stream, counter: u64) -> u64 {
    splitmix(splitmix(splitmix(root) ^ stream as u64) ^ counter)
}

pub fn rng(root: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, stream, counter))
}

pub fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}
