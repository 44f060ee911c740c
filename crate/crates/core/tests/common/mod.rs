#![allow(dead_code)]

pub mod oracles;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use idsim_core::model::{
    EmbeddingBundle, EmbeddingItem, ImageManifest, ManifestIndex, Split, Subset, TokenKind, Triplet,
    NegativeKind,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn randn(r: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || normal(r))
}

pub fn randn_vec(r: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || normal(r))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let m = na.max(nb);
    if m < 1e-300 {
        0.0
    } else {
        d / m
    }
}

/// Central differences of `f` at `x`, step `h`.
pub fn fd_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let up = f(&x);
            x[i] = x0 - h;
            let dn = f(&x);
            x[i] = x0;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

pub fn cls_bundle(items: Vec<(String, Array1<f64>)>) -> EmbeddingBundle {
    let dim = items[0].1.len();
    EmbeddingBundle::new(
        TokenKind::Cls,
        dim,
        items
            .into_iter()
            .map(|(id, v)| EmbeddingItem::cls(id, v.iter().map(|&x| x as f32).collect()))
            .collect(),
    )
    .unwrap()
}

/// Instances with well separated means; see [`separable`].
#[derive(Clone)]
pub struct Synthetic {
    pub records: Vec<ImageManifest>,
    pub cls: EmbeddingBundle,
    pub patch: EmbeddingBundle,
    pub triplets: Vec<Triplet>,
    pub test_triplets: Vec<(String, String, String)>,
}

pub fn image_id(inst: usize, img: usize) -> String {
    format!("i{inst:02}_{img:02}")
}

/// `instances × images` embeddings of dimension `dim`.
///
/// Each instance mean has per-coordinate RMS `sep·σ` (σ = 1); images and
/// patch tokens are the mean plus unit Gaussian noise. The last `n_test`
/// instances are test, the `n_val` before them validation.
pub fn separable(
    instances: usize,
    images: usize,
    dim: usize,
    patches: usize,
    sep: f64,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Synthetic {
    let mut r = rng(seed);
    let means: Vec<Array1<f64>> = (0..instances)
        .map(|_| {
            let u = randn_vec(&mut r, dim);
            let n = u.dot(&u).sqrt();
            u * (sep * (dim as f64).sqrt() / n)
        })
        .collect();
    let split_of = |k: usize| {
        if k < instances - n_val - n_test {
            Split::Train
        } else if k < instances - n_test {
            Split::Val
        } else {
            Split::Test
        }
    };
    let mut records = Vec::new();
    let mut cls = Vec::new();
    let mut patch = Vec::new();
    for (k, mu) in means.iter().enumerate() {
        for j in 0..images {
            let id = image_id(k, j);
            records.push(ImageManifest::new(&id, format!("inst{k:02}"), "synth", Subset::S1, split_of(k)));
            let v = mu + &randn_vec(&mut r, dim);
            cls.push(EmbeddingItem::cls(&id, v.iter().map(|&x| x as f32).collect()));
            let mut rows = Vec::with_capacity(patches * dim);
            for _ in 0..patches {
                let z = mu + &randn_vec(&mut r, dim);
                rows.extend(z.iter().map(|&x| x as f32));
            }
            patch.push(EmbeddingItem::patches(&id, patches, rows));
        }
    }
    let mut triplets = Vec::new();
    let mut test_triplets = Vec::new();
    for k in 0..instances {
        for j in 0..images {
            let a = image_id(k, j);
            let p = image_id(k, (j + 1) % images);
            let mut other = r.random_range(0..instances - 1);
            if other >= k {
                other += 1;
            }
            let n = image_id(other, r.random_range(0..images));
            match split_of(k) {
                Split::Test => test_triplets.push((a, p, n)),
                _ => triplets.push(Triplet::new(a, p, n, NegativeKind::MinedReal)),
            }
        }
    }
    Synthetic {
        records,
        cls: EmbeddingBundle::new(TokenKind::Cls, dim, cls).unwrap(),
        patch: EmbeddingBundle::new(TokenKind::Patch, dim, patch).unwrap(),
        triplets,
        test_triplets,
    }
}

impl Synthetic {
    pub fn index(&self) -> ManifestIndex {
        ManifestIndex::new(self.records.iter().cloned()).unwrap()
    }
}
